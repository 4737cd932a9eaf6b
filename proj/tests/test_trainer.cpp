#include "e2stn/e2stn.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace e2stn;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.model_dim = 8;
  m.heads = 2;
  m.ffn_dim = 16;
  m.decoder_layers = 1;
  m.cheb_order = 2;
  m.graph_features = 8;
  m.hidden = 16;
  m.filters1 = 4;
  m.depth = 2;
  m.filters2 = 4;
  return m;
}

DatasetPair tiny_task(std::uint64_t seed = 1) {
  SynthShiftConfig sc;
  sc.channels = 4;
  sc.bands = 3;
  sc.classes = 2;
  sc.samples_per_class_per_subject = 10;
  sc.subjects_per_dataset = 2;  // 40 samples per domain
  sc.seed = seed;
  return generate_synthetic_pair(sc);
}

TrainConfig tiny_train(TrainMode mode, int epochs) {
  TrainConfig tc;
  tc.model = tiny_model();
  tc.epochs = epochs;
  tc.mode = mode;
  tc.seed = 3;
  return tc;
}

// Leaves the classifier with constant logits favouring class `label`.
template <typename T>
void force_constant_prediction(Model<T>& m, int label) {
  m.graph.fc2_w.value.setZero();
  m.graph.fc2_b.value.setZero();
  m.graph.fc2_b.value(0, label) = 5;
}

Dataset labelled(int C, int B, const std::vector<std::pair<int, int>>& label_subject) {
  Dataset ds;
  ds.channel_count = C;
  ds.band_count = B;
  ds.class_names = default_class_names(3);
  for (auto [label, subject] : label_subject) ds.samples.push_back({MatD::Ones(C, B), label, subject, "t"});
  return ds;
}

}  // namespace

TEST(Train, TinySeparableTaskIsFitWithin200Epochs) {
  const auto data = tiny_task();
  ASSERT_EQ(data.source.size(), 40u);
  const auto result = train<float>(data.source, data.target, tiny_train(TrainMode::full, 200));
  ASSERT_EQ(result.metrics.size(), 200u);
  const auto hit = std::find_if(result.metrics.begin(), result.metrics.end(),
                                [](const MetricsRecord& r) { return r.train_acc == 100.0; });
  EXPECT_NE(hit, result.metrics.end());
  EXPECT_EQ(result.metrics.back().train_acc, 100.0);

  // Evaluating on the fitted source gives a perfect, uniform score.
  auto model = result.model;
  const EvalResult ev = evaluate(model, data.source);
  EXPECT_EQ(ev.acc, 100.0);
  EXPECT_EQ(ev.std, 0.0);

  // The identity constraint is being optimized.
  const std::size_t tenth = result.metrics.size() / 10;
  double first = 0, last = 0;
  for (std::size_t i = 0; i < tenth; ++i) {
    first += result.metrics[i].L_id;
    last += result.metrics[result.metrics.size() - 1 - i].L_id;
  }
  EXPECT_LT(last, first);
}

TEST(Train, SameSeedGivesIdenticalMetricStreams) {
  const auto data = tiny_task();
  auto a = train<float>(data.source, data.target, tiny_train(TrainMode::full, 5));
  auto b = train<float>(data.source, data.target, tiny_train(TrainMode::full, 5));
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    EXPECT_EQ(a.metrics[i].L_total, b.metrics[i].L_total);
    EXPECT_EQ(a.metrics[i].L_id, b.metrics[i].L_id);
    EXPECT_EQ(a.metrics[i].acc, b.metrics[i].acc);
    EXPECT_EQ(a.metrics[i].subject_acc, b.metrics[i].subject_acc);
  }
  TrainConfig other = tiny_train(TrainMode::full, 5);
  other.seed = 4;
  auto c = train<float>(data.source, data.target, other);
  EXPECT_NE(c.metrics.back().L_total, a.metrics.back().L_total);
}

TEST(Train, AblationRecordsZeroTransferLosses) {
  const auto data = tiny_task();
  const auto result = train<float>(data.source, data.target, tiny_train(TrainMode::ablation_t, 20));
  for (const auto& r : result.metrics) {
    EXPECT_EQ(r.L_c, 0.0);
    EXPECT_EQ(r.L_s, 0.0);
    EXPECT_EQ(r.L_id, 0.0);
    EXPECT_GT(r.L_ce, 0.0);
  }
}

TEST(Train, AblationLeavesTransferAndEvalStackUntouched) {
  const auto data = tiny_task();
  TrainConfig tc = tiny_train(TrainMode::ablation_t, 3);
  auto result = train<float>(data.source, data.target, tc);
  tc.model.channels = 4;
  tc.model.bands = 3;
  tc.model.classes = 2;
  Model<float> fresh(tc.model, tc.seed);
  std::vector<Mat<float>> before, after;
  fresh.transfer.visit([&](Param<float>& p) { before.push_back(p.value); });
  fresh.eval.visit([&](Param<float>& p) { before.push_back(p.value); });
  result.model.transfer.visit([&](Param<float>& p) { after.push_back(p.value); });
  result.model.eval.visit([&](Param<float>& p) { after.push_back(p.value); });
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(before[i] == after[i]);
}

TEST(Train, LoggedTotalMatchesWeightedComponents) {
  const auto data = tiny_task();
  TrainConfig tc = tiny_train(TrainMode::full, 10);
  tc.batch_size = 8;  // several steps per epoch
  const auto result = train<double>(data.source, data.target, tc);
  for (const auto& r : result.metrics) {
    const double recomputed = total_loss(r.L_c, r.L_s, r.L_id, r.L_ce, tc.weights);
    EXPECT_NEAR(r.L_total, recomputed, 1e-9 * std::max(1.0, std::abs(recomputed)));
  }
}

TEST(Train, EvalEveryControlsRecordCount) {
  const auto data = tiny_task();
  TrainConfig tc = tiny_train(TrainMode::ablation_t, 7);
  tc.eval_every = 3;
  const auto result = train<float>(data.source, data.target, tc);
  std::vector<int> epochs;
  for (const auto& r : result.metrics) epochs.push_back(r.epoch);
  EXPECT_EQ(epochs, (std::vector<int>{3, 6, 7}));
}

TEST(Train, FrozenEvalStackIsNotUpdated) {
  const auto data = tiny_task();
  TrainConfig tc = tiny_train(TrainMode::full, 2);
  tc.freeze_eval_stack = true;
  auto result = train<float>(data.source, data.target, tc);
  tc.model.channels = 4;
  tc.model.bands = 3;
  tc.model.classes = 2;
  Model<float> fresh(tc.model, tc.seed);
  std::vector<Mat<float>> before;
  fresh.eval.visit([&](Param<float>& p) { before.push_back(p.value); });
  std::size_t i = 0;
  result.model.eval.visit([&](Param<float>& p) { EXPECT_TRUE(p.value == before[i++]) << p.name; });
  bool transfer_moved = false;
  std::vector<Mat<float>> t0;
  fresh.transfer.visit([&](Param<float>& p) { t0.push_back(p.value); });
  i = 0;
  result.model.transfer.visit([&](Param<float>& p) { transfer_moved |= !(p.value == t0[i++]); });
  EXPECT_TRUE(transfer_moved);
}

TEST(Train, RejectsBadInputs) {
  const auto data = tiny_task();
  TrainConfig tc = tiny_train(TrainMode::full, 1);
  tc.epochs = 0;
  EXPECT_THROW(train<float>(data.source, data.target, tc), ConfigError);
  tc = tiny_train(TrainMode::full, 1);
  tc.learning_rate = 0;
  EXPECT_THROW(train<float>(data.source, data.target, tc), ConfigError);
  SynthShiftConfig sc;
  sc.channels = 5;
  sc.bands = 3;
  const auto other = generate_synthetic_pair(sc);
  EXPECT_THROW(train<float>(data.source, other.target, tiny_train(TrainMode::full, 1)), DimensionError);
  Dataset empty = data.target;
  empty.samples.clear();
  EXPECT_THROW(train<float>(data.source, empty, tiny_train(TrainMode::full, 1)), ConfigError);
}

TEST(Train, NonFiniteValuesAbortWithContext) {
  auto data = tiny_task();
  for (auto& s : data.source.samples) s.features *= 1e200;
  try {
    train<double>(data.source, data.target, tiny_train(TrainMode::full, 1));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
  }
}

TEST(Evaluate, ConstantPredictorOnBalancedTarget) {
  SynthShiftConfig sc;
  sc.channels = 4;
  sc.bands = 3;
  sc.classes = 3;
  const auto data = generate_synthetic_pair(sc);
  ModelConfig mc = tiny_model();
  mc.channels = 4;
  mc.bands = 3;
  mc.classes = 3;
  Model<float> m(mc, 1);
  force_constant_prediction(m, 0);
  const EvalResult ev = evaluate(m, data.target);
  EXPECT_NEAR(ev.acc, 100.0 / 3.0, 0.01);
  EXPECT_NEAR(ev.std, 0.0, 1e-9);
  for (int p = 0; p < 3; ++p) {
    EXPECT_EQ(ev.confusion[static_cast<std::size_t>(p)][0], 60);
    EXPECT_EQ(ev.confusion[static_cast<std::size_t>(p)][1], 0);
  }
}

TEST(Evaluate, PerSubjectMeanAndPopulationStd) {
  ModelConfig mc = tiny_model();
  mc.channels = 2;
  mc.bands = 2;
  mc.classes = 3;
  Model<double> m(mc, 2);
  force_constant_prediction(m, 1);
  // Subject 0: 2 of 5 correct (40%); subject 1: 3 of 5 correct (60%).
  const Dataset ds = labelled(2, 2, {{1, 0}, {1, 0}, {0, 0}, {2, 0}, {0, 0}, {1, 1}, {1, 1}, {1, 1}, {2, 1}, {0, 1}});
  const EvalResult ev = evaluate(m, ds);
  EXPECT_DOUBLE_EQ(ev.subject_acc.at(0), 40.0);
  EXPECT_DOUBLE_EQ(ev.subject_acc.at(1), 60.0);
  EXPECT_DOUBLE_EQ(ev.acc, 50.0);
  EXPECT_DOUBLE_EQ(ev.std, 10.0);
  EXPECT_DOUBLE_EQ(accuracy(m, ds), 50.0);
}

TEST(Evaluate, LabelOutsideModelIsConfigError) {
  ModelConfig mc = tiny_model();
  mc.channels = 2;
  mc.bands = 2;
  mc.classes = 2;
  Model<double> m(mc, 2);
  EXPECT_THROW(evaluate(m, labelled(2, 2, {{2, 0}})), ConfigError);
}

TEST(Optimizer, SkipsFrozenParametersAndFollowsSgd) {
  ModelConfig mc = tiny_model();
  mc.channels = 2;
  mc.bands = 2;
  mc.classes = 2;
  Model<double> m(mc, 5);
  m.zero_grad();
  m.visit([](Param<double>& p) { p.grad.setConstant(1.0); });
  m.graph.ws.frozen = true;
  const MatD ws = m.graph.ws.value, wf = m.graph.wf.value;
  TrainConfig tc;
  tc.optimizer = OptimizerKind::sgd;
  tc.learning_rate = 0.5;
  Optimizer<double> opt(tc);
  opt.step(m);
  EXPECT_TRUE(m.graph.ws.value == ws);
  EXPECT_LT((m.graph.wf.value - (wf.array() - 0.5).matrix()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  ModelConfig mc = tiny_model();
  mc.channels = 2;
  mc.bands = 2;
  mc.classes = 2;
  Model<double> m(mc, 6);
  m.zero_grad();
  m.visit([](Param<double>& p) { p.grad.setConstant(-3.0); });
  const MatD before = m.graph.fc1_w.value;
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  Optimizer<double> opt(tc);
  opt.step(m);
  // Bias-corrected first step is lr * g / (|g| + eps).
  const MatD moved = m.graph.fc1_w.value - before;
  EXPECT_LT((moved.array() - 1e-2).abs().maxCoeff(), 1e-9);
}

TEST(GradientCheck, FreshInitPasses) {
  const GradCheckReport r = gradient_check({});
  EXPECT_TRUE(r.passed) << (r.failed.empty() ? "" : r.failed.front());
  EXPECT_LT(r.max_rel_error, 1e-4);
  std::size_t checked = 0;
  for (const auto& t : r.tensors) checked += t.status == GradStatus::pass;
  EXPECT_GT(checked, r.tensors.size() / 2);
}

TEST(GradientCheck, CorruptedTensorIsReported) {
  GradCheckConfig cfg;
  cfg.corrupt = [](Model<double>& m) { m.graph.fc1_w.grad *= 1.5; };
  const GradCheckReport r = gradient_check(cfg);
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.failed, (std::vector<std::string>{"graph.fc1_w"}));
}

TEST(GradientCheck, DeadUnitsAreSkippedNotFailed) {
  GradCheckConfig cfg;
  cfg.prepare = [](Model<double>& m) {
    // Kill the hidden layer: fc1 weights zero and a negative bias.
    m.graph.fc1_w.value.setZero();
    m.graph.fc1_b.value.setConstant(-1.0);
  };
  const GradCheckReport r = gradient_check(cfg);
  EXPECT_TRUE(r.passed);
  for (const auto& t : r.tensors)
    if (t.name == "graph.fc1_w" || t.name == "graph.fc1_b" || t.name == "graph.fc2_w") {
      EXPECT_EQ(t.status, GradStatus::zero_gradient) << t.name;
      EXPECT_STREQ(to_string(t.status), "zero-gradient, skipped");
    }
}

TEST(GradientCheck, RejectsFullSizeConfig) {
  GradCheckConfig cfg;
  cfg.model = ModelConfig{};
  EXPECT_THROW(gradient_check(cfg), ConfigError);
}
