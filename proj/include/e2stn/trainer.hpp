#pragma once

#include "e2stn/data_model.hpp"
#include "e2stn/model.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>

namespace e2stn {

enum class OptimizerKind { sgd, adam };
enum class TrainMode { full, ablation_t };

inline const char* to_string(TrainMode m) { return m == TrainMode::full ? "full" : "ablation-t"; }

// Per-step loss values, as seen by TrainConfig::on_step.
struct StepLosses {
  int epoch = 0, step = 0;
  double L_c = 0, L_s = 0, L_id = 0, L_ce = 0, L_total = 0;
};

struct TrainConfig {
  ModelConfig model;
  int epochs = 300;
  int batch_size = 64;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::full;
  int eval_every = 1;
  Reduction ce_reduction = Reduction::sum;
  bool freeze_eval_stack = false;
  std::function<void(const StepLosses&)> on_step;

  void validate() const {
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be > 0");
    if (eval_every < 1) throw ConfigError("train config: eval_every must be >= 1");
    weights.validate();
  }
};

struct MetricsRecord {
  int epoch = 0;
  double L_c = 0, L_s = 0, L_id = 0, L_ce = 0, L_total = 0;
  double train_acc = 0;
  std::map<int, double> subject_acc;
  double acc = 0;
  double std = 0;
};

struct EvalResult {
  std::map<int, double> subject_acc;  // percent
  double acc = 0;                     // mean over subjects, percent
  double std = 0;                     // population std over subjects
  std::vector<std::vector<long>> confusion;  // [true][predicted]
  int skipped_groups = 0;
};

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

template <typename T>
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(Model<T>& model) {
    ++t_;
    std::size_t i = 0;
    const T lr = static_cast<T>(cfg_.learning_rate);
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T eps = static_cast<T>(cfg_.adam_eps);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, t_));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, t_));
    model.visit([&](Param<T>& p) {
      if (m_.size() <= i) {
        m_.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
        v_.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
      }
      if (!p.frozen && p.grad.size() == p.value.size()) {
        if (cfg_.optimizer == OptimizerKind::sgd) {
          p.value -= lr * p.grad;
        } else {
          Mat<T>& m = m_[i];
          Mat<T>& v = v_[i];
          m = b1 * m + (T(1) - b1) * p.grad;
          v = b2 * v + (T(1) - b2) * p.grad.cwiseAbs2();
          p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
        }
      }
      ++i;
    });
  }

 private:
  TrainConfig cfg_;
  std::vector<Mat<T>> m_, v_;
  int t_ = 0;
};

// ---------------------------------------------------------------------------
// Joint objective on one batch
// ---------------------------------------------------------------------------

struct BatchPair {
  std::size_t source = 0;
  std::size_t target = 0;
};

template <typename T>
struct BatchLoss {
  Var<T> content, style, identity, ce, total;
  int correct = 0;  // argmax hits on the original source samples
};

// Builds the batch objective on `tape`. Transfer losses are averaged over the
// batch; the cross-entropy runs over originals then stylized samples (1:1)
// with reduction as configured. In ablation mode only the originals' CE is built.
template <typename T>
BatchLoss<T> batch_loss(Model<T>& model, const Dataset& source, const Dataset& target,
                        std::span<const BatchPair> pairs, TrainMode mode, Reduction reduction,
                        const LossWeights& weights, Tape<T>& tape) {
  if (pairs.empty()) throw ConfigError("batch_loss: empty batch");
  std::vector<Var<T>> probs;
  std::vector<int> labels;
  BatchLoss<T> out;
  Var<T> lc{}, ls{}, lid{};
  const T inv_n = T(1) / static_cast<T>(pairs.size());
  auto accumulate = [](Var<T>& acc, Var<T> v) { acc = acc.tape ? ad::add(acc, v) : v; };

  for (const BatchPair& pr : pairs) {
    const Sample& s = source.samples.at(pr.source);
    Var<T> xs = tape.constant(s.features.cast<T>());
    auto ds = discriminate(xs, model.graph);
    probs.push_back(ds.probs);
    labels.push_back(s.label);
    if (predict_label(ds.probs.value().row(0)) == s.label) ++out.correct;
  }
  if (mode == TrainMode::full) {
    for (const BatchPair& pr : pairs) {
      const Sample& s = source.samples.at(pr.source);
      Var<T> xs = tape.constant(s.features.cast<T>());
      Var<T> xt = tape.constant(target.samples.at(pr.target).features.cast<T>());
      Var<T> xhat = stylize(xs, xt, model.transfer);
      probs.push_back(discriminate(xhat, model.graph).probs);
      labels.push_back(s.label);

      auto f_s = eval_features(xs, model.eval);
      auto f_t = eval_features(xt, model.eval);
      auto f_hat = eval_features(xhat, model.eval);
      accumulate(lc, content_loss(f_hat, f_s));
      accumulate(ls, style_loss(f_hat, f_t));
      auto f_ss = eval_features(stylize(xs, xs, model.transfer), model.eval);
      auto f_tt = eval_features(stylize(xt, xt, model.transfer), model.eval);
      accumulate(lid, identity_loss(f_ss, f_s, f_tt, f_t));
    }
    out.content = ad::scale(lc, inv_n);
    out.style = ad::scale(ls, inv_n);
    out.identity = ad::scale(lid, inv_n);
  } else {
    out.content = tape.constant(Mat<T>::Zero(1, 1));
    out.style = tape.constant(Mat<T>::Zero(1, 1));
    out.identity = tape.constant(Mat<T>::Zero(1, 1));
  }
  out.ce = cross_entropy(probs, labels, reduction);
  out.total = total_loss(out.content, out.style, out.identity, out.ce, weights);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Fills acc/std from subject_acc (population std).
inline void summarize_subjects(EvalResult& r) {
  if (r.subject_acc.empty()) {
    r.acc = r.std = 0.0;
    return;
  }
  double mean = 0.0;
  for (const auto& [s, a] : r.subject_acc) mean += a;
  mean /= static_cast<double>(r.subject_acc.size());
  double var = 0.0;
  for (const auto& [s, a] : r.subject_acc) var += (a - mean) * (a - mean);
  r.acc = mean;
  r.std = std::sqrt(var / static_cast<double>(r.subject_acc.size()));
}

template <typename T>
Mat<T> predict_probs(Model<T>& model, const MatD& x) {
  Tape<T> tape(false);
  return discriminate(tape.constant(x.cast<T>()), model.graph).probs.value();
}

template <typename T>
EvalResult evaluate(Model<T>& model, const Dataset& ds) {
  const int P = model.cfg.classes;
  EvalResult r;
  r.confusion.assign(static_cast<std::size_t>(P), std::vector<long>(static_cast<std::size_t>(P), 0));
  std::map<int, std::pair<long, long>> hits;  // subject -> (correct, total)
  for (const Sample& s : ds.samples) {
    if (s.label < 0 || s.label >= P) throw ConfigError("evaluate: label outside model classes");
    const int pred = predict_label(predict_probs(model, s.features).row(0));
    ++r.confusion[static_cast<std::size_t>(s.label)][static_cast<std::size_t>(pred)];
    auto& h = hits[s.subject_id];
    h.first += pred == s.label;
    h.second += 1;
  }
  for (const auto& [subject, h] : hits) {
    if (h.second == 0) {
      ++r.skipped_groups;
      continue;
    }
    r.subject_acc[subject] = 100.0 * static_cast<double>(h.first) / static_cast<double>(h.second);
  }
  summarize_subjects(r);
  return r;
}

template <typename T>
double accuracy(Model<T>& model, const Dataset& ds) {
  if (ds.samples.empty()) return 0.0;
  long correct = 0;
  for (const Sample& s : ds.samples)
    correct += predict_label(predict_probs(model, s.features).row(0)) == s.label;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(ds.samples.size());
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

template <typename T>
struct TrainResult {
  Model<T> model;
  std::vector<MetricsRecord> metrics;
  EvalResult final_eval;
};

inline void check_compatible(const Dataset& source, const Dataset& target) {
  validate(source);
  validate(target);
  if (source.channel_count != target.channel_count || source.band_count != target.band_count)
    throw DimensionError("source is " + shape_str(source.channel_count, source.band_count) +
                         ", target is " + shape_str(target.channel_count, target.band_count));
  if (source.samples.empty()) throw ConfigError("train: empty source dataset");
  if (target.samples.empty()) throw ConfigError("train: empty target dataset");
}

// `on_record` (optional) sees every metrics record as it is produced.
template <typename T>
TrainResult<T> train(const Dataset& source, const Dataset& target, TrainConfig cfg,
                     const std::function<void(const MetricsRecord&)>& on_record = {}) {
  cfg.validate();
  check_compatible(source, target);
  cfg.model.channels = source.channel_count;
  cfg.model.bands = source.band_count;
  cfg.model.classes = source.class_count();

  TrainResult<T> result{Model<T>(cfg.model, cfg.seed), {}, {}};
  Model<T>& model = result.model;
  if (cfg.freeze_eval_stack) model.eval.set_frozen(true);
  Optimizer<T> opt(cfg);
  std::mt19937_64 rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
  std::uniform_int_distribution<std::size_t> pick_target(0, target.samples.size() - 1);

  std::vector<std::size_t> order(source.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum_c = 0, sum_s = 0, sum_id = 0, sum_ce = 0, sum_total = 0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<BatchPair> pairs;
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i)
        pairs.push_back({order[i], pick_target(rng)});
      model.zero_grad();
      Tape<T> tape;
      BatchLoss<T> L;
      try {
        L = batch_loss(model, source, target, pairs, cfg.mode, cfg.ce_reduction, cfg.weights, tape);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " step " + std::to_string(steps) + ": " + e.what());
      }
      const double lc = L.content.scalar(), ls = L.style.scalar(), lid = L.identity.scalar();
      const double lce = L.ce.scalar(), lt = L.total.scalar();
      if (!std::isfinite(lt)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << " step " << steps << ": L_c=" << lc
            << " L_s=" << ls << " L_id=" << lid << " L_ce=" << lce << " L_total=" << lt;
        throw NumericError(msg.str());
      }
      if (cfg.on_step) cfg.on_step({epoch, steps, lc, ls, lid, lce, lt});
      tape.backward(L.total);
      opt.step(model);
      sum_c += lc;
      sum_s += ls;
      sum_id += lid;
      sum_ce += lce;
      sum_total += lt;
      ++steps;
    }
    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      MetricsRecord rec;
      rec.epoch = epoch;
      rec.L_c = sum_c / steps;
      rec.L_s = sum_s / steps;
      rec.L_id = sum_id / steps;
      rec.L_ce = sum_ce / steps;
      rec.L_total = sum_total / steps;
      rec.train_acc = accuracy(model, source);
      EvalResult ev = evaluate(model, target);
      rec.subject_acc = ev.subject_acc;
      rec.acc = ev.acc;
      rec.std = ev.std;
      if (on_record) on_record(rec);
      result.metrics.push_back(std::move(rec));
      if (epoch == cfg.epochs) result.final_eval = std::move(ev);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckConfig {
  ModelConfig model = [] {
    ModelConfig m;
    m.channels = 4;
    m.bands = 3;
    m.classes = 3;
    m.model_dim = 8;
    m.heads = 2;
    m.ffn_dim = 8;
    m.decoder_layers = 3;
    m.cheb_order = 3;
    m.graph_features = 4;
    m.hidden = 8;
    m.filters1 = 2;
    m.depth = 2;
    m.filters2 = 2;
    return m;
  }();
  int batch = 2;
  std::uint64_t seed = 7;
  double step = 1e-4;
  double tolerance = 1e-4;
  LossWeights weights;
  Reduction ce_reduction = Reduction::sum;
  TrainMode mode = TrainMode::full;
  // Runs on the freshly initialised model before anything is measured.
  std::function<void(Model<double>&)> prepare;
  // Runs after analytic gradients are computed; used for fault injection.
  std::function<void(Model<double>&)> corrupt;
};

enum class GradStatus { pass, fail, zero_gradient };

inline const char* to_string(GradStatus s) {
  switch (s) {
    case GradStatus::pass: return "pass";
    case GradStatus::fail: return "FAIL";
    default: return "zero-gradient, skipped";
  }
}

struct TensorGradCheck {
  std::string name;
  double rel_error = 0;
  double analytic_norm = 0;
  double numeric_norm = 0;
  GradStatus status = GradStatus::pass;
};

struct GradCheckReport {
  std::vector<TensorGradCheck> tensors;
  double max_rel_error = 0;
  bool passed = true;
  std::vector<std::string> failed;
  double seconds = 0;
};

inline GradCheckReport gradient_check(const GradCheckConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.model.validate();
  const ModelConfig& mc = cfg.model;
  if (mc.channels > 4 || mc.bands > 3 || mc.model_dim > 8)
    throw ConfigError("gradient_check: needs a downscaled config (C <= 4, B <= 3, m <= 8)");

  SynthShiftConfig scfg;
  scfg.channels = mc.channels;
  scfg.bands = mc.bands;
  scfg.classes = mc.classes;
  scfg.samples_per_class_per_subject = 1;
  scfg.subjects_per_dataset = 1;
  scfg.domain_shift_scale = 1.5;
  scfg.domain_shift_offset = 1.0;
  scfg.seed = cfg.seed;
  const DatasetPair data = generate_synthetic_pair(scfg);

  std::vector<BatchPair> pairs;
  for (int i = 0; i < cfg.batch; ++i)
    pairs.push_back({static_cast<std::size_t>(i) % data.source.size(),
                     static_cast<std::size_t>(i + 1) % data.target.size()});

  Model<double> model(mc, cfg.seed);
  // Biases start at exactly zero, which parks ReLU inputs of all-zero feature
  // maps on the kink where finite differences disagree with any subgradient.
  std::mt19937_64 jitter_rng(cfg.seed + 1);
  std::uniform_real_distribution<double> jitter(-0.1, 0.1);
  model.visit([&](Param<double>& p) {
    if (p.value.isZero(0.0))
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = jitter(jitter_rng);
  });
  if (cfg.prepare) cfg.prepare(model);

  auto loss_value = [&]() {
    Tape<double> tape(false);
    return batch_loss(model, data.source, data.target, pairs, cfg.mode, cfg.ce_reduction, cfg.weights, tape)
        .total.scalar();
  };

  model.zero_grad();
  {
    Tape<double> tape;
    auto L = batch_loss(model, data.source, data.target, pairs, cfg.mode, cfg.ce_reduction, cfg.weights, tape);
    tape.backward(L.total);
  }
  if (cfg.corrupt) cfg.corrupt(model);

  GradCheckReport report;
  model.visit([&](Param<double>& p) {
    MatD numeric(p.value.rows(), p.value.cols());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& w = p.value.data()[i];
      const double saved = w;
      w = saved + cfg.step;
      const double up = loss_value();
      w = saved - cfg.step;
      const double down = loss_value();
      w = saved;
      numeric.data()[i] = (up - down) / (2.0 * cfg.step);
    }
    TensorGradCheck tc;
    tc.name = p.name;
    tc.analytic_norm = p.grad.norm();
    tc.numeric_norm = numeric.norm();
    const double scale = std::max(tc.analytic_norm, tc.numeric_norm);
    if (scale < 1e-9) {
      tc.status = GradStatus::zero_gradient;
    } else {
      tc.rel_error = (p.grad - numeric).norm() / scale;
      tc.status = tc.rel_error < cfg.tolerance ? GradStatus::pass : GradStatus::fail;
      report.max_rel_error = std::max(report.max_rel_error, tc.rel_error);
    }
    if (tc.status == GradStatus::fail) {
      report.passed = false;
      report.failed.push_back(tc.name);
    }
    report.tensors.push_back(std::move(tc));
  });
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace e2stn
