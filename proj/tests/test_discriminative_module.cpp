#include "e2stn/e2stn.hpp"
#include "reference.hpp"

#include <gtest/gtest.h>

using namespace e2stn;

namespace {

GraphConfig small_graph(int C = 4, int B = 2, int K = 3, int F = 5) {
  GraphConfig g;
  g.channels = C;
  g.bands = B;
  g.cheb_order = K;
  g.graph_features = F;
  g.hidden = 6;
  g.classes = 3;
  return g;
}

DynGraphParams<double> make_params(const GraphConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return DynGraphParams<double>(cfg, rng);
}

MatD rnd(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ref::random_matrix(r, c, rng);
}

std::vector<MatD> values(const std::vector<Var<double>>& vs) {
  std::vector<MatD> out;
  for (const auto& v : vs) out.push_back(v.value());
  return out;
}

std::vector<MatD> theta_values(const DynGraphParams<double>& p) {
  std::vector<MatD> out;
  for (const auto& th : p.theta) out.push_back(th.value);
  return out;
}

MatD probs_for_logits(const MatD& logits) {
  auto p = make_params(small_graph(), 1);
  p.fc2_w.value.setZero();
  p.fc2_b.value = logits;
  Tape<double> t(false);
  return classify(t.constant(rnd(4, 5, 2)), p).value();
}

}  // namespace

TEST(DynamicGraph, ZeroWeightsGiveZeroGraphs) {
  auto p = make_params(small_graph(), 3);
  p.ws.value.setZero();
  p.bias.value.setZero();
  Tape<double> t(false);
  for (const auto& g : dynamic_graph(t.constant(rnd(4, 2, 4)), p)) EXPECT_EQ(g.value().norm(), 0.0);
}

TEST(DynamicGraph, DefaultShapes) {
  GraphConfig cfg;
  auto p = make_params(cfg, 5);
  Tape<double> t(false);
  const Var<double> x = t.constant(rnd(62, 5, 6));
  const MatD full = dynamic_graph_full(x, p).value();
  EXPECT_EQ(full.rows(), 62);
  EXPECT_EQ(full.cols(), 310);
  const auto blocks = dynamic_graph(x, p);
  ASSERT_EQ(blocks.size(), 5u);
  for (int b = 0; b < 5; ++b) {
    EXPECT_EQ(blocks[b].rows(), 62);
    EXPECT_EQ(blocks[b].cols(), 62);
    EXPECT_TRUE(blocks[b].value() == full.middleCols(b * 62, 62));
  }
}

TEST(DynamicGraph, EntriesAreNonnegativeAndInputDependent) {
  auto p = make_params(small_graph(6, 3), 7);
  std::mt19937_64 rng(8);
  MatD previous;
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> t(false);
    const MatD g = dynamic_graph_full(t.constant(ref::random_matrix(6, 3, rng, 5.0)), p).value();
    EXPECT_GE(g.minCoeff(), 0.0);
    if (trial > 0) {
      EXPECT_FALSE(g == previous);
    }
    previous = g;
  }
}

TEST(DynamicGraph, RowNormalizationIsOptional) {
  GraphConfig cfg = small_graph();
  cfg.normalize_graph = true;
  auto p = make_params(cfg, 9);
  p.bias.value.setConstant(1.0);  // keep rows away from all-zero
  Tape<double> t(false);
  for (const auto& g : dynamic_graph(t.constant(rnd(4, 2, 10).cwiseAbs()), p)) {
    const MatD sums = g.value().rowwise().sum();
    for (Eigen::Index i = 0; i < sums.size(); ++i) {
      if (sums(i) != 0.0) {
        EXPECT_NEAR(sums(i), 1.0, 1e-6);  // eps-guarded denominator
      }
    }
  }
}

TEST(DynamicGraph, ShapeMismatchIsDimensionError) {
  auto p = make_params(small_graph(), 11);
  Tape<double> t(false);
  EXPECT_THROW(dynamic_graph(t.constant(MatD::Zero(5, 2)), p), DimensionError);
}

TEST(ChebGraphConv, OrderOneWithIdentityThetaReturnsInput) {
  auto p = make_params(small_graph(4, 2, 1, 5), 12);
  p.theta[0].value = MatD::Identity(2, 5);
  const MatD x = rnd(4, 2, 13);
  Tape<double> t(false);
  const Var<double> xv = t.constant(x);
  const MatD h = cheb_graph_conv(dynamic_graph(xv, p), xv, p).value();
  EXPECT_TRUE(h.leftCols(2) == x);
  EXPECT_EQ(h.rightCols(3).norm(), 0.0);
}

TEST(ChebGraphConv, OrderThreeMatchesDensePowerOracle) {
  auto p = make_params(small_graph(4, 2, 3, 5), 14);
  const MatD x = rnd(4, 2, 15);
  Tape<double> t(false);
  const Var<double> xv = t.constant(x);
  const auto graphs = dynamic_graph(xv, p);
  const MatD got = cheb_graph_conv(graphs, xv, p).value();
  const MatD expect = ref::cheb(values(graphs), x, theta_values(p));
  EXPECT_LT((got - expect).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(ChebGraphConv, RandomInstancesMatchOracle) {
  std::mt19937_64 rng(16);
  std::uniform_int_distribution<int> cdist(1, 6), bdist(1, 3), kdist(1, 5);
  for (int trial = 0; trial < 100; ++trial) {
    const int C = cdist(rng), B = bdist(rng), K = kdist(rng);
    auto p = make_params(small_graph(C, B, K, 4), static_cast<std::uint64_t>(trial) + 100);
    std::vector<MatD> graphs;
    std::vector<Var<double>> gv;
    Tape<double> t(false);
    for (int b = 0; b < B; ++b) {
      graphs.push_back(ref::random_matrix(C, C, rng).cwiseAbs() * 0.5);
      gv.push_back(t.constant(graphs.back()));
    }
    const MatD x = ref::random_matrix(C, B, rng);
    const MatD got = cheb_graph_conv(gv, t.constant(x), p).value();
    const MatD expect = ref::cheb(graphs, x, theta_values(p));
    ASSERT_LT((got - expect).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, expect.cwiseAbs().maxCoeff()))
        << "C=" << C << " B=" << B << " K=" << K;
  }
}

TEST(ChebGraphConv, DefaultOutputShape) {
  GraphConfig cfg;
  cfg.normalize_graph = true;
  auto p = make_params(cfg, 17);
  Tape<double> t(false);
  const Var<double> x = t.constant(rnd(62, 5, 18));
  const MatD h = cheb_graph_conv(dynamic_graph(x, p), x, p).value();
  EXPECT_EQ(h.rows(), 62);
  EXPECT_EQ(h.cols(), 128);
}

TEST(ChebGraphConv, OverflowIsNumericError) {
  auto p = make_params(small_graph(4, 1, 5, 3), 19);
  Tape<double> t(false);
  std::vector<Var<double>> g{t.constant(MatD::Constant(4, 4, 1e120))};
  EXPECT_THROW(cheb_graph_conv(g, t.constant(MatD::Ones(4, 1)), p), NumericError);
}

TEST(ChebGraphConv, WrongGraphCountIsDimensionError) {
  auto p = make_params(small_graph(), 20);
  Tape<double> t(false);
  std::vector<Var<double>> g{t.constant(MatD::Zero(4, 4))};
  EXPECT_THROW(cheb_graph_conv(g, t.constant(MatD::Zero(4, 2)), p), DimensionError);
}

TEST(Classify, UniformLogitsGiveUniformProbabilities) {
  const MatD probs = probs_for_logits(MatD::Zero(1, 3));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(probs(0, i), 1.0 / 3.0, 1e-15);
}

TEST(Classify, LargeLogitSaturates) {
  MatD logits = MatD::Zero(1, 3);
  logits(0, 0) = 30.0;
  EXPECT_GT(probs_for_logits(logits)(0, 0), 0.999);
}

TEST(Classify, OutputIsDistributionForAnyInput) {
  auto p = make_params(small_graph(), 21);
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> t(false);
    const MatD probs = classify(t.constant(ref::random_matrix(4, 5, rng, 10.0)), p).value();
    EXPECT_NEAR(probs.sum(), 1.0, 1e-6);
    EXPECT_GT(probs.minCoeff(), 0.0);
    EXPECT_LT(probs.maxCoeff(), 1.0 + 1e-15);
  }
}

TEST(Classify, NonFiniteLogitsAreNumericError) {
  auto p = make_params(small_graph(), 23);
  p.fc2_b.value(0, 1) = std::numeric_limits<double>::infinity();
  Tape<double> t(false);
  EXPECT_THROW(classify(t.constant(rnd(4, 5, 24)), p), NumericError);
}

TEST(PredictLabel, ArgmaxWithLowestIndexTieBreak) {
  Eigen::RowVector3d a(0.2, 0.5, 0.3);
  EXPECT_EQ(predict_label(a), 1);
  Eigen::RowVector2d tie(0.5, 0.5);
  EXPECT_EQ(predict_label(tie), 0);
  for (int p = 0; p < 4; ++p) {
    Eigen::RowVector4d onehot = Eigen::RowVector4d::Zero();
    onehot(p) = 1.0;
    EXPECT_EQ(predict_label(onehot), p);
  }
}

TEST(PredictLabel, InvariantToMonotoneLogitTransforms) {
  std::mt19937_64 rng(25);
  for (int trial = 0; trial < 50; ++trial) {
    const MatD logits = ref::random_matrix(1, 4, rng, 3.0);
    const int base = predict_label(ref::softmax_rows(logits));
    EXPECT_EQ(predict_label(ref::softmax_rows((logits.array() + 7.5).matrix())), base);
    EXPECT_EQ(predict_label(ref::softmax_rows(logits * 0.3)), base);
    EXPECT_EQ(predict_label(ref::softmax_rows(logits * 4.0)), base);
    EXPECT_EQ(predict_label(logits), base);
  }
}

TEST(CrossEntropy, ClosedFormCases) {
  Tape<double> t(false);
  MatD onehot = MatD::Zero(1, 3);
  onehot(0, 2) = 1.0;
  EXPECT_EQ(cross_entropy<double>({t.constant(onehot), t.constant(onehot)}, {2, 2}).scalar(), 0.0);
  EXPECT_NEAR(cross_entropy<double>({t.constant(MatD::Constant(1, 3, 1.0 / 3.0))}, {1}).scalar(), std::log(3.0),
              1e-12);
  MatD half(1, 2);
  half << 0.5, 0.5;
  EXPECT_NEAR(cross_entropy<double>({t.constant(half), t.constant(half)}, {0, 1}).scalar(), 2.0 * std::log(2.0),
              1e-12);
  EXPECT_NEAR(cross_entropy<double>({t.constant(half), t.constant(half)}, {0, 1}, Reduction::mean).scalar(),
              std::log(2.0), 1e-12);
}

TEST(CrossEntropy, ZeroProbabilityIsClampedAndCounted) {
  Tape<double> t(false);
  MatD p(1, 2);
  p << 1.0, 0.0;
  const double v = cross_entropy<double>({t.constant(p)}, {1}).scalar();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, -std::log(1e-12), 1e-9);
  EXPECT_EQ(t.clamp_count, 1);
}

TEST(CrossEntropy, SizeMismatchIsDimensionError) {
  Tape<double> t(false);
  EXPECT_THROW(cross_entropy<double>({t.constant(MatD::Ones(1, 2) * 0.5)}, {0, 1}), DimensionError);
  EXPECT_THROW(cross_entropy<double>({}, {}), DimensionError);
}

TEST(Discriminate, EndToEndGradientMatchesFiniteDifferences) {
  GraphConfig cfg = small_graph(4, 2, 3, 3);
  cfg.normalize_graph = true;
  auto p = make_params(cfg, 26);
  p.bias.value = rnd(4, 2, 27);
  const MatD x1 = rnd(4, 2, 28), x2 = rnd(4, 2, 29);
  auto loss = [&](bool record) {
    Tape<double> t(record);
    auto d1 = discriminate(t.constant(x1), p);
    auto d2 = discriminate(t.constant(x2), p);
    Var<double> l = cross_entropy<double>({d1.probs, d2.probs}, {0, 2});
    if (record) t.backward(l);
    return l.scalar();
  };
  p.visit([](Param<double>& q) { q.zero_grad(); });
  loss(true);
  double worst = 0.0;
  p.visit([&](Param<double>& q) {
    MatD num(q.value.rows(), q.value.cols());
    for (Eigen::Index i = 0; i < q.value.size(); ++i) {
      const double saved = q.value.data()[i];
      q.value.data()[i] = saved + 1e-6;
      const double up = loss(false);
      q.value.data()[i] = saved - 1e-6;
      const double down = loss(false);
      q.value.data()[i] = saved;
      num.data()[i] = (up - down) / 2e-6;
    }
    const double scale = std::max(q.grad.norm(), num.norm());
    if (scale > 1e-9) worst = std::max(worst, (q.grad - num).norm() / scale);
  });
  EXPECT_LT(worst, 1e-4);
}
