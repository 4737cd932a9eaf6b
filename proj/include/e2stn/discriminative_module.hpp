#pragma once

// Dynamic-graph classifier: input-dependent nonnegative adjacency per band,
// polynomial graph filtering, two dense layers and softmax.

#include "e2stn/transfer_module.hpp"

#include <vector>

namespace e2stn {

struct GraphConfig {
  int channels = 62;
  int bands = 5;
  int cheb_order = 5;  // K: powers G^0 .. G^{K-1}
  int graph_features = 128;
  int hidden = 200;
  int classes = 3;
  bool normalize_graph = false;

  void validate() const {
    if (channels < 1 || bands < 1 || graph_features < 1 || hidden < 1)
      throw ConfigError("graph config: dimensions must be >= 1");
    if (cheb_order < 1) throw ConfigError("graph config: Chebyshev order K must be >= 1");
    if (classes < 2) throw ConfigError("graph config: need at least 2 classes");
  }
};

template <typename T>
struct DynGraphParams {
  GraphConfig cfg;
  Param<T> ws;    // C x C
  Param<T> wf;    // B x (C*B)
  Param<T> bias;  // C x B
  std::vector<Param<T>> theta;  // K entries of B x F
  Param<T> fc1_w, fc1_b, fc2_w, fc2_b;

  DynGraphParams() = default;
  DynGraphParams(const GraphConfig& c, std::mt19937_64& rng) : cfg(c) {
    cfg.validate();
    const int C = cfg.channels, B = cfg.bands, F = cfg.graph_features;
    ws = Param<T>("graph.ws", init::glorot<T>(C, C, rng));
    wf = Param<T>("graph.wf", init::glorot<T>(B, C * B, rng));
    bias = Param<T>("graph.bias", Mat<T>::Zero(C, B));
    for (int k = 0; k < cfg.cheb_order; ++k)
      theta.emplace_back("graph.theta" + std::to_string(k), init::glorot<T>(B, F, rng));
    fc1_w = Param<T>("graph.fc1_w", init::glorot<T>(C * F, cfg.hidden, rng));
    fc1_b = Param<T>("graph.fc1_b", Mat<T>::Zero(1, cfg.hidden));
    fc2_w = Param<T>("graph.fc2_w", init::glorot<T>(cfg.hidden, cfg.classes, rng));
    fc2_b = Param<T>("graph.fc2_b", Mat<T>::Zero(1, cfg.classes));
  }

  template <typename F>
  void visit(F&& f) {
    f(ws);
    f(wf);
    f(bias);
    for (auto& th : theta) f(th);
    f(fc1_w);
    f(fc1_b);
    f(fc2_w);
    f(fc2_b);
  }
};

// G = ReLU[(Ws X + Bias) Wf], C x (C*B). Optionally row-normalized per band.
template <typename T>
Var<T> dynamic_graph_full(Var<T> x, DynGraphParams<T>& p) {
  Tape<T>& t = *x.tape;
  require_shape(x.value(), p.cfg.channels, p.cfg.bands, "dynamic_graph input");
  return ad::relu(ad::matmul(ad::add(ad::matmul(t.param(p.ws), x), t.param(p.bias)), t.param(p.wf)));
}

// The B per-band C x C adjacency blocks of G (column partition).
template <typename T>
std::vector<Var<T>> dynamic_graph(Var<T> x, DynGraphParams<T>& p) {
  Var<T> g = dynamic_graph_full(x, p);
  const int C = p.cfg.channels;
  std::vector<Var<T>> out;
  for (int b = 0; b < p.cfg.bands; ++b) {
    Var<T> gb = ad::cols(g, static_cast<Eigen::Index>(b) * C, C);
    out.push_back(p.cfg.normalize_graph ? ad::row_normalize(gb) : gb);
  }
  return out;
}

// H_DG = sum_k [ stack_b(G_b^k x_b) ] Theta_k, C x F.
template <typename T>
Var<T> cheb_graph_conv(const std::vector<Var<T>>& graphs, Var<T> x, DynGraphParams<T>& p) {
  Tape<T>& t = *x.tape;
  const int B = p.cfg.bands;
  if (static_cast<int>(graphs.size()) != B) throw DimensionError("cheb_graph_conv: need one graph per band");
  std::vector<Var<T>> powers;  // G_b^k x_b for the current k
  for (int b = 0; b < B; ++b) powers.push_back(ad::cols(x, b, 1));
  Var<T> out{};
  for (int k = 0; k < p.cfg.cheb_order; ++k) {
    if (k > 0)
      for (int b = 0; b < B; ++b) powers[static_cast<std::size_t>(b)] =
          ad::matmul(graphs[static_cast<std::size_t>(b)], powers[static_cast<std::size_t>(b)]);
    Var<T> stacked = B == 1 ? powers.front() : ad::hcat(powers);
    if (!stacked.value().allFinite())
      throw NumericError("cheb_graph_conv: G^" + std::to_string(k) +
                         " overflowed; consider graph row-normalization");
    Var<T> term = ad::matmul(stacked, t.param(p.theta[static_cast<std::size_t>(k)]));
    out = k == 0 ? term : ad::add(out, term);
  }
  return out;
}

// softmax(fc2(ReLU(fc1(flatten(H_DG))))), 1 x P.
template <typename T>
Var<T> classify(Var<T> hdg, DynGraphParams<T>& p) {
  Tape<T>& t = *hdg.tape;
  Var<T> flat = ad::reshape(hdg, 1, hdg.value().size());
  Var<T> h = ad::relu(ad::add_row(ad::matmul(flat, t.param(p.fc1_w)), t.param(p.fc1_b)));
  Var<T> logits = ad::add_row(ad::matmul(h, t.param(p.fc2_w)), t.param(p.fc2_b));
  if (!logits.value().allFinite()) throw NumericError("classify: non-finite logits");
  return ad::softmax_rows(logits);
}

template <typename T>
struct Discrimination {
  Var<T> hdg;
  Var<T> probs;
};

template <typename T>
Discrimination<T> discriminate(Var<T> x, DynGraphParams<T>& p) {
  auto graphs = dynamic_graph(x, p);
  Var<T> hdg = cheb_graph_conv(graphs, x, p);
  return {hdg, classify(hdg, p)};
}

// Argmax, ties to the lowest index.
template <typename Derived>
int predict_label(const Eigen::MatrixBase<Derived>& probs) {
  int best = 0;
  for (Eigen::Index i = 1; i < probs.size(); ++i)
    if (probs(i) > probs(best)) best = static_cast<int>(i);
  return best;
}

enum class Reduction { sum, mean };

// sum_t -log probs_t[label_t] (or the mean). Probabilities at or below 1e-12
// are clamped; the tape's clamp_count records how often.
template <typename T>
Var<T> cross_entropy(const std::vector<Var<T>>& probs, const std::vector<int>& labels,
                     Reduction reduction = Reduction::sum) {
  if (probs.empty() || probs.size() != labels.size())
    throw DimensionError("cross_entropy: probs/labels size mismatch");
  Var<T> total = ad::nll(probs[0], labels[0]);
  for (std::size_t i = 1; i < probs.size(); ++i) total = ad::add(total, ad::nll(probs[i], labels[i]));
  if (reduction == Reduction::mean) total = ad::scale(total, T(1) / static_cast<T>(probs.size()));
  return total;
}

}  // namespace e2stn
