#pragma once

// Three-stage convolutional feature stack (band conv -> channel-collapsing
// depthwise -> separable) and the content / style / identity losses built on it.

#include "e2stn/discriminative_module.hpp"

#include <array>

namespace e2stn {

struct EvalStackConfig {
  int channels = 62;
  int bands = 5;
  int filters1 = 8;    // F1
  int depth = 8;       // D
  int filters2 = 8;    // F2

  void validate() const {
    if (channels < 1 || bands < 1 || filters1 < 1 || depth < 1 || filters2 < 1)
      throw ConfigError("eval stack config: dimensions must be >= 1");
  }
};

template <typename T>
struct EvalStackParams {
  static constexpr int kTaps = 3;
  EvalStackConfig cfg;
  Param<T> conv1_w;      // 3 x F1, taps along the band axis
  Param<T> conv1_b;      // 1 x F1
  Param<T> depth_w;      // (F1*D) x C
  Param<T> depth_b;      // 1 x (F1*D)
  Param<T> sep_depth_w;  // 3 x (F1*D)
  Param<T> sep_depth_b;  // 1 x (F1*D)
  Param<T> sep_point_w;  // (F1*D) x F2
  Param<T> sep_point_b;  // 1 x F2

  EvalStackParams() = default;
  EvalStackParams(const EvalStackConfig& c, std::mt19937_64& rng) : cfg(c) {
    cfg.validate();
    const int C = cfg.channels, M = cfg.filters1 * cfg.depth;
    conv1_w = Param<T>("eval.conv1_w", init::glorot<T>(kTaps, cfg.filters1, rng));
    conv1_b = Param<T>("eval.conv1_b", Mat<T>::Zero(1, cfg.filters1));
    depth_w = Param<T>("eval.depth_w", init::glorot<T>(C, cfg.depth, M, C, rng));
    depth_b = Param<T>("eval.depth_b", Mat<T>::Zero(1, M));
    sep_depth_w = Param<T>("eval.sep_depth_w", init::glorot<T>(kTaps, 1, kTaps, M, rng));
    sep_depth_b = Param<T>("eval.sep_depth_b", Mat<T>::Zero(1, M));
    sep_point_w = Param<T>("eval.sep_point_w", init::glorot<T>(M, cfg.filters2, rng));
    sep_point_b = Param<T>("eval.sep_point_b", Mat<T>::Zero(1, cfg.filters2));
  }

  void set_frozen(bool frozen) {
    visit([frozen](Param<T>& p) { p.frozen = frozen; });
  }

  template <typename F>
  void visit(F&& f) {
    f(conv1_w);
    f(conv1_b);
    f(depth_w);
    f(depth_b);
    f(sep_depth_w);
    f(sep_depth_b);
    f(sep_point_w);
    f(sep_point_b);
  }
};

// Feature maps laid out as (spatial positions) x (filters):
//   f1: (C*B) x F1 with row c*B + b;  f2: B x (F1*D);  f3: B x F2.
template <typename T>
struct EvalFeatures {
  std::array<Var<T>, 3> maps;
};

template <typename T>
EvalFeatures<T> eval_features(Var<T> x, EvalStackParams<T>& p) {
  Tape<T>& t = *x.tape;
  const Eigen::Index C = p.cfg.channels, B = p.cfg.bands;
  require_shape(x.value(), C, B, "eval_features input");
  Var<T> patches = ad::hcat<T>({ad::reshape(ad::shift_cols(x, -1), C * B, 1), ad::reshape(x, C * B, 1),
                                ad::reshape(ad::shift_cols(x, 1), C * B, 1)});
  Var<T> f1 = ad::relu(ad::add_row(ad::matmul(patches, t.param(p.conv1_w)), t.param(p.conv1_b)));
  Var<T> f2 = ad::relu(
      ad::add_row(ad::depthwise_collapse(f1, t.param(p.depth_w), C, B, p.cfg.depth), t.param(p.depth_b)));
  Var<T> sep = ad::add_row(ad::depthwise_conv_rows(f2, t.param(p.sep_depth_w)), t.param(p.sep_depth_b));
  Var<T> f3 = ad::relu(ad::add_row(ad::matmul(sep, t.param(p.sep_point_w)), t.param(p.sep_point_b)));
  return {{f1, f2, f3}};
}

inline constexpr double kStyleStdEps = 1e-8;

// (1/3) sum_i ||f_i(a) - f_i(b)||_2
template <typename T>
Var<T> content_loss(const EvalFeatures<T>& a, const EvalFeatures<T>& b) {
  Var<T> sum = ad::l2norm(ad::sub(a.maps[0], b.maps[0]));
  for (int i = 1; i < 3; ++i) sum = ad::add(sum, ad::l2norm(ad::sub(a.maps[i], b.maps[i])));
  return ad::scale(sum, T(1) / T(3));
}

// ||mu(fa) - mu(fb)|| + ||sigma(fa) - sigma(fb)||, statistics per filter over positions.
template <typename T>
Var<T> style_term(Var<T> fa, Var<T> fb) {
  const T eps = static_cast<T>(kStyleStdEps);
  Var<T> dm = ad::l2norm(ad::sub(ad::col_mean(fa), ad::col_mean(fb)));
  Var<T> ds = ad::l2norm(ad::sub(ad::col_std(fa, eps), ad::col_std(fb, eps)));
  return ad::add(dm, ds);
}

template <typename T>
Var<T> style_loss(const EvalFeatures<T>& a, const EvalFeatures<T>& b) {
  Var<T> sum = style_term(a.maps[0], b.maps[0]);
  for (int i = 1; i < 3; ++i) sum = ad::add(sum, style_term(a.maps[i], b.maps[i]));
  return ad::scale(sum, T(1) / T(3));
}

// (1/3) sum_i (||f_i(ss) - f_i(xs)|| + ||f_i(tt) - f_i(xt)||)
template <typename T>
Var<T> identity_loss(const EvalFeatures<T>& ss, const EvalFeatures<T>& xs, const EvalFeatures<T>& tt,
                     const EvalFeatures<T>& xt) {
  Var<T> sum{};
  for (int i = 0; i < 3; ++i) {
    Var<T> term = ad::add(ad::l2norm(ad::sub(ss.maps[i], xs.maps[i])),
                          ad::l2norm(ad::sub(tt.maps[i], xt.maps[i])));
    sum = i == 0 ? term : ad::add(sum, term);
  }
  return ad::scale(sum, T(1) / T(3));
}

// Sample-level forms.

template <typename T>
Var<T> content_loss(Var<T> xhat, Var<T> xs, EvalStackParams<T>& p) {
  return content_loss(eval_features(xhat, p), eval_features(xs, p));
}

template <typename T>
Var<T> style_loss(Var<T> xhat, Var<T> xt, EvalStackParams<T>& p) {
  return style_loss(eval_features(xhat, p), eval_features(xt, p));
}

// Runs both self-transfers through the transfer module.
template <typename T>
Var<T> identity_loss(Var<T> xs, Var<T> xt, TransferParams<T>& transfer, EvalStackParams<T>& p) {
  Var<T> ss = stylize(xs, xs, transfer);
  Var<T> tt = stylize(xt, xt, transfer);
  return identity_loss(eval_features(ss, p), eval_features(xs, p), eval_features(tt, p),
                       eval_features(xt, p));
}

struct LossWeights {
  double lambda_c = 2.0;
  double mu_s = 10.0;
  double nu_id = 1.0;
  double xi_ce = 20.0;

  void validate() const {
    for (double w : {lambda_c, mu_s, nu_id, xi_ce})
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
    if (lambda_c == 0 && mu_s == 0 && nu_id == 0 && xi_ce == 0)
      throw ConfigError("loss weights: at least one must be > 0");
  }
};

inline double total_loss(double lc, double ls, double lid, double lce, const LossWeights& w) {
  return w.lambda_c * lc + w.mu_s * ls + w.nu_id * lid + w.xi_ce * lce;
}

template <typename T>
Var<T> total_loss(Var<T> lc, Var<T> ls, Var<T> lid, Var<T> lce, const LossWeights& w) {
  Var<T> s = ad::scale(lc, static_cast<T>(w.lambda_c));
  s = ad::add(s, ad::scale(ls, static_cast<T>(w.mu_s)));
  s = ad::add(s, ad::scale(lid, static_cast<T>(w.nu_id)));
  return ad::add(s, ad::scale(lce, static_cast<T>(w.xi_ce)));
}

}  // namespace e2stn
