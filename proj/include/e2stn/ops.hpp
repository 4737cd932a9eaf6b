#pragma once

// Differentiable operations on the tape. Each op checks shapes, computes its
// forward value, and registers a closure accumulating input gradients.

#include "e2stn/autodiff.hpp"

#include <memory>

namespace e2stn::ad {

namespace detail {

template <typename T>
bool needs(Var<T> v) {
  return v.tape->requires_grad(v.id);
}

template <typename T, typename... Vs>
bool any_needs(Var<T> first, Vs... rest) {
  return (needs(first) || ... || needs(rest));
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>* t = a.tape;
  if (a.cols() != b.rows())
    throw DimensionError("matmul: " + shape_str(a.rows(), a.cols()) + " * " +
                         shape_str(b.rows(), b.cols()));
  const int o = t->next_id();
  return t->push(a.value() * b.value(), detail::any_needs(a, b), [t, a, b, o] {
    const Mat<T>& g = t->grad(o);
    if (detail::needs(a)) t->accumulate(a.id, g * b.value().transpose());
    if (detail::needs(b)) t->accumulate(b.id, a.value().transpose() * g);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>* t = a.tape;
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("add: " + shape_str(a.rows(), a.cols()) + " vs " +
                         shape_str(b.rows(), b.cols()));
  const int o = t->next_id();
  return t->push(a.value() + b.value(), detail::any_needs(a, b), [t, a, b, o] {
    t->accumulate(a.id, t->grad(o));
    t->accumulate(b.id, t->grad(o));
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>* t = a.tape;
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("sub: " + shape_str(a.rows(), a.cols()) + " vs " +
                         shape_str(b.rows(), b.cols()));
  const int o = t->next_id();
  return t->push(a.value() - b.value(), detail::any_needs(a, b), [t, a, b, o] {
    t->accumulate(a.id, t->grad(o));
    t->accumulate(b.id, -t->grad(o));
  });
}

// a + broadcast(row) where row is 1 x a.cols().
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  Tape<T>* t = a.tape;
  if (row.rows() != 1 || row.cols() != a.cols())
    throw DimensionError("add_row: bias " + shape_str(row.rows(), row.cols()) + " for " +
                         shape_str(a.rows(), a.cols()));
  Mat<T> out = a.value().rowwise() + row.value().row(0);
  const int o = t->next_id();
  return t->push(std::move(out), detail::any_needs(a, row), [t, a, row, o] {
    t->accumulate(a.id, t->grad(o));
    if (detail::needs(row)) t->accumulate(row.id, t->grad(o).colwise().sum());
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tape<T>* t = a.tape;
  const int o = t->next_id();
  return t->push(a.value() * s, detail::needs(a),
                 [t, a, s, o] { t->accumulate(a.id, t->grad(o) * s); });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tape<T>* t = a.tape;
  const int o = t->next_id();
  return t->push(a.value().cwiseMax(T(0)), detail::needs(a), [t, a, o] {
    Mat<T> mask = (a.value().array() > T(0)).template cast<T>();
    t->accumulate(a.id, t->grad(o).cwiseProduct(mask));
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Tape<T>* t = a.tape;
  const int o = t->next_id();
  return t->push(a.value().transpose(), detail::needs(a),
                 [t, a, o] { t->accumulate(a.id, t->grad(o).transpose()); });
}

template <typename T>
Var<T> cols(Var<T> a, Eigen::Index start, Eigen::Index n) {
  Tape<T>* t = a.tape;
  if (start < 0 || n < 0 || start + n > a.cols()) throw DimensionError("cols: slice out of range");
  const int o = t->next_id();
  return t->push(a.value().middleCols(start, n), detail::needs(a), [t, a, start, n, o] {
    Mat<T> g = Mat<T>::Zero(a.rows(), a.cols());
    g.middleCols(start, n) = t->grad(o);
    t->accumulate(a.id, g);
  });
}

template <typename T>
Var<T> rows(Var<T> a, Eigen::Index start, Eigen::Index n) {
  Tape<T>* t = a.tape;
  if (start < 0 || n < 0 || start + n > a.rows()) throw DimensionError("rows: slice out of range");
  const int o = t->next_id();
  return t->push(a.value().middleRows(start, n), detail::needs(a), [t, a, start, n, o] {
    Mat<T> g = Mat<T>::Zero(a.rows(), a.cols());
    g.middleRows(start, n) = t->grad(o);
    t->accumulate(a.id, g);
  });
}

template <typename T>
Var<T> hcat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("hcat: no inputs");
  Tape<T>* t = parts.front().tape;
  const Eigen::Index r = parts.front().rows();
  Eigen::Index c = 0;
  bool grad = false;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DimensionError("hcat: row count mismatch");
    c += p.cols();
    grad = grad || detail::needs(p);
  }
  Mat<T> out(r, c);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  const int o = t->next_id();
  return t->push(std::move(out), grad, [t, parts, o] {
    const Mat<T>& g = t->grad(o);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      if (detail::needs(p)) t->accumulate(p.id, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

// Row-major reinterpretation.
template <typename T>
Var<T> reshape(Var<T> a, Eigen::Index r, Eigen::Index c) {
  Tape<T>* t = a.tape;
  if (r * c != a.value().size()) throw DimensionError("reshape: size mismatch");
  Mat<T> out = Eigen::Map<const Mat<T>>(a.value().data(), r, c);
  const int o = t->next_id();
  return t->push(std::move(out), detail::needs(a), [t, a, o] {
    const Mat<T>& g = t->grad(o);
    t->accumulate(a.id, Eigen::Map<const Mat<T>>(g.data(), a.rows(), a.cols()));
  });
}

// out(i, :) = a(i + offset, :), zero outside the valid range.
template <typename T>
Var<T> shift_rows(Var<T> a, Eigen::Index offset) {
  Tape<T>* t = a.tape;
  const Eigen::Index n = a.rows();
  Mat<T> out = Mat<T>::Zero(n, a.cols());
  const Eigen::Index lo = std::max<Eigen::Index>(0, -offset);
  const Eigen::Index hi = std::min<Eigen::Index>(n, n - offset);
  if (hi > lo) out.middleRows(lo, hi - lo) = a.value().middleRows(lo + offset, hi - lo);
  const int o = t->next_id();
  return t->push(std::move(out), detail::needs(a), [t, a, offset, lo, hi, o] {
    Mat<T> g = Mat<T>::Zero(a.rows(), a.cols());
    if (hi > lo) g.middleRows(lo + offset, hi - lo) = t->grad(o).middleRows(lo, hi - lo);
    t->accumulate(a.id, g);
  });
}

// out(:, j) = a(:, j + offset), zero outside the valid range.
template <typename T>
Var<T> shift_cols(Var<T> a, Eigen::Index offset) {
  Tape<T>* t = a.tape;
  const Eigen::Index n = a.cols();
  Mat<T> out = Mat<T>::Zero(a.rows(), n);
  const Eigen::Index lo = std::max<Eigen::Index>(0, -offset);
  const Eigen::Index hi = std::min<Eigen::Index>(n, n - offset);
  if (hi > lo) out.middleCols(lo, hi - lo) = a.value().middleCols(lo + offset, hi - lo);
  const int o = t->next_id();
  return t->push(std::move(out), detail::needs(a), [t, a, offset, lo, hi, o] {
    Mat<T> g = Mat<T>::Zero(a.rows(), a.cols());
    if (hi > lo) g.middleCols(lo + offset, hi - lo) = t->grad(o).middleCols(lo, hi - lo);
    t->accumulate(a.id, g);
  });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  Tape<T>* t = a.tape;
  if (!a.value().allFinite()) throw NumericError("softmax: non-finite logits");
  Mat<T> y = a.value();
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    y.row(i).array() -= y.row(i).maxCoeff();
    y.row(i) = y.row(i).array().exp();
    y.row(i) /= y.row(i).sum();
  }
  const int o = t->next_id();
  return t->push(std::move(y), detail::needs(a), [t, a, o] {
    const Mat<T>& y = t->value(o);
    const Mat<T>& g = t->grad(o);
    Mat<T> gy = g.cwiseProduct(y);
    Mat<T> d = gy - (y.array().colwise() * gy.rowwise().sum().array()).matrix();
    t->accumulate(a.id, d);
  });
}

// Row-wise layer normalization with gain/bias rows (1 x cols).
template <typename T>
Var<T> layer_norm(Var<T> a, Var<T> gain, Var<T> bias, T eps = T(1e-6)) {
  Tape<T>* t = a.tape;
  const Eigen::Index n = a.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
    throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(n));
  auto xhat = std::make_shared<Mat<T>>(a.rows(), n);
  auto inv = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const auto row = a.value().row(i);
    const T mu = row.mean();
    const T var = (row.array() - mu).square().mean();
    (*inv)(i) = T(1) / std::sqrt(var + eps);
    xhat->row(i) = (row.array() - mu) * (*inv)(i);
  }
  if (!xhat->allFinite()) throw NumericError("layer_norm: non-finite values");
  Mat<T> out = (xhat->array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  const int o = t->next_id();
  return t->push(std::move(out), detail::any_needs(a, gain, bias), [t, a, gain, bias, xhat, inv, o] {
    const Mat<T>& g = t->grad(o);
    if (detail::needs(gain)) t->accumulate(gain.id, g.cwiseProduct(*xhat).colwise().sum());
    if (detail::needs(bias)) t->accumulate(bias.id, g.colwise().sum());
    if (detail::needs(a)) {
      Mat<T> dx = (g.array().rowwise() * gain.value().row(0).array()).matrix();
      Mat<T> out(dx.rows(), dx.cols());
      for (Eigen::Index i = 0; i < dx.rows(); ++i) {
        const T m1 = dx.row(i).mean();
        const T m2 = dx.row(i).cwiseProduct(xhat->row(i)).mean();
        out.row(i) = (dx.row(i).array() - m1 - xhat->row(i).array() * m2) * (*inv)(i);
      }
      t->accumulate(a.id, out);
    }
  });
}

// Divides each row by (row sum + eps). Inputs are expected nonnegative.
template <typename T>
Var<T> row_normalize(Var<T> a, T eps = T(1e-8)) {
  Tape<T>* t = a.tape;
  Eigen::Matrix<T, Eigen::Dynamic, 1> s = a.value().rowwise().sum().array() + eps;
  Mat<T> out = (a.value().array().colwise() / s.array()).matrix();
  const int o = t->next_id();
  return t->push(std::move(out), detail::needs(a), [t, a, s, o] {
    const Mat<T>& g = t->grad(o);
    Eigen::Matrix<T, Eigen::Dynamic, 1> gs = g.cwiseProduct(a.value()).rowwise().sum();
    Mat<T> d = (g.array().colwise() / s.array()).matrix();
    d.array().colwise() -= gs.array() / s.array().square();
    t->accumulate(a.id, d);
  });
}

// Frobenius norm as a 1x1. The subgradient at zero is taken as zero.
template <typename T>
Var<T> l2norm(Var<T> a) {
  Tape<T>* t = a.tape;
  const T n = a.value().norm();
  const int o = t->next_id();
  return t->push(Mat<T>::Constant(1, 1, n), detail::needs(a), [t, a, n, o] {
    if (n == T(0)) return;
    t->accumulate(a.id, a.value() * (t->grad(o)(0, 0) / n));
  });
}

template <typename T>
Var<T> sum_all(Var<T> a) {
  Tape<T>* t = a.tape;
  const int o = t->next_id();
  return t->push(Mat<T>::Constant(1, 1, a.value().sum()), detail::needs(a), [t, a, o] {
    t->accumulate(a.id, Mat<T>::Constant(a.rows(), a.cols(), t->grad(o)(0, 0)));
  });
}

// Per-column mean over rows, 1 x cols.
template <typename T>
Var<T> col_mean(Var<T> a) {
  Tape<T>* t = a.tape;
  const T inv_n = T(1) / static_cast<T>(a.rows());
  const int o = t->next_id();
  return t->push(a.value().colwise().mean(), detail::needs(a), [t, a, inv_n, o] {
    Mat<T> g = t->grad(o).replicate(a.rows(), 1) * inv_n;
    t->accumulate(a.id, g);
  });
}

// Per-column population standard deviation sqrt(var + eps), 1 x cols.
template <typename T>
Var<T> col_std(Var<T> a, T eps) {
  Tape<T>* t = a.tape;
  Mat<T> centered = a.value().rowwise() - a.value().colwise().mean();
  const T inv_n = T(1) / static_cast<T>(a.rows());
  Mat<T> s = ((centered.array().square().colwise().sum() * inv_n) + eps).sqrt().matrix();
  const int o = t->next_id();
  auto c = std::make_shared<Mat<T>>(std::move(centered));
  return t->push(s, detail::needs(a), [t, a, c, inv_n, o] {
    const Mat<T>& s = t->value(o);
    Mat<T> coef = (t->grad(o).array() / s.array() * inv_n).matrix();
    t->accumulate(a.id, (c->array().rowwise() * coef.row(0).array()).matrix());
  });
}

// -log(max(probs(0, label), floor)) as a 1x1.
template <typename T>
Var<T> nll(Var<T> probs, int label, T floor = T(1e-12)) {
  Tape<T>* t = probs.tape;
  if (probs.rows() != 1 || label < 0 || label >= probs.cols())
    throw DimensionError("nll: label out of range");
  const T p = probs.value()(0, label);
  const bool clamped = !(p > floor);
  if (clamped) ++t->clamp_count;
  const T v = -std::log(clamped ? floor : p);
  const int o = t->next_id();
  return t->push(Mat<T>::Constant(1, 1, v), detail::needs(probs), [t, probs, label, p, clamped, o] {
    Mat<T> g = Mat<T>::Zero(1, probs.cols());
    if (!clamped) g(0, label) = -t->grad(o)(0, 0) / p;
    t->accumulate(probs.id, g);
  });
}

// Scaled dot-product attention over `heads` column blocks. Returns the
// concatenated head outputs (before any output projection).
//   head j: softmax(Q_j K_j^T / sqrt(p)) V_j, p = cols / heads.
template <typename T>
Var<T> attention_heads(Var<T> q, Var<T> k, Var<T> v, int heads) {
  Tape<T>* t = q.tape;
  const Eigen::Index m = q.cols();
  if (heads < 1 || m % heads != 0)
    throw DimensionError("attention: model dim " + std::to_string(m) + " not divisible by " +
                         std::to_string(heads) + " heads");
  if (k.cols() != m || v.cols() != m || k.rows() != v.rows())
    throw DimensionError("attention: inconsistent Q/K/V shapes");
  const Eigen::Index p = m / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(p));
  auto weights = std::make_shared<std::vector<Mat<T>>>(static_cast<std::size_t>(heads));
  Mat<T> out(q.rows(), m);
  for (int j = 0; j < heads; ++j) {
    Mat<T> s = (q.value().middleCols(j * p, p) * k.value().middleCols(j * p, p).transpose()) * sc;
    if (!s.allFinite()) throw NumericError("attention: non-finite logits");
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      s.row(i).array() -= s.row(i).maxCoeff();
      s.row(i) = s.row(i).array().exp();
      s.row(i) /= s.row(i).sum();
    }
    out.middleCols(j * p, p) = s * v.value().middleCols(j * p, p);
    if (t->attention_probe) t->attention_probe(s);
    (*weights)[static_cast<std::size_t>(j)] = std::move(s);
  }
  const int o = t->next_id();
  return t->push(std::move(out), detail::any_needs(q, k, v), [t, q, k, v, heads, p, sc, weights, o] {
    const Mat<T>& g = t->grad(o);
    Mat<T> dq = Mat<T>::Zero(q.rows(), q.cols());
    Mat<T> dk = Mat<T>::Zero(k.rows(), k.cols());
    Mat<T> dv = Mat<T>::Zero(v.rows(), v.cols());
    for (int j = 0; j < heads; ++j) {
      const Mat<T>& a = (*weights)[static_cast<std::size_t>(j)];
      const auto go = g.middleCols(j * p, p);
      Mat<T> da = go * v.value().middleCols(j * p, p).transpose();
      dv.middleCols(j * p, p) = a.transpose() * go;
      Mat<T> ds = a.cwiseProduct(da);
      ds -= (a.array().colwise() * ds.rowwise().sum().array()).matrix();
      dq.middleCols(j * p, p) = ds * k.value().middleCols(j * p, p) * sc;
      dk.middleCols(j * p, p) = ds.transpose() * q.value().middleCols(j * p, p) * sc;
    }
    t->accumulate(q.id, dq);
    t->accumulate(k.id, dk);
    t->accumulate(v.id, dv);
  });
}

// Depthwise convolution collapsing the channel axis.
//   in:  (C*B) x F maps, row index c*B + b
//   w:   (F*D) x C spatial filters, row index f*D + d
//   out: B x (F*D), out(b, f*D+d) = sum_c w(f*D+d, c) * in(c*B+b, f)
template <typename T>
Var<T> depthwise_collapse(Var<T> in, Var<T> w, Eigen::Index channels, Eigen::Index bands,
                          Eigen::Index multiplier) {
  Tape<T>* t = in.tape;
  const Eigen::Index f_count = in.cols();
  if (in.rows() != channels * bands) throw DimensionError("depthwise: input rows != C*B");
  require_shape(w.value(), f_count * multiplier, channels, "depthwise kernel");
  Mat<T> out = Mat<T>::Zero(bands, f_count * multiplier);
  for (Eigen::Index f = 0; f < f_count; ++f) {
    // in column f viewed as C x B
    Mat<T> hf(channels, bands);
    for (Eigen::Index c = 0; c < channels; ++c)
      for (Eigen::Index b = 0; b < bands; ++b) hf(c, b) = in.value()(c * bands + b, f);
    out.middleCols(f * multiplier, multiplier) =
        (w.value().middleRows(f * multiplier, multiplier) * hf).transpose();
  }
  const int o = t->next_id();
  return t->push(std::move(out), detail::any_needs(in, w),
                 [t, in, w, channels, bands, multiplier, f_count, o] {
                   const Mat<T>& g = t->grad(o);
                   Mat<T> din = Mat<T>::Zero(in.rows(), in.cols());
                   Mat<T> dw = Mat<T>::Zero(w.rows(), w.cols());
                   for (Eigen::Index f = 0; f < f_count; ++f) {
                     Mat<T> hf(channels, bands);
                     for (Eigen::Index c = 0; c < channels; ++c)
                       for (Eigen::Index b = 0; b < bands; ++b) hf(c, b) = in.value()(c * bands + b, f);
                     // gf: D x B
                     Mat<T> gf = g.middleCols(f * multiplier, multiplier).transpose();
                     dw.middleRows(f * multiplier, multiplier) = gf * hf.transpose();
                     Mat<T> dh = w.value().middleRows(f * multiplier, multiplier).transpose() * gf;
                     for (Eigen::Index c = 0; c < channels; ++c)
                       for (Eigen::Index b = 0; b < bands; ++b) din(c * bands + b, f) = dh(c, b);
                   }
                   t->accumulate(in.id, din);
                   t->accumulate(w.id, dw);
                 });
}

// Per-column 1-D convolution along rows with zero "same" padding.
//   w: k x M, out(i, j) = sum_t w(t, j) * in(i + t - k/2, j)
template <typename T>
Var<T> depthwise_conv_rows(Var<T> in, Var<T> w) {
  Tape<T>* t = in.tape;
  const Eigen::Index k = w.rows();
  const Eigen::Index n = in.rows();
  if (w.cols() != in.cols()) throw DimensionError("depthwise_conv_rows: kernel width mismatch");
  const Eigen::Index pad = k / 2;
  Mat<T> out = Mat<T>::Zero(n, in.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index tt = 0; tt < k; ++tt) {
      const Eigen::Index src = i + tt - pad;
      if (src < 0 || src >= n) continue;
      out.row(i) += in.value().row(src).cwiseProduct(w.value().row(tt));
    }
  const int o = t->next_id();
  return t->push(std::move(out), detail::any_needs(in, w), [t, in, w, k, n, pad, o] {
    const Mat<T>& g = t->grad(o);
    Mat<T> din = Mat<T>::Zero(in.rows(), in.cols());
    Mat<T> dw = Mat<T>::Zero(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index tt = 0; tt < k; ++tt) {
        const Eigen::Index src = i + tt - pad;
        if (src < 0 || src >= n) continue;
        din.row(src) += g.row(i).cwiseProduct(w.value().row(tt));
        dw.row(tt) += g.row(i).cwiseProduct(in.value().row(src));
      }
    t->accumulate(in.id, din);
    t->accumulate(w.id, dw);
  });
}

}  // namespace e2stn::ad
