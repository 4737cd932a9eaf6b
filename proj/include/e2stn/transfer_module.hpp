#pragma once

// Style-transfer network: per-domain attention encoders, a stacked fusion
// decoder (content queries, style keys/values) and a small convolutional
// refiner mapping the fused C x m features back to a C x B sample.

#include "e2stn/ops.hpp"

#include <random>
#include <string>
#include <vector>

namespace e2stn {

struct TransferConfig {
  int channels = 62;
  int bands = 5;
  int model_dim = 50;
  int heads = 10;
  int ffn_dim = 256;
  int decoder_layers = 3;

  int head_dim() const { return model_dim / heads; }

  void validate() const {
    if (channels < 1 || bands < 1 || model_dim < 1 || heads < 1 || ffn_dim < 1 || decoder_layers < 1)
      throw ConfigError("transfer config: all dimensions must be >= 1");
    if (model_dim % heads != 0)
      throw ConfigError("transfer config: model_dim " + std::to_string(model_dim) +
                        " not divisible by heads " + std::to_string(heads));
  }
};

namespace init {

// Uniform in +-sqrt(6 / (fan_in + fan_out)). Drawn in double so float and
// double models built from the same seed hold the same values.
template <typename T>
Mat<T> glorot(Eigen::Index fan_in, Eigen::Index fan_out, Eigen::Index rows, Eigen::Index cols,
              std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
  return m;
}

template <typename T>
Mat<T> glorot(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  return glorot<T>(rows, cols, rows, cols, rng);
}

}  // namespace init

template <typename T>
struct LayerNormParams {
  Param<T> gain, bias;

  LayerNormParams() = default;
  LayerNormParams(const std::string& name, int dim)
      : gain(name + ".gain", Mat<T>::Ones(1, dim)), bias(name + ".bias", Mat<T>::Zero(1, dim)) {}

  template <typename F>
  void visit(F&& f) {
    f(gain);
    f(bias);
  }
};

template <typename T>
struct FfnParams {
  Param<T> w1, b1, w2, b2;

  FfnParams() = default;
  FfnParams(const std::string& name, int dim, int hidden, std::mt19937_64& rng)
      : w1(name + ".w1", init::glorot<T>(dim, hidden, rng)),
        b1(name + ".b1", Mat<T>::Zero(1, hidden)),
        w2(name + ".w2", init::glorot<T>(hidden, dim, rng)),
        b2(name + ".b2", Mat<T>::Zero(1, dim)) {}

  template <typename F>
  void visit(F&& f) {
    f(w1);
    f(b1);
    f(w2);
    f(b2);
  }
};

// Q/K/V input projections plus the output projection of one attention block.
template <typename T>
struct AttentionParams {
  Param<T> wq, wk, wv, wo;

  AttentionParams() = default;
  AttentionParams(const std::string& name, int in_dim, int dim, std::mt19937_64& rng)
      : wq(name + ".wq", init::glorot<T>(in_dim, dim, rng)),
        wk(name + ".wk", init::glorot<T>(in_dim, dim, rng)),
        wv(name + ".wv", init::glorot<T>(in_dim, dim, rng)),
        wo(name + ".wo", init::glorot<T>(dim, dim, rng)) {}

  template <typename F>
  void visit(F&& f) {
    f(wq);
    f(wk);
    f(wv);
    f(wo);
  }
};

template <typename T>
struct DomainEncoderParams {
  AttentionParams<T> attn;  // wq/wk/wv are B x m, wo is m x m
  FfnParams<T> ffn;
  LayerNormParams<T> ln1, ln2;

  DomainEncoderParams() = default;
  DomainEncoderParams(const std::string& name, const TransferConfig& cfg, std::mt19937_64& rng)
      : attn(name + ".attn", cfg.bands, cfg.model_dim, rng),
        ffn(name + ".ffn", cfg.model_dim, cfg.ffn_dim, rng),
        ln1(name + ".ln1", cfg.model_dim),
        ln2(name + ".ln2", cfg.model_dim) {}

  template <typename F>
  void visit(F&& f) {
    attn.visit(f);
    ffn.visit(f);
    ln1.visit(f);
    ln2.visit(f);
  }
};

template <typename T>
struct DecoderLayerParams {
  AttentionParams<T> self_attn;
  AttentionParams<T> cross_attn;  // the content-query / style-key/value projections
  FfnParams<T> ffn;
  LayerNormParams<T> ln1, ln2, ln3;

  DecoderLayerParams() = default;
  DecoderLayerParams(const std::string& name, const TransferConfig& cfg, std::mt19937_64& rng)
      : self_attn(name + ".self", cfg.model_dim, cfg.model_dim, rng),
        cross_attn(name + ".cross", cfg.model_dim, cfg.model_dim, rng),
        ffn(name + ".ffn", cfg.model_dim, cfg.ffn_dim, rng),
        ln1(name + ".ln1", cfg.model_dim),
        ln2(name + ".ln2", cfg.model_dim),
        ln3(name + ".ln3", cfg.model_dim) {}

  template <typename F>
  void visit(F&& f) {
    self_attn.visit(f);
    cross_attn.visit(f);
    ffn.visit(f);
    ln1.visit(f);
    ln2.visit(f);
    ln3.visit(f);
  }
};

// Two width-3 convolutions along the channel axis: m -> 2B -> B feature planes.
// Kernel rows are laid out tap-major: row (tap * in_width + i).
template <typename T>
struct RefinerParams {
  static constexpr int kTaps = 3;
  Param<T> w1, b1, w2, b2;

  RefinerParams() = default;
  RefinerParams(const std::string& name, const TransferConfig& cfg, std::mt19937_64& rng)
      : w1(name + ".w1", init::glorot<T>(kTaps * cfg.model_dim, 2 * cfg.bands, kTaps * cfg.model_dim,
                                         2 * cfg.bands, rng)),
        b1(name + ".b1", Mat<T>::Zero(1, 2 * cfg.bands)),
        w2(name + ".w2", init::glorot<T>(kTaps * 2 * cfg.bands, cfg.bands, kTaps * 2 * cfg.bands,
                                         cfg.bands, rng)),
        b2(name + ".b2", Mat<T>::Zero(1, cfg.bands)) {}

  template <typename F>
  void visit(F&& f) {
    f(w1);
    f(b1);
    f(w2);
    f(b2);
  }
};

template <typename T>
struct TransferParams {
  TransferConfig cfg;
  DomainEncoderParams<T> source, target;
  std::vector<DecoderLayerParams<T>> decoder;
  RefinerParams<T> refiner;

  TransferParams() = default;
  TransferParams(const TransferConfig& c, std::mt19937_64& rng) : cfg(c) {
    cfg.validate();
    source = DomainEncoderParams<T>("transfer.enc_source", cfg, rng);
    target = DomainEncoderParams<T>("transfer.enc_target", cfg, rng);
    for (int l = 0; l < cfg.decoder_layers; ++l)
      decoder.emplace_back("transfer.dec" + std::to_string(l), cfg, rng);
    refiner = RefinerParams<T>("transfer.refine", cfg, rng);
  }

  template <typename F>
  void visit(F&& f) {
    source.visit(f);
    target.visit(f);
    for (auto& layer : decoder) layer.visit(f);
    refiner.visit(f);
  }
};

// ---------------------------------------------------------------------------
// Forward pieces (tape level)
// ---------------------------------------------------------------------------

template <typename T>
struct QKV {
  Var<T> q, k, v;
};

template <typename T>
QKV<T> project_qkv(Var<T> x, AttentionParams<T>& p) {
  Tape<T>& t = *x.tape;
  if (x.cols() != p.wq.value.rows())
    throw DimensionError("project_qkv: input " + shape_str(x.rows(), x.cols()) + " vs projection " +
                         shape_str(p.wq.value.rows(), p.wq.value.cols()));
  return {ad::matmul(x, t.param(p.wq)), ad::matmul(x, t.param(p.wk)), ad::matmul(x, t.param(p.wv))};
}

// Heads concatenated, then the output projection.
template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, int heads, Var<T> wo) {
  return ad::matmul(ad::attention_heads(q, k, v, heads), wo);
}

template <typename T>
Var<T> feed_forward(Var<T> x, FfnParams<T>& p) {
  Tape<T>& t = *x.tape;
  Var<T> h = ad::relu(ad::add_row(ad::matmul(x, t.param(p.w1)), t.param(p.b1)));
  return ad::add_row(ad::matmul(h, t.param(p.w2)), t.param(p.b2));
}

template <typename T>
Var<T> layer_norm(Var<T> x, LayerNormParams<T>& p) {
  Tape<T>& t = *x.tape;
  return ad::layer_norm(x, t.param(p.gain), t.param(p.bias));
}

// H' = LN(MSA(Q,K,V) + Q); H = LN(FFN(H') + H'). The first residual adds the
// projected queries, which is what makes the B -> m lift well-typed.
template <typename T>
Var<T> encoder_forward(Var<T> x, DomainEncoderParams<T>& p, int heads) {
  Tape<T>& t = *x.tape;
  auto [q, k, v] = project_qkv(x, p.attn);
  Var<T> h1 = layer_norm(ad::add(multi_head_attention(q, k, v, heads, t.param(p.attn.wo)), q), p.ln1);
  return layer_norm(ad::add(feed_forward(h1, p.ffn), h1), p.ln2);
}

// One fusion layer: self-attention over the content stream, cross-attention
// with keys/values from the style features, then FFN; residual + LN each.
template <typename T>
Var<T> decoder_layer(Var<T> z, Var<T> style, DecoderLayerParams<T>& p, int heads) {
  Tape<T>& t = *z.tape;
  {
    auto [q, k, v] = project_qkv(z, p.self_attn);
    z = layer_norm(ad::add(multi_head_attention(q, k, v, heads, t.param(p.self_attn.wo)), z), p.ln1);
  }
  {
    Var<T> q = ad::matmul(z, t.param(p.cross_attn.wq));
    Var<T> k = ad::matmul(style, t.param(p.cross_attn.wk));
    Var<T> v = ad::matmul(style, t.param(p.cross_attn.wv));
    z = layer_norm(ad::add(multi_head_attention(q, k, v, heads, t.param(p.cross_attn.wo)), z), p.ln2);
  }
  return layer_norm(ad::add(feed_forward(z, p.ffn), z), p.ln3);
}

template <typename T>
Var<T> decoder_forward(Var<T> content, Var<T> style, std::vector<DecoderLayerParams<T>>& layers,
                       int heads) {
  if (content.rows() != style.rows() || content.cols() != style.cols())
    throw DimensionError("decoder: content " + shape_str(content.rows(), content.cols()) +
                         " vs style " + shape_str(style.rows(), style.cols()));
  Var<T> z = content;
  for (auto& layer : layers) z = decoder_layer(z, style, layer, heads);
  return z;
}

namespace detail {
// Width-3 "same" convolution along rows via row shifts and one matmul.
template <typename T>
Var<T> conv_rows3(Var<T> x, Var<T> w, Var<T> b) {
  if (w.rows() != 3 * x.cols()) throw DimensionError("refiner: kernel rows != 3 * input width");
  Var<T> patches = ad::hcat<T>({ad::shift_rows(x, -1), x, ad::shift_rows(x, 1)});
  return ad::add_row(ad::matmul(patches, w), b);
}
}  // namespace detail

template <typename T>
Var<T> cnn_refine(Var<T> hd, RefinerParams<T>& p) {
  Tape<T>& t = *hd.tape;
  Var<T> h = ad::relu(detail::conv_rows3(hd, t.param(p.w1), t.param(p.b1)));
  return detail::conv_rows3(h, t.param(p.w2), t.param(p.b2));
}

template <typename T>
Var<T> stylize(Var<T> xs, Var<T> xt, TransferParams<T>& p) {
  require_shape(xs.value(), p.cfg.channels, p.cfg.bands, "stylize source");
  require_shape(xt.value(), p.cfg.channels, p.cfg.bands, "stylize target");
  Var<T> hs = encoder_forward(xs, p.source, p.cfg.heads);
  Var<T> ht = encoder_forward(xt, p.target, p.cfg.heads);
  Var<T> hd = decoder_forward(hs, ht, p.decoder, p.cfg.heads);
  return cnn_refine(hd, p.refiner);
}

// Value-level convenience: evaluates on a throwaway non-recording tape.
template <typename T>
Mat<T> stylize(const Mat<T>& xs, const Mat<T>& xt, TransferParams<T>& p) {
  Tape<T> tape(false);
  return stylize(tape.constant(xs), tape.constant(xt), p).value();
}

}  // namespace e2stn
