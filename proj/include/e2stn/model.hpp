#pragma once

#include "e2stn/data_model.hpp"
#include "e2stn/transfer_evaluation.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace e2stn {

struct ModelConfig {
  int channels = 62;
  int bands = 5;
  int classes = 3;
  // transfer module
  int model_dim = 50;
  int heads = 10;
  int ffn_dim = 256;
  int decoder_layers = 3;
  // discriminative module
  int cheb_order = 5;
  int graph_features = 128;
  int hidden = 200;
  bool normalize_graph = false;
  // evaluation stack
  int filters1 = 8;
  int depth = 8;
  int filters2 = 8;

  TransferConfig transfer() const { return {channels, bands, model_dim, heads, ffn_dim, decoder_layers}; }
  GraphConfig graph() const {
    return {channels, bands, cheb_order, graph_features, hidden, classes, normalize_graph};
  }
  EvalStackConfig eval_stack() const { return {channels, bands, filters1, depth, filters2}; }

  void validate() const {
    transfer().validate();
    graph().validate();
    eval_stack().validate();
  }

  // Ordered key/value view used by checkpoints and config files.
  std::map<std::string, long long> to_map() const {
    return {{"channels", channels},     {"bands", bands},
            {"classes", classes},       {"model_dim", model_dim},
            {"heads", heads},           {"ffn_dim", ffn_dim},
            {"decoder_layers", decoder_layers}, {"cheb_order", cheb_order},
            {"graph_features", graph_features}, {"hidden", hidden},
            {"normalize_graph", normalize_graph ? 1 : 0}, {"filters1", filters1},
            {"depth", depth},           {"filters2", filters2}};
  }

  // Returns false if `key` is not a model field.
  bool set(const std::string& key, long long v) {
    const int iv = static_cast<int>(v);
    if (key == "channels") channels = iv;
    else if (key == "bands") bands = iv;
    else if (key == "classes") classes = iv;
    else if (key == "model_dim") model_dim = iv;
    else if (key == "heads") heads = iv;
    else if (key == "ffn_dim") ffn_dim = iv;
    else if (key == "decoder_layers") decoder_layers = iv;
    else if (key == "cheb_order") cheb_order = iv;
    else if (key == "graph_features") graph_features = iv;
    else if (key == "hidden") hidden = iv;
    else if (key == "normalize_graph") normalize_graph = v != 0;
    else if (key == "filters1") filters1 = iv;
    else if (key == "depth") depth = iv;
    else if (key == "filters2") filters2 = iv;
    else return false;
    return true;
  }
};

template <typename T>
struct Model {
  ModelConfig cfg;
  TransferParams<T> transfer;
  DynGraphParams<T> graph;
  EvalStackParams<T> eval;

  Model() = default;
  Model(const ModelConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    transfer = TransferParams<T>(cfg.transfer(), rng);
    graph = DynGraphParams<T>(cfg.graph(), rng);
    eval = EvalStackParams<T>(cfg.eval_stack(), rng);
  }

  template <typename F>
  void visit(F&& f) {
    transfer.visit(f);
    graph.visit(f);
    eval.visit(f);
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&n](Param<T>& p) { n += static_cast<std::size_t>(p.value.size()); });
    return n;
  }

  void zero_grad() {
    visit([](Param<T>& p) { p.zero_grad(); });
  }
};

// Same architecture, values converted to U.
template <typename U, typename T>
Model<U> cast_model(Model<T>& src) {
  Model<U> dst(src.cfg, 0);
  std::vector<Param<T>*> from;
  src.visit([&from](Param<T>& p) { from.push_back(&p); });
  std::size_t i = 0;
  dst.visit([&](Param<U>& p) {
    p.value = from[i]->value.template cast<U>();
    p.frozen = from[i]->frozen;
    p.zero_grad();
    ++i;
  });
  return dst;
}

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   E2STN-CKPT1
//   <key>=<value>            (config block, one per line)
//   tensors=<count>
//   then per tensor: "<name> <rows> <cols>\n" followed by rows*cols
//   64-bit little-endian IEEE doubles (row-major).
// ---------------------------------------------------------------------------

namespace ckpt {

inline void write_f64_le(std::ostream& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

inline double read_f64_le(std::istream& in) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), 8)) throw FormatError("checkpoint: truncated tensor data");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace ckpt

template <typename T>
void write_checkpoint(std::ostream& out, Model<T>& model,
                      const std::map<std::string, std::string>& extra = {}) {
  out << "E2STN-CKPT1\n";
  for (const auto& [k, v] : model.cfg.to_map()) out << k << '=' << v << '\n';
  for (const auto& [k, v] : extra) out << k << '=' << v << '\n';
  std::size_t count = 0;
  model.visit([&count](Param<T>& p) { (void)p; ++count; });
  out << "tensors=" << count << '\n';
  model.visit([&out](Param<T>& p) {
    out << p.name << ' ' << p.value.rows() << ' ' << p.value.cols() << '\n';
    for (Eigen::Index i = 0; i < p.value.size(); ++i)
      ckpt::write_f64_le(out, static_cast<double>(p.value.data()[i]));
  });
}

struct CheckpointData {
  Model<double> model;
  std::map<std::string, std::string> extra;
};

inline CheckpointData read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "E2STN-CKPT1") throw FormatError("checkpoint: bad magic");
  ModelConfig cfg;
  std::map<std::string, std::string> extra;
  long long count = -1;
  while (std::getline(in, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: bad config line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    long long v = 0;
    if (key == "tensors") {
      if (!io::parse_int(value, count)) throw FormatError("checkpoint: bad tensor count");
      break;
    }
    if (io::parse_int(value, v) && cfg.set(key, v)) continue;
    extra[key] = value;
  }
  if (count < 0) throw FormatError("checkpoint: missing tensor block");
  CheckpointData data{Model<double>(cfg, 0), std::move(extra)};
  std::map<std::string, Param<double>*> by_name;
  data.model.visit([&by_name](Param<double>& p) { by_name[p.name] = &p; });
  if (static_cast<std::size_t>(count) != by_name.size())
    throw FormatError("checkpoint: " + std::to_string(count) + " tensors, architecture has " +
                      std::to_string(by_name.size()));
  for (long long i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw FormatError("checkpoint: truncated tensor header");
    auto toks = io::split_ws(line);
    long long r = 0, c = 0;
    if (toks.size() != 3 || !io::parse_int(toks[1], r) || !io::parse_int(toks[2], c))
      throw FormatError("checkpoint: bad tensor header '" + line + "'");
    auto it = by_name.find(std::string(toks[0]));
    if (it == by_name.end()) throw FormatError("checkpoint: unknown tensor '" + std::string(toks[0]) + "'");
    Param<double>& p = *it->second;
    if (p.value.rows() != r || p.value.cols() != c)
      throw FormatError("checkpoint: tensor '" + p.name + "' has shape " + shape_str(r, c) +
                        ", expected " + shape_str(p.value.rows(), p.value.cols()));
    for (Eigen::Index k = 0; k < p.value.size(); ++k) p.value.data()[k] = ckpt::read_f64_le(in);
  }
  return data;
}

template <typename T>
void save_checkpoint(Model<T>& model, const std::string& path,
                     const std::map<std::string, std::string>& extra = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  write_checkpoint(out, model, extra);
  if (!out) throw FormatError("write to '" + path + "' failed");
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return read_checkpoint(in);
}

// Stylized sample carrying the source label.
template <typename T>
Sample stylize(const Sample& xs, const Sample& xt, Model<T>& model) {
  Mat<T> out = stylize<T>(xs.features.template cast<T>(), xt.features.template cast<T>(), model.transfer);
  return Sample{out.template cast<double>(), xs.label, xs.subject_id, xs.dataset_id};
}

}  // namespace e2stn
