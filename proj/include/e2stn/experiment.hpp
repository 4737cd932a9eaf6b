#pragma once

// Experiment wiring: protocols, class alignment, config files, CSV artifacts.

#include "e2stn/trainer.hpp"

#include <filesystem>
#include <iostream>
#include <set>

namespace e2stn {

struct ProtocolSpec {
  std::string name;
  std::string source_path;
  std::string target_path;
  int classes = 0;  // 0: take from the source file
  // Source class name -> target class name. Classes absent from the map are
  // matched by identical name.
  std::map<std::string, std::string> class_map;

  void validate() const {
    if (classes != 0 && classes < 2) throw ConfigError("protocol: classes must be >= 2");
    std::set<std::string> images;
    for (const auto& [from, to] : class_map)
      if (!images.insert(to).second)
        throw ConfigError("protocol: class map is not a bijection ('" + to + "' mapped twice)");
  }
};

// One "source=target" pair per line; blank lines and '#' comments ignored.
inline std::map<std::string, std::string> parse_class_map(std::istream& in, const std::string& where) {
  std::map<std::string, std::string> out;
  std::set<std::string> images;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto toks = io::split_ws(line);
    if (toks.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError(where + ":" + std::to_string(lineno) + ": expected 'source=target'");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string from = trim(line.substr(0, eq)), to = trim(line.substr(eq + 1));
    if (from.empty() || to.empty())
      throw FormatError(where + ":" + std::to_string(lineno) + ": empty class name");
    if (!out.emplace(from, to).second)
      throw ConfigError(where + ":" + std::to_string(lineno) + ": '" + from + "' mapped twice");
    if (!images.insert(to).second)
      throw ConfigError(where + ":" + std::to_string(lineno) + ": '" + to + "' is the image of two classes");
  }
  return out;
}

inline std::map<std::string, std::string> load_class_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open class map '" + path + "'");
  return parse_class_map(in, path);
}

// Relabels `target` so that label i means the source's class i.
inline Dataset align_classes(const Dataset& source, Dataset target,
                             const std::map<std::string, std::string>& class_map) {
  const int P = source.class_count();
  if (target.class_count() != P)
    throw ConfigError("class alignment: source has " + std::to_string(P) + " classes, target has " +
                      std::to_string(target.class_count()));
  std::vector<int> remap(static_cast<std::size_t>(P), -1);
  for (int i = 0; i < P; ++i) {
    const std::string& src_name = source.class_names[static_cast<std::size_t>(i)];
    auto it = class_map.find(src_name);
    const std::string want = it == class_map.end() ? src_name : it->second;
    auto pos = std::find(target.class_names.begin(), target.class_names.end(), want);
    if (pos == target.class_names.end())
      throw ConfigError("class alignment: source class '" + src_name + "' has no target class '" + want + "'");
    const int j = static_cast<int>(pos - target.class_names.begin());
    if (remap[static_cast<std::size_t>(j)] != -1)
      throw ConfigError("class alignment: target class '" + want + "' matched twice");
    remap[static_cast<std::size_t>(j)] = i;
  }
  for (Sample& s : target.samples) s.label = remap[static_cast<std::size_t>(s.label)];
  target.class_names = source.class_names;
  return target;
}

// ---------------------------------------------------------------------------
// key=value configuration files
// ---------------------------------------------------------------------------

inline LossWeights parse_weights(const std::string& text) {
  std::vector<double> w;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    double v = 0;
    if (!io::parse_double(item, v)) throw ConfigError("weights: bad number '" + item + "'");
    w.push_back(v);
  }
  if (w.size() != 4) throw ConfigError("weights: expected four comma-separated values, got '" + text + "'");
  LossWeights out{w[0], w[1], w[2], w[3]};
  out.validate();
  return out;
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "full") return TrainMode::full;
  if (s == "ablation-t" || s == "ablation_t") return TrainMode::ablation_t;
  throw ConfigError("mode must be 'full' or 'ablation-t', got '" + s + "'");
}

inline Reduction parse_reduction(const std::string& s) {
  if (s == "sum") return Reduction::sum;
  if (s == "mean") return Reduction::mean;
  throw ConfigError("ce reduction must be 'sum' or 'mean', got '" + s + "'");
}

inline bool parse_bool(const std::string& s) {
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw ConfigError("expected a boolean, got '" + s + "'");
}

// Applies one setting; throws ConfigError on unknown keys or bad values.
inline void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value) {
  auto as_int = [&]() {
    long long v = 0;
    if (!io::parse_int(value, v)) throw ConfigError("config: '" + key + "' needs an integer, got '" + value + "'");
    return v;
  };
  auto as_double = [&]() {
    double v = 0;
    if (!io::parse_double(value, v)) throw ConfigError("config: '" + key + "' needs a number, got '" + value + "'");
    return v;
  };
  if (key == "epochs") cfg.epochs = static_cast<int>(as_int());
  else if (key == "batch_size") cfg.batch_size = static_cast<int>(as_int());
  else if (key == "lr" || key == "learning_rate") cfg.learning_rate = as_double();
  else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(as_int());
  else if (key == "mode") cfg.mode = parse_mode(value);
  else if (key == "weights") cfg.weights = parse_weights(value);
  else if (key == "eval_every") cfg.eval_every = static_cast<int>(as_int());
  else if (key == "ce_reduction") cfg.ce_reduction = parse_reduction(value);
  else if (key == "freeze_eval_stack") cfg.freeze_eval_stack = parse_bool(value);
  else if (key == "beta1") cfg.beta1 = as_double();
  else if (key == "beta2") cfg.beta2 = as_double();
  else if (key == "adam_eps") cfg.adam_eps = as_double();
  else if (key == "optimizer") {
    if (value == "adam") cfg.optimizer = OptimizerKind::adam;
    else if (value == "sgd") cfg.optimizer = OptimizerKind::sgd;
    else throw ConfigError("config: optimizer must be 'adam' or 'sgd'");
  } else if (key == "normalize_graph") cfg.model.normalize_graph = parse_bool(value);
  else if (!cfg.model.set(key, as_int())) throw ConfigError("config: unknown key '" + key + "'");
}

inline void apply_config(TrainConfig& cfg, std::istream& in, const std::string& where) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (io::split_ws(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key_part = line.substr(0, eq), value_part = line.substr(eq + 1);
    auto toks_k = io::split_ws(key_part);
    auto toks_v = io::split_ws(value_part);
    if (toks_k.size() != 1 || toks_v.size() != 1)
      throw ConfigError(where + ":" + std::to_string(lineno) + ": expected key=value");
    try {
      apply_setting(cfg, std::string(toks_k[0]), std::string(toks_v[0]));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void load_config_file(TrainConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  apply_config(cfg, in, path);
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

// Writes into `<path>.tmp` and renames over `path` once the content is complete.
class AtomicFile {
 public:
  explicit AtomicFile(std::filesystem::path path) : path_(std::move(path)), tmp_(path_) {
    tmp_ += ".tmp";
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw FormatError("cannot open '" + tmp_.string() + "' for writing");
  }
  AtomicFile(const AtomicFile&) = delete;
  AtomicFile& operator=(const AtomicFile&) = delete;
  ~AtomicFile() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      std::filesystem::remove(tmp_, ec);
    }
  }

  std::ostream& stream() { return out_; }

  void commit() {
    out_.flush();
    if (!out_) throw FormatError("write to '" + tmp_.string() + "' failed");
    out_.close();
    std::filesystem::rename(tmp_, path_);
    committed_ = true;
  }

 private:
  std::filesystem::path path_, tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

inline std::string format_fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Columns: epoch, losses, train_acc, acc, std, then one column per target subject.
inline void write_metrics_csv(std::ostream& out, const std::vector<MetricsRecord>& records) {
  std::set<int> subjects;
  for (const auto& r : records)
    for (const auto& [s, a] : r.subject_acc) subjects.insert(s);
  out << "epoch,L_c,L_s,L_id,L_ce,L_total,train_acc,acc,std";
  for (int s : subjects) out << ",subject_" << s;
  out << '\n';
  for (const auto& r : records) {
    out << r.epoch;
    for (double v : {r.L_c, r.L_s, r.L_id, r.L_ce, r.L_total, r.train_acc, r.acc, r.std})
      out << ',' << io::format_double(v);
    for (int s : subjects) {
      auto it = r.subject_acc.find(s);
      out << ',' << (it == r.subject_acc.end() ? std::string("nan") : io::format_double(it->second));
    }
    out << '\n';
  }
}

// Row-normalized percentages; a class with no samples gets a row of zeros.
inline std::vector<std::vector<double>> confusion_percent(const std::vector<std::vector<long>>& counts) {
  std::vector<std::vector<double>> out;
  for (const auto& row : counts) {
    const long total = std::accumulate(row.begin(), row.end(), 0L);
    std::vector<double> r;
    for (long c : row) r.push_back(total ? 100.0 * static_cast<double>(c) / static_cast<double>(total) : 0.0);
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_confusion_csv(std::ostream& out, const std::vector<std::vector<long>>& counts,
                                const std::vector<std::string>& names) {
  const auto pct = confusion_percent(counts);
  out << "true\\predicted";
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  for (std::size_t i = 0; i < pct.size(); ++i) {
    out << names.at(i);
    for (double v : pct[i]) out << ',' << format_fixed(v);
    out << '\n';
  }
}

inline void write_subjects_csv(std::ostream& out, const EvalResult& ev) {
  out << "subject,accuracy\n";
  for (const auto& [s, a] : ev.subject_acc) out << s << ',' << format_fixed(a) << '\n';
  out << "ACC," << format_fixed(ev.acc) << '\n';
  out << "STD," << format_fixed(ev.std) << '\n';
}

// Per channel: mean |H_DG[c, :]| over samples and filters, divided by the
// channel maximum. A map that is zero everywhere is reported as all ones.
template <typename T>
std::vector<double> export_activity_map(Model<T>& model, const Dataset& ds) {
  if (ds.samples.empty()) throw ConfigError("activity map: empty dataset");
  if (ds.channel_count != model.cfg.channels || ds.band_count != model.cfg.bands)
    throw DimensionError("activity map: dataset is " + shape_str(ds.channel_count, ds.band_count) +
                         ", model expects " + shape_str(model.cfg.channels, model.cfg.bands));
  Eigen::VectorXd score = Eigen::VectorXd::Zero(ds.channel_count);
  for (const Sample& s : ds.samples) {
    Tape<T> tape(false);
    auto d = discriminate(tape.constant(s.features.template cast<T>()), model.graph);
    score += d.hdg.value().template cast<double>().cwiseAbs().rowwise().mean();
  }
  score /= static_cast<double>(ds.samples.size());
  const double top = score.maxCoeff();
  std::vector<double> out(static_cast<std::size_t>(score.size()), 1.0);
  if (top > 0.0)
    for (Eigen::Index c = 0; c < score.size(); ++c) out[static_cast<std::size_t>(c)] = score(c) / top;
  return out;
}

inline void write_activity_csv(std::ostream& out, const std::vector<double>& scores) {
  out << "channel,score\n";
  for (std::size_t c = 0; c < scores.size(); ++c) out << c << ',' << format_fixed(scores[c], 9) << '\n';
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

struct ProtocolData {
  Dataset source;
  Dataset target;
};

inline ProtocolData load_protocol(const ProtocolSpec& protocol) {
  protocol.validate();
  ProtocolData d{load_dataset(protocol.source_path), load_dataset(protocol.target_path)};
  if (protocol.classes != 0 && d.source.class_count() != protocol.classes)
    throw ConfigError("protocol '" + protocol.name + "' declares " + std::to_string(protocol.classes) +
                      " classes, source has " + std::to_string(d.source.class_count()));
  d.target = align_classes(d.source, std::move(d.target), protocol.class_map);
  return d;
}

struct ExperimentOutputs {
  std::vector<MetricsRecord> metrics;
  EvalResult eval;
  std::vector<double> activity;
};

// Trains and evaluates, then writes metrics.csv, confusion_matrix.csv,
// subjects.csv, activity_map.csv and model.ckpt into out_dir. Nothing is
// written unless training and evaluation succeed.
inline ExperimentOutputs execute_experiment(const ProtocolData& data, const TrainConfig& cfg,
                                            const std::filesystem::path& out_dir,
                                            const std::function<void(const MetricsRecord&)>& on_record = {}) {
  auto run = train<float>(data.source, data.target, cfg, on_record);
  ExperimentOutputs out;
  out.metrics = run.metrics;
  out.eval = run.final_eval;
  out.activity = export_activity_map(run.model, data.target);

  std::filesystem::create_directories(out_dir);
  AtomicFile metrics(out_dir / "metrics.csv"), confusion(out_dir / "confusion_matrix.csv"),
      subjects(out_dir / "subjects.csv"), activity(out_dir / "activity_map.csv"), ckpt(out_dir / "model.ckpt");
  write_metrics_csv(metrics.stream(), out.metrics);
  write_confusion_csv(confusion.stream(), out.eval.confusion, data.source.class_names);
  write_subjects_csv(subjects.stream(), out.eval);
  write_activity_csv(activity.stream(), out.activity);
  std::map<std::string, std::string> extra{{"mode", to_string(cfg.mode)},
                                           {"seed", std::to_string(cfg.seed)},
                                           {"epochs", std::to_string(cfg.epochs)}};
  for (std::size_t i = 0; i < data.source.class_names.size(); ++i)
    extra["class" + std::to_string(i)] = data.source.class_names[i];
  write_checkpoint(ckpt.stream(), run.model, extra);
  for (AtomicFile* f : {&metrics, &confusion, &subjects, &activity, &ckpt}) f->commit();
  return out;
}

// Exit code 0 on success, 2 on any error (reported on `err`).
inline int run_experiment(const ProtocolSpec& protocol, const TrainConfig& cfg,
                          const std::filesystem::path& out_dir, std::ostream& err = std::cerr) {
  try {
    execute_experiment(load_protocol(protocol), cfg, out_dir);
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << (protocol.name.empty() ? "" : protocol.name + ": ") << e.what() << '\n';
    return 2;
  }
}

struct AblationRow {
  std::uint64_t seed = 0;
  double acc_full = 0, std_full = 0;
  double acc_t = 0, std_t = 0;
  double delta() const { return acc_full - acc_t; }
};

// Full and ablation-t runs with shared seeds.
inline std::vector<AblationRow> ablation_report(const ProtocolData& data, TrainConfig cfg,
                                                const std::vector<std::uint64_t>& seeds,
                                                const std::function<void(const AblationRow&)>& on_row = {}) {
  if (seeds.empty()) throw ConfigError("ablation: no seeds");
  std::vector<AblationRow> rows;
  for (std::uint64_t seed : seeds) {
    AblationRow row;
    row.seed = seed;
    cfg.seed = seed;
    cfg.mode = TrainMode::full;
    const EvalResult full = train<float>(data.source, data.target, cfg).final_eval;
    cfg.mode = TrainMode::ablation_t;
    const EvalResult abl = train<float>(data.source, data.target, cfg).final_eval;
    row.acc_full = full.acc;
    row.std_full = full.std;
    row.acc_t = abl.acc;
    row.std_t = abl.std;
    if (on_row) on_row(row);
    rows.push_back(row);
  }
  return rows;
}

inline void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "seed,acc_full,std_full,acc_ablation_t,std_ablation_t,delta\n";
  double sf = 0, sst = 0, st = 0, stt = 0;
  for (const auto& r : rows) {
    out << r.seed << ',' << format_fixed(r.acc_full) << ',' << format_fixed(r.std_full) << ','
        << format_fixed(r.acc_t) << ',' << format_fixed(r.std_t) << ',' << format_fixed(r.delta()) << '\n';
    sf += r.acc_full;
    sst += r.std_full;
    st += r.acc_t;
    stt += r.std_t;
  }
  const double n = static_cast<double>(rows.size());
  out << "mean," << format_fixed(sf / n) << ',' << format_fixed(sst / n) << ',' << format_fixed(st / n) << ','
      << format_fixed(stt / n) << ',' << format_fixed((sf - st) / n) << '\n';
}

}  // namespace e2stn
