#pragma once

#include "e2stn/core.hpp"

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace e2stn {

// One 1-second EEG feature matrix: C channels x B bands.
struct Sample {
  MatD features;
  int label = 0;
  int subject_id = 0;
  std::string dataset_id;

  friend bool operator==(const Sample& a, const Sample& b) {
    return a.label == b.label && a.subject_id == b.subject_id && a.dataset_id == b.dataset_id &&
           a.features.rows() == b.features.rows() && a.features.cols() == b.features.cols() &&
           a.features == b.features;
  }
};

enum class DatasetRole { source, target };

inline const char* to_string(DatasetRole r) { return r == DatasetRole::source ? "source" : "target"; }

struct Dataset {
  std::vector<Sample> samples;
  int channel_count = 0;
  int band_count = 0;
  std::vector<std::string> class_names;
  DatasetRole role = DatasetRole::source;

  int class_count() const { return static_cast<int>(class_names.size()); }
  std::size_t size() const { return samples.size(); }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.channel_count == b.channel_count && a.band_count == b.band_count &&
           a.class_names == b.class_names && a.role == b.role && a.samples == b.samples;
  }
};

inline std::vector<std::string> default_class_names(int classes) {
  static const char* emotions[] = {"neutral", "happy", "sad", "fear"};
  std::vector<std::string> out;
  for (int i = 0; i < classes; ++i)
    out.emplace_back(classes <= 4 ? emotions[i] : "class" + std::to_string(i));
  return out;
}

// Checks shape, finiteness and label range of every sample.
inline void validate(const Dataset& ds) {
  if (ds.channel_count < 1 || ds.band_count < 1) throw ConfigError("dataset: C and B must be >= 1");
  if (ds.class_names.empty()) throw ConfigError("dataset: no classes");
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    if (s.features.rows() != ds.channel_count || s.features.cols() != ds.band_count)
      throw DimensionError("sample " + std::to_string(i) + ": features " +
                           shape_str(s.features.rows(), s.features.cols()) + ", dataset is " +
                           shape_str(ds.channel_count, ds.band_count));
    if (!s.features.allFinite()) throw NumericError("sample " + std::to_string(i) + ": non-finite");
    if (s.label < 0 || s.label >= ds.class_count())
      throw ConfigError("sample " + std::to_string(i) + ": label " + std::to_string(s.label) +
                        " outside [0, " + std::to_string(ds.class_count()) + ")");
  }
}

// ---------------------------------------------------------------------------
// Synthetic cross-dataset generator
// ---------------------------------------------------------------------------

struct SynthShiftConfig {
  int channels = 8;
  int bands = 5;
  int classes = 3;
  int samples_per_class_per_subject = 20;
  int subjects_per_dataset = 3;
  double class_separation = 1.0;
  // Multiplicative gain applied to the target domain (1 means no gain change).
  double domain_shift_scale = 1.0;
  double domain_shift_offset = 0.0;
  double noise_std = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (channels < 1 || bands < 1 || classes < 1 || samples_per_class_per_subject < 1 ||
        subjects_per_dataset < 1)
      throw ConfigError("synthetic config: all counts must be >= 1");
    if (!(class_separation >= 0.0)) throw ConfigError("synthetic config: class_separation < 0");
    if (!(domain_shift_scale >= 0.0)) throw ConfigError("synthetic config: domain_shift_scale < 0");
    if (!std::isfinite(domain_shift_offset)) throw ConfigError("synthetic config: offset not finite");
    if (!(noise_std > 0.0) || !std::isfinite(noise_std))
      throw ConfigError("synthetic config: noise_std must be > 0");
  }
};

struct DatasetPair {
  Dataset source;
  Dataset target;
};

// Source: template[label] + noise. Target: gain * (template[label] + noise) + offset,
// with independent noise. Templates are shared, so class structure is common to
// both domains and only the affine statistics differ.
inline DatasetPair generate_synthetic_pair(const SynthShiftConfig& cfg) {
  cfg.validate();
  const int C = cfg.channels, B = cfg.bands;

  std::mt19937_64 template_rng(cfg.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<MatD> templates;
  for (int p = 0; p < cfg.classes; ++p) {
    MatD t(C, B);
    for (int c = 0; c < C; ++c)
      for (int b = 0; b < B; ++b) t(c, b) = cfg.class_separation * unit(template_rng);
    templates.push_back(std::move(t));
  }

  const Eigen::RowVectorXd gain = Eigen::RowVectorXd::Constant(B, cfg.domain_shift_scale);
  const Eigen::VectorXd offset = Eigen::VectorXd::Constant(C, cfg.domain_shift_offset);

  auto make = [&](DatasetRole role, std::uint64_t stream, const char* id) {
    std::mt19937_64 rng(cfg.seed ^ (0x9E3779B97F4A7C15ULL * stream));
    Dataset ds;
    ds.channel_count = C;
    ds.band_count = B;
    ds.class_names = default_class_names(cfg.classes);
    ds.role = role;
    for (int s = 0; s < cfg.subjects_per_dataset; ++s)
      for (int p = 0; p < cfg.classes; ++p)
        for (int i = 0; i < cfg.samples_per_class_per_subject; ++i) {
          MatD x(C, B);
          for (int c = 0; c < C; ++c)
            for (int b = 0; b < B; ++b) x(c, b) = templates[p](c, b) + cfg.noise_std * unit(rng);
          if (role == DatasetRole::target) {
            x = (x.array().rowwise() * gain.array()).matrix();
            x.colwise() += offset;
          }
          ds.samples.push_back(Sample{std::move(x), p, s, id});
        }
    return ds;
  };

  return {make(DatasetRole::source, 1, "synth-source"), make(DatasetRole::target, 2, "synth-target")};
}

// Z-scores every (channel, band) entry within each subject. Off unless asked for.
inline Dataset normalize_per_subject(Dataset ds) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) groups[ds.samples[i].subject_id].push_back(i);
  for (auto& [subject, idx] : groups) {
    MatD mean = MatD::Zero(ds.channel_count, ds.band_count);
    for (auto i : idx) mean += ds.samples[i].features;
    mean /= static_cast<double>(idx.size());
    MatD var = MatD::Zero(ds.channel_count, ds.band_count);
    for (auto i : idx) var.array() += (ds.samples[i].features - mean).array().square();
    var /= static_cast<double>(idx.size());
    const MatD sd = (var.array() + 1e-12).sqrt().matrix();
    for (auto i : idx)
      ds.samples[i].features = ((ds.samples[i].features - mean).array() / sd.array()).matrix();
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Text dataset format
//
//   E2STN1 C=<int> B=<int> P=<int> N=<int> [ROLE=source|target] [CLASSES=a,b,c]
//   then N records: "label subject_id dataset_id" followed by C lines of B values.
// ---------------------------------------------------------------------------

namespace io {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline bool parse_double(std::string_view tok, double& out) {
  std::string s(tok);
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && !s.empty();
}

inline bool parse_int(std::string_view tok, long long& out) {
  auto r = std::from_chars(tok.data(), tok.data() + tok.size(), out);
  return r.ec == std::errc{} && r.ptr == tok.data() + tok.size();
}

// Parses "KEY=value" tokens after the magic word into a map.
inline std::map<std::string, std::string> parse_header(std::string_view line, std::string_view magic) {
  auto toks = split_ws(line);
  if (toks.empty() || toks[0] != magic)
    throw FormatError("header: expected '" + std::string(magic) + "'");
  std::map<std::string, std::string> kv;
  for (std::size_t i = 1; i < toks.size(); ++i) {
    auto eq = toks[i].find('=');
    if (eq == std::string_view::npos) throw FormatError("header: bad token '" + std::string(toks[i]) + "'");
    kv[std::string(toks[i].substr(0, eq))] = std::string(toks[i].substr(eq + 1));
  }
  return kv;
}

inline long long header_int(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  long long v = 0;
  if (it == kv.end() || !parse_int(it->second, v)) throw FormatError("header: missing or bad " + key);
  return v;
}

// Reads one line of exactly `n` finite doubles into `row`.
inline void read_row(std::istream& in, std::size_t n, double* row, const std::string& where) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(where + ": unexpected end of file");
  auto toks = split_ws(line);
  if (toks.size() != n)
    throw FormatError(where + ": expected " + std::to_string(n) + " values, got " +
                      std::to_string(toks.size()));
  for (std::size_t i = 0; i < n; ++i) {
    if (!parse_double(toks[i], row[i])) throw FormatError(where + ": bad number '" + std::string(toks[i]) + "'");
    if (!std::isfinite(row[i])) throw FormatError(where + ": non-finite value");
  }
}

}  // namespace io

inline void write_dataset(std::ostream& out, const Dataset& ds) {
  validate(ds);
  out << "E2STN1 C=" << ds.channel_count << " B=" << ds.band_count << " P=" << ds.class_count()
      << " N=" << ds.samples.size() << " ROLE=" << to_string(ds.role) << " CLASSES=";
  for (std::size_t i = 0; i < ds.class_names.size(); ++i) {
    const auto& n = ds.class_names[i];
    if (n.empty() || n.find_first_of(" \t\n,=") != std::string::npos)
      throw ConfigError("class name '" + n + "' must be non-empty without spaces, ',' or '='");
    out << (i ? "," : "") << n;
  }
  out << '\n';
  for (const Sample& s : ds.samples) {
    if (s.dataset_id.empty() || s.dataset_id.find_first_of(" \t\n") != std::string::npos)
      throw ConfigError("dataset_id '" + s.dataset_id + "' must be non-empty without whitespace");
    out << s.label << ' ' << s.subject_id << ' ' << s.dataset_id << '\n';
    for (Eigen::Index c = 0; c < s.features.rows(); ++c) {
      for (Eigen::Index b = 0; b < s.features.cols(); ++b)
        out << (b ? " " : "") << io::format_double(s.features(c, b));
      out << '\n';
    }
  }
}

inline Dataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("header: empty file");
  const auto kv = io::parse_header(line, "E2STN1");
  const long long C = io::header_int(kv, "C"), B = io::header_int(kv, "B");
  const long long P = io::header_int(kv, "P"), N = io::header_int(kv, "N");
  if (C < 1 || B < 1 || P < 1 || N < 0) throw FormatError("header: C, B, P must be >= 1 and N >= 0");

  Dataset ds;
  ds.channel_count = static_cast<int>(C);
  ds.band_count = static_cast<int>(B);
  if (auto it = kv.find("ROLE"); it != kv.end()) {
    if (it->second == "source") ds.role = DatasetRole::source;
    else if (it->second == "target") ds.role = DatasetRole::target;
    else throw FormatError("header: bad ROLE '" + it->second + "'");
  }
  if (auto it = kv.find("CLASSES"); it != kv.end()) {
    std::stringstream ss(it->second);
    std::string name;
    while (std::getline(ss, name, ',')) ds.class_names.push_back(name);
    if (static_cast<long long>(ds.class_names.size()) != P)
      throw FormatError("header: CLASSES lists " + std::to_string(ds.class_names.size()) +
                        " names but P=" + std::to_string(P));
  } else {
    ds.class_names = default_class_names(static_cast<int>(P));
  }

  for (long long r = 0; r < N; ++r) {
    const std::string where = "record " + std::to_string(r);
    if (!std::getline(in, line)) throw FormatError(where + ": unexpected end of file");
    auto toks = io::split_ws(line);
    long long label = 0, subject = 0;
    if (toks.size() != 3 || !io::parse_int(toks[0], label) || !io::parse_int(toks[1], subject))
      throw FormatError(where + ": expected 'label subject_id dataset_id'");
    if (label < 0 || label >= P) throw FormatError(where + ": label " + std::to_string(label) + " out of range");
    Sample s;
    s.label = static_cast<int>(label);
    s.subject_id = static_cast<int>(subject);
    s.dataset_id = std::string(toks[2]);
    s.features.resize(C, B);
    for (long long c = 0; c < C; ++c)
      io::read_row(in, static_cast<std::size_t>(B), s.features.row(c).data(),
                   where + " channel " + std::to_string(c));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  write_dataset(out, ds);
  if (!out) throw FormatError("write to '" + path + "' failed");
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  try {
    return read_dataset(in);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace e2stn
