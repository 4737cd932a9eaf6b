#pragma once

// Raw EEG -> C x B differential-entropy feature matrices.

#include "e2stn/data_model.hpp"

#include <algorithm>
#include <array>
#include <complex>
#include <numbers>
#include <span>
#include <vector>

namespace e2stn {

struct RawRecording {
  MatD data;  // C x T, microvolts
  double sample_rate_hz = 200.0;
  int subject_id = 0;
  int label = 0;
  std::string dataset_id = "raw";

  Eigen::Index channels() const { return data.rows(); }
  Eigen::Index samples() const { return data.cols(); }

  void validate() const {
    if (!(sample_rate_hz > 0.0)) throw ConfigError("recording: sample rate must be > 0");
    if (data.rows() < 1) throw ConfigError("recording: no channels");
    if (static_cast<double>(data.cols()) < sample_rate_hz)
      throw ConfigError("recording: " + std::to_string(data.cols()) +
                        " samples is shorter than one 1-s window");
    if (!data.allFinite()) throw NumericError("recording: non-finite samples");
  }
};

struct BandSpec {
  std::string name;
  double low_hz = 0.0;
  double high_hz = 0.0;
};

inline std::vector<BandSpec> default_bands() {
  return {{"delta", 1.0, 4.0}, {"theta", 4.0, 8.0}, {"alpha", 8.0, 14.0}, {"beta", 14.0, 30.0},
          {"gamma", 30.0, 50.0}};
}

// Cascade of biquads; each row of `sections` is b0 b1 b2 a0 a1 a2 with a0 = 1.
struct SosFilter {
  std::vector<std::array<double, 6>> sections;

  std::complex<double> response(double freq_hz, double fs) const {
    const std::complex<double> z = std::polar(1.0, 2.0 * std::numbers::pi * freq_hz / fs);
    const std::complex<double> zi = 1.0 / z, zi2 = zi * zi;
    std::complex<double> h = 1.0;
    for (const auto& s : sections) h *= (s[0] + s[1] * zi + s[2] * zi2) / (s[3] + s[4] * zi + s[5] * zi2);
    return h;
  }

  std::vector<double> apply(std::span<const double> x) const {
    std::vector<double> y(x.begin(), x.end());
    for (const auto& s : sections) {
      double z1 = 0.0, z2 = 0.0;  // transposed direct form II
      for (double& v : y) {
        const double in = v;
        const double out = s[0] * in + z1;
        z1 = s[1] * in - s[4] * out + z2;
        z2 = s[2] * in - s[5] * out;
        v = out;
      }
    }
    return y;
  }
};

// Digital Butterworth band-pass of the given prototype order (2*order poles),
// designed by the band-pass transform of the analog prototype followed by the
// prewarped bilinear transform. Unity gain at the geometric centre.
inline SosFilter design_butterworth_bandpass(int order, double low_hz, double high_hz, double fs) {
  using cd = std::complex<double>;
  if (order < 1) throw ConfigError("butterworth: order must be >= 1");
  if (!(fs > 0.0) || !(low_hz > 0.0) || !(low_hz < high_hz) || !(high_hz < fs / 2.0))
    throw ConfigError("butterworth: need 0 < low < high < fs/2 (low=" + std::to_string(low_hz) +
                      ", high=" + std::to_string(high_hz) + ", fs=" + std::to_string(fs) + ")");
  const double pi = std::numbers::pi;
  const double w1 = 2.0 * fs * std::tan(pi * low_hz / fs);
  const double w2 = 2.0 * fs * std::tan(pi * high_hz / fs);
  const double w0 = std::sqrt(w1 * w2), bw = w2 - w1;

  std::vector<cd> complex_poles;
  std::vector<double> real_poles;
  for (int k = 1; k <= order; ++k) {
    const cd p = std::polar(1.0, pi * (2.0 * k + order - 1) / (2.0 * order));
    const cd a = p * (bw / 2.0);
    const cd d = std::sqrt(a * a - w0 * w0);
    for (const cd s : {a + d, a - d}) {
      const cd z = (2.0 * fs + s) / (2.0 * fs - s);
      if (std::abs(z.imag()) > 1e-12 * std::max(1.0, std::abs(z))) {
        if (z.imag() > 0) complex_poles.push_back(z);
      } else {
        real_poles.push_back(z.real());
      }
    }
  }
  SosFilter f;
  for (const cd z : complex_poles) {
    if (std::abs(z) >= 1.0) throw NumericError("butterworth: unstable pole");
    f.sections.push_back({1.0, 0.0, -1.0, 1.0, -2.0 * z.real(), std::norm(z)});
  }
  std::sort(real_poles.begin(), real_poles.end());
  if (real_poles.size() % 2 != 0) throw NumericError("butterworth: unpaired real pole");
  for (std::size_t i = 0; i < real_poles.size(); i += 2) {
    const double r1 = real_poles[i], r2 = real_poles[i + 1];
    if (std::abs(r1) >= 1.0 || std::abs(r2) >= 1.0) throw NumericError("butterworth: unstable pole");
    f.sections.push_back({1.0, 0.0, -1.0, 1.0, -(r1 + r2), r1 * r2});
  }
  if (static_cast<int>(f.sections.size()) != order) throw NumericError("butterworth: section count");

  const double centre_hz = std::atan(w0 / (2.0 * fs)) * fs / pi;
  const double g = std::pow(1.0 / std::abs(f.response(centre_hz, fs)), 1.0 / order);
  for (auto& s : f.sections)
    for (int i = 0; i < 3; ++i) s[static_cast<std::size_t>(i)] *= g;
  return f;
}

// Zero-phase band-pass: forward pass, then the same filter over the reversed output.
inline std::vector<double> butterworth_bandpass(std::span<const double> x, double low_hz,
                                                double high_hz, int order, double fs) {
  const SosFilter f = design_butterworth_bandpass(order, low_hz, high_hz, fs);
  std::vector<double> y = f.apply(x);
  std::reverse(y.begin(), y.end());
  y = f.apply(y);
  std::reverse(y.begin(), y.end());
  return y;
}

inline constexpr int kDefaultFilterOrder = 5;

// One C x T filtered copy per band.
inline std::vector<MatD> decompose_bands(const RawRecording& rec, const std::vector<BandSpec>& bands,
                                         int order = kDefaultFilterOrder) {
  rec.validate();
  if (bands.empty()) throw ConfigError("decompose_bands: empty band list");
  std::vector<MatD> out;
  out.reserve(bands.size());
  for (const BandSpec& band : bands) {
    MatD filtered(rec.channels(), rec.samples());
    for (Eigen::Index c = 0; c < rec.channels(); ++c) {
      std::vector<double> row(rec.data.row(c).data(), rec.data.row(c).data() + rec.samples());
      auto y = butterworth_bandpass(row, band.low_hz, band.high_hz, order, rec.sample_rate_hz);
      filtered.row(c) = Eigen::Map<const Eigen::RowVectorXd>(y.data(), rec.samples());
    }
    out.push_back(std::move(filtered));
  }
  return out;
}

inline Eigen::Index window_length(double fs) { return static_cast<Eigen::Index>(std::llround(fs)); }

// floor(T / fs) non-overlapping C x fs segments; the tail is dropped.
inline std::vector<MatD> window_1s(const MatD& data, double fs) {
  const Eigen::Index len = window_length(fs);
  if (len < 1 || data.cols() < len)
    throw ConfigError("window_1s: " + std::to_string(data.cols()) + " samples < one window of " +
                      std::to_string(len));
  std::vector<MatD> out;
  for (Eigen::Index start = 0; start + len <= data.cols(); start += len)
    out.push_back(data.middleCols(start, len));
  return out;
}

inline std::vector<MatD> window_1s(const RawRecording& rec) {
  rec.validate();
  return window_1s(rec.data, rec.sample_rate_hz);
}

// Gaussian differential entropy 0.5 * ln(2*pi*e*var), unbiased variance.
inline double de_feature(std::span<const double> x) {
  if (x.size() < 2) throw ConfigError("de_feature: need at least 2 samples");
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  const double var = ss / static_cast<double>(x.size() - 1);
  if (!(var > 0.0)) throw NumericError("de_feature: zero variance (constant segment)");
  return 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * var);
}

// Filters the whole recording per band, then windows, so filter transients
// only affect the edges of the recording rather than every window.
inline std::vector<Sample> extract_features(const RawRecording& rec,
                                            const std::vector<BandSpec>& bands = default_bands(),
                                            int order = kDefaultFilterOrder) {
  const auto per_band = decompose_bands(rec, bands, order);
  const Eigen::Index len = window_length(rec.sample_rate_hz);
  const Eigen::Index count = rec.samples() / len;
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Eigen::Index w = 0; w < count; ++w) {
    Sample s;
    s.label = rec.label;
    s.subject_id = rec.subject_id;
    s.dataset_id = rec.dataset_id;
    s.features.resize(rec.channels(), static_cast<Eigen::Index>(bands.size()));
    for (std::size_t b = 0; b < bands.size(); ++b)
      for (Eigen::Index c = 0; c < rec.channels(); ++c) {
        const double* p = per_band[b].row(c).data() + w * len;
        s.features(c, static_cast<Eigen::Index>(b)) = de_feature({p, static_cast<std::size_t>(len)});
      }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Raw recording file:
//   E2STN1-RAW C=<int> T=<int> FS=<real>
//   label subject_id dataset_id
//   C lines of T values
// ---------------------------------------------------------------------------

inline void save_raw(const RawRecording& rec, const std::string& path) {
  rec.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out << "E2STN1-RAW C=" << rec.channels() << " T=" << rec.samples()
      << " FS=" << io::format_double(rec.sample_rate_hz) << '\n';
  out << rec.label << ' ' << rec.subject_id << ' ' << rec.dataset_id << '\n';
  for (Eigen::Index c = 0; c < rec.channels(); ++c) {
    for (Eigen::Index t = 0; t < rec.samples(); ++t)
      out << (t ? " " : "") << io::format_double(rec.data(c, t));
    out << '\n';
  }
}

inline RawRecording load_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty file");
  const auto kv = io::parse_header(line, "E2STN1-RAW");
  const long long C = io::header_int(kv, "C"), T = io::header_int(kv, "T");
  double fs = 0.0;
  if (auto it = kv.find("FS"); it == kv.end() || !io::parse_double(it->second, fs))
    throw FormatError(path + ": header: missing or bad FS");
  if (C < 1 || T < 1 || !(fs > 0.0)) throw FormatError(path + ": header: bad dimensions");
  RawRecording rec;
  rec.sample_rate_hz = fs;
  if (!std::getline(in, line)) throw FormatError(path + ": missing record line");
  auto toks = io::split_ws(line);
  long long label = 0, subject = 0;
  if (toks.size() != 3 || !io::parse_int(toks[0], label) || !io::parse_int(toks[1], subject))
    throw FormatError(path + ": expected 'label subject_id dataset_id'");
  rec.label = static_cast<int>(label);
  rec.subject_id = static_cast<int>(subject);
  rec.dataset_id = std::string(toks[2]);
  rec.data.resize(C, T);
  for (long long c = 0; c < C; ++c)
    io::read_row(in, static_cast<std::size_t>(T), rec.data.row(c).data(), path + ": channel " + std::to_string(c));
  return rec;
}

}  // namespace e2stn
