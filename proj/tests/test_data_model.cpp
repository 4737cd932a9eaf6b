#include "e2stn/data_model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

using namespace e2stn;

namespace {

std::string serialize(const Dataset& ds) {
  std::ostringstream out;
  write_dataset(out, ds);
  return out.str();
}

Dataset parse(const std::string& text) {
  std::istringstream in(text);
  return read_dataset(in);
}

// Per-(class, channel) mean of target minus source, with its standard error.
struct MeanDiff {
  double diff, se;
};

MeanDiff mean_difference(const Dataset& a, const Dataset& b, int label, int c, int band) {
  auto stats = [&](const Dataset& d) {
    double s = 0, ss = 0;
    int n = 0;
    for (const auto& x : d.samples)
      if (x.label == label) {
        const double v = x.features(c, band);
        s += v;
        ss += v * v;
        ++n;
      }
    const double mean = s / n;
    return std::tuple{mean, (ss / n - mean * mean) / n};
  };
  auto [ma, va] = stats(a);
  auto [mb, vb] = stats(b);
  return {mb - ma, std::sqrt(va + vb)};
}

}  // namespace

TEST(SyntheticPair, ZeroShiftGivesMatchingClassMeans) {
  SynthShiftConfig cfg;
  cfg.samples_per_class_per_subject = 200;
  cfg.domain_shift_scale = 1.0;
  cfg.domain_shift_offset = 0.0;
  cfg.seed = 11;
  const auto pair = generate_synthetic_pair(cfg);
  int outside = 0, total = 0;
  for (int p = 0; p < cfg.classes; ++p)
    for (int c = 0; c < cfg.channels; ++c)
      for (int b = 0; b < cfg.bands; ++b) {
        const auto d = mean_difference(pair.source, pair.target, p, c, b);
        outside += std::abs(d.diff) > 3.0 * d.se;
        ++total;
      }
  // 3-sigma band: expect ~0.3% of cells outside by chance.
  EXPECT_LE(outside, total / 50);
}

TEST(SyntheticPair, OffsetMovesChannelMeans) {
  SynthShiftConfig cfg;
  cfg.samples_per_class_per_subject = 400;
  cfg.subjects_per_dataset = 1;
  cfg.domain_shift_offset = 5.0;
  cfg.seed = 3;
  const auto pair = generate_synthetic_pair(cfg);
  ASSERT_GE(pair.source.size(), 1000u);
  for (int c = 0; c < cfg.channels; ++c) {
    double s = 0, t = 0, ss = 0, tt = 0;
    for (const auto& x : pair.source.samples) {
      s += x.features.row(c).mean();
      ss += std::pow(x.features.row(c).mean(), 2);
    }
    for (const auto& x : pair.target.samples) {
      t += x.features.row(c).mean();
      tt += std::pow(x.features.row(c).mean(), 2);
    }
    const double n = static_cast<double>(pair.source.size());
    const double ms = s / n, mt = t / n;
    const double se = std::sqrt((ss / n - ms * ms) / n + (tt / n - mt * mt) / n);
    EXPECT_NEAR(mt - ms, 5.0, 3.0 * se) << "channel " << c;
  }
}

TEST(SyntheticPair, VarianceRatioApproachesScaleSquared) {
  SynthShiftConfig cfg;
  cfg.classes = 2;
  cfg.samples_per_class_per_subject = 1500;
  cfg.subjects_per_dataset = 2;
  cfg.domain_shift_scale = 1.5;
  cfg.seed = 5;
  const auto pair = generate_synthetic_pair(cfg);
  ASSERT_GE(pair.target.size(), 5000u);
  for (int b = 0; b < cfg.bands; ++b) {
    auto var = [&](const Dataset& d) {
      double s = 0, ss = 0, n = 0;
      for (const auto& x : d.samples)
        for (int c = 0; c < cfg.channels; ++c) {
          s += x.features(c, b);
          ss += x.features(c, b) * x.features(c, b);
          ++n;
        }
      return ss / n - (s / n) * (s / n);
    };
    const double ratio = var(pair.target) / var(pair.source);
    EXPECT_NEAR(ratio, 2.25, 0.225) << "band " << b;
  }
}

TEST(SyntheticPair, DeterministicInSeed) {
  SynthShiftConfig cfg;
  cfg.seed = 42;
  const auto a = generate_synthetic_pair(cfg), b = generate_synthetic_pair(cfg);
  EXPECT_EQ(serialize(a.source), serialize(b.source));
  EXPECT_EQ(serialize(a.target), serialize(b.target));
  cfg.seed = 43;
  EXPECT_NE(serialize(generate_synthetic_pair(cfg).source), serialize(a.source));
}

TEST(SyntheticPair, DifferentConfigsGiveDifferentBytes) {
  SynthShiftConfig a, b;
  b.domain_shift_offset = 0.5;
  EXPECT_EQ(serialize(generate_synthetic_pair(a).source), serialize(generate_synthetic_pair(b).source));
  EXPECT_NE(serialize(generate_synthetic_pair(a).target), serialize(generate_synthetic_pair(b).target));
}

TEST(SyntheticPair, RolesShapesAndLabels) {
  SynthShiftConfig cfg;
  cfg.channels = 4;
  cfg.bands = 3;
  cfg.classes = 4;
  const auto pair = generate_synthetic_pair(cfg);
  EXPECT_EQ(pair.source.role, DatasetRole::source);
  EXPECT_EQ(pair.target.role, DatasetRole::target);
  EXPECT_EQ(pair.source.size(), 4u * 20u * 3u);
  EXPECT_EQ(pair.source.class_names, (std::vector<std::string>{"neutral", "happy", "sad", "fear"}));
  EXPECT_NO_THROW(validate(pair.source));
  EXPECT_NO_THROW(validate(pair.target));
}

TEST(SyntheticPair, InvalidConfigRejected) {
  SynthShiftConfig cfg;
  cfg.noise_std = 0.0;
  EXPECT_THROW(generate_synthetic_pair(cfg), ConfigError);
  cfg = {};
  cfg.samples_per_class_per_subject = 0;
  EXPECT_THROW(generate_synthetic_pair(cfg), ConfigError);
  cfg = {};
  cfg.domain_shift_scale = -1.0;
  EXPECT_THROW(generate_synthetic_pair(cfg), ConfigError);
}

TEST(DatasetFile, RoundTripIsBitExact) {
  SynthShiftConfig cfg;
  cfg.domain_shift_scale = 1.37;
  cfg.domain_shift_offset = -0.1;
  const auto pair = generate_synthetic_pair(cfg);
  const auto path = std::filesystem::temp_directory_path() / "e2stn_roundtrip.ds";
  save_dataset(pair.target, path.string());
  const Dataset back = load_dataset(path.string());
  EXPECT_TRUE(back == pair.target);
  ASSERT_EQ(back.samples.size(), pair.target.samples.size());
  for (std::size_t i = 0; i < back.samples.size(); ++i)
    for (Eigen::Index k = 0; k < back.samples[i].features.size(); ++k)
      ASSERT_EQ(back.samples[i].features.data()[k], pair.target.samples[i].features.data()[k]);
  std::filesystem::remove(path);
}

TEST(DatasetFile, RoundTripOfAwkwardValues) {
  Dataset ds;
  ds.channel_count = 2;
  ds.band_count = 2;
  ds.class_names = {"a", "b"};
  MatD x(2, 2);
  x << 1e-300, -0.1, 123456789.123456789, 5e-324;
  ds.samples.push_back({x, 1, 7, "odd-set"});
  EXPECT_TRUE(parse(serialize(ds)) == ds);
}

TEST(DatasetFile, ShortRowIsFormatErrorNamingRecord) {
  std::ostringstream text;
  text << "E2STN1 C=3 B=2 P=2 N=2\n0 0 ds\n1 2\n3 4\n5 6\n1 0 ds\n1 2\n3\n5 6\n";
  try {
    parse(text.str());
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("record 1"), std::string::npos) << e.what();
  }
}

TEST(DatasetFile, RowOf61ValuesUnderC62Header) {
  std::ostringstream text;
  text << "E2STN1 C=62 B=5 P=3 N=1\n0 0 ds\n";
  for (int c = 0; c < 62; ++c) {
    const int n = c == 10 ? 4 : 5;
    for (int b = 0; b < n; ++b) text << (b ? " " : "") << 0.5;
    text << '\n';
  }
  EXPECT_THROW(parse(text.str()), FormatError);
}

TEST(DatasetFile, MalformedInputs) {
  EXPECT_THROW(parse(""), FormatError);
  EXPECT_THROW(parse("E2STN2 C=1 B=1 P=2 N=0\n"), FormatError);
  EXPECT_THROW(parse("E2STN1 C=1 B=1 P=2\n"), FormatError);
  EXPECT_THROW(parse("E2STN1 C=1 B=1 P=2 N=1\n0 0 ds\nnan\n"), FormatError);
  EXPECT_THROW(parse("E2STN1 C=1 B=1 P=2 N=1\n0 0 ds\ninf\n"), FormatError);
  EXPECT_THROW(parse("E2STN1 C=1 B=1 P=2 N=1\n5 0 ds\n1.0\n"), FormatError);
  EXPECT_THROW(parse("E2STN1 C=1 B=1 P=2 N=2\n0 0 ds\n1.0\n"), FormatError);
  EXPECT_THROW(parse("E2STN1 C=1 B=1 P=2 N=1\n0 0 ds\n1.0x\n"), FormatError);
}

TEST(DatasetFile, EmptySampleListIsValid) {
  Dataset ds;
  ds.channel_count = 62;
  ds.band_count = 5;
  ds.class_names = default_class_names(3);
  const Dataset back = parse(serialize(ds));
  EXPECT_TRUE(back.samples.empty());
  EXPECT_EQ(back.channel_count, 62);
  EXPECT_EQ(back.band_count, 5);
  EXPECT_EQ(back.class_count(), 3);
  EXPECT_TRUE(back == ds);
}

TEST(DatasetFile, LoadErrorMentionsPath) {
  try {
    load_dataset("/nonexistent/dir/file.ds");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/file.ds"), std::string::npos);
  }
}

TEST(Dataset, ValidateCatchesBadSamples) {
  Dataset ds;
  ds.channel_count = 2;
  ds.band_count = 2;
  ds.class_names = {"a", "b"};
  ds.samples.push_back({MatD::Zero(2, 3), 0, 0, "x"});
  EXPECT_THROW(validate(ds), DimensionError);
  ds.samples[0].features = MatD::Zero(2, 2);
  ds.samples[0].label = 2;
  EXPECT_THROW(validate(ds), ConfigError);
  ds.samples[0].label = 1;
  ds.samples[0].features(0, 0) = std::nan("");
  EXPECT_THROW(validate(ds), NumericError);
}

TEST(Dataset, PerSubjectNormalizationZScoresEachSubject) {
  SynthShiftConfig cfg;
  cfg.domain_shift_scale = 2.0;
  cfg.domain_shift_offset = 3.0;
  const Dataset ds = normalize_per_subject(generate_synthetic_pair(cfg).target);
  for (int s = 0; s < cfg.subjects_per_dataset; ++s) {
    MatD sum = MatD::Zero(cfg.channels, cfg.bands), sq = MatD::Zero(cfg.channels, cfg.bands);
    int n = 0;
    for (const auto& x : ds.samples)
      if (x.subject_id == s) {
        sum += x.features;
        sq += x.features.cwiseAbs2();
        ++n;
      }
    EXPECT_LT((sum / n).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT(((sq / n).array() - 1.0).abs().maxCoeff(), 0.1);
  }
}
