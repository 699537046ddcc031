#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace spikesleep;

namespace {

BandSet zero_bands(std::size_t n = 3750) {
  BandSet b;
  for (auto id : kAllBands) b[id].assign(n, 0.0);
  return b;
}

std::vector<std::uint8_t> mask_of(const std::vector<double>& x, Polarity p) {
  return encode(std::span<const double>(x), p).mask;
}

}  // namespace

TEST(SpikeEncoder, SmallExample) {
  const std::vector<double> x{0, 1, 0, -1, 0};
  EXPECT_EQ(mask_of(x, Polarity::Peak), (std::vector<std::uint8_t>{0, 1, 0, 0, 0}));
  EXPECT_EQ(mask_of(x, Polarity::Trough), (std::vector<std::uint8_t>{0, 0, 0, 1, 0}));
}

TEST(SpikeEncoder, MonotoneAndConstantGiveNothing) {
  std::vector<double> up(50), flat(50, 3.0);
  for (int i = 0; i < 50; ++i) up[i] = i;
  for (auto p : {Polarity::Peak, Polarity::Trough}) {
    const auto a = mask_of(up, p), b = mask_of(flat, p);
    EXPECT_EQ(std::count(a.begin(), a.end(), 1), 0);
    EXPECT_EQ(std::count(b.begin(), b.end(), 1), 0);
  }
}

TEST(SpikeEncoder, PlateauMarksFirstSampleOnly) {
  const std::vector<double> x{0, 2, 2, 2, 0};
  EXPECT_EQ(mask_of(x, Polarity::Peak), (std::vector<std::uint8_t>{0, 1, 0, 0, 0}));
}

TEST(SpikeEncoder, MatchesOracleOnRandomSignals) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = testutil::random_signal(rng, 500);
    EXPECT_EQ(mask_of(x, Polarity::Peak), oracle::peaks(x));
    EXPECT_EQ(mask_of(x, Polarity::Trough), oracle::troughs(x));
  }
}

TEST(SpikeEncoder, HalfGaussianValues) {
  HalfGaussianParams p;
  EXPECT_DOUBLE_EQ(half_gaussian(0.0, p), 1.0);
  EXPECT_NEAR(half_gaussian(0.5, p), 0.6065306597126334, 1e-15);
  p.normalize_to_unit_peak = false;
  EXPECT_NEAR(half_gaussian(0.0, p), 1.5957691216057308, 1e-15);
  EXPECT_THROW(half_gaussian(-0.1), Error);
}

TEST(SpikeEncoder, ZeroMaskGivesZeroTrain) {
  const std::vector<double> x(100, 1.0);
  SpikeMask m{BandId::Alpha, Polarity::Peak, std::vector<std::uint8_t>(100, 0)};
  const auto t = probabilitize(x, m);
  EXPECT_TRUE(std::all_of(t.weighted.begin(), t.weighted.end(), [](double v) { return v == 0.0; }));
}

TEST(SpikeEncoder, SingleSpikeWeight) {
  std::vector<double> x(125, 0.0);
  x[60] = 3.0;
  const auto t = probabilitize(x, encode(std::span<const double>(x), Polarity::Peak));
  EXPECT_NEAR(t.weighted[60], std::exp(-2.0), 1e-15);
  EXPECT_EQ(std::count_if(t.weighted.begin(), t.weighted.end(), [](double v) { return v != 0.0; }), 1);
}

TEST(SpikeEncoder, TwoSpikesOrderReversal) {
  std::vector<double> x(125, 0.0);
  x[20] = 1.0;
  x[80] = 2.0;
  const auto t = probabilitize(x, encode(std::span<const double>(x), Polarity::Peak));
  const double w_small = static_cast<double>(oracle::half_gaussian(0.5L, 0.5L, true) * 0.5L);
  const double w_big = static_cast<double>(oracle::half_gaussian(1.0L, 0.5L, true) * 1.0L);
  EXPECT_NEAR(t.weighted[20], w_small, 1e-15);
  EXPECT_NEAR(t.weighted[80], w_big, 1e-15);
  EXPECT_GT(t.weighted[20], t.weighted[80]);
}

TEST(SpikeEncoder, AccumulateExamples) {
  const auto a = accumulate(std::vector<double>(50, 0.1));
  EXPECT_NEAR(a[0], 2.5, 1e-12);
  EXPECT_NEAR(a[1], 2.5, 1e-12);
  const auto z = accumulate(std::vector<double>(3750, 0.0));
  EXPECT_EQ(z.size(), 150u);
  EXPECT_TRUE(std::all_of(z.begin(), z.end(), [](double v) { return v == 0.0; }));
  EXPECT_THROW(accumulate(std::vector<double>(51, 0.0)), Error);
}

TEST(SpikeEncoder, FeatureEpochShape) {
  const auto fe = build_feature_epoch(zero_bands());
  EXPECT_EQ(fe.rows, 150u);
  EXPECT_EQ(fe.data.size(), 1500u);
  EXPECT_TRUE(std::all_of(fe.data.begin(), fe.data.end(), [](float v) { return v == 0.0f; }));
  const auto bands = testutil::synthetic_bands(1, 1, 3);
  const auto fe2 = build_feature_epoch(bands[0]);
  EXPECT_EQ(fe2.rows, 150u);
  EXPECT_EQ(fe2.stage, bands[0].stage);
}

TEST(SpikeEncoder, PulseLandsInRows40To41) {
  auto b = zero_bands();
  for (int i = 1000; i <= 1010; ++i) b[BandId::Delta][i] = 5.0 - std::abs(i - 1005);
  const auto fe = build_feature_epoch(b);
  const int col = feature_column(BandId::Delta, Polarity::Peak);
  bool any = false;
  for (std::size_t r = 0; r < fe.rows; ++r)
    for (int c = 0; c < kFeatureColumns; ++c)
      if (fe.at(r, c) != 0.0f) {
        EXPECT_EQ(c, col);
        EXPECT_TRUE(r == 40 || r == 41) << r;
        any = true;
      }
  EXPECT_TRUE(any);
}

TEST(SpikeEncoder, ThresholdGateLimits) {
  std::mt19937_64 rng(9);
  const auto x = testutil::random_signal(rng, 500);
  const auto m = encode(std::span<const double>(x), Polarity::Peak);
  const auto top = threshold_gate(x, m, 1.0, 125);
  for (std::size_t w = 0; w < 500; w += 125) {
    double best = 0.0;
    for (std::size_t i = w; i < w + 125; ++i)
      if (m.mask[i]) best = std::max(best, std::abs(x[i]));
    for (std::size_t i = w; i < w + 125; ++i) {
      const bool is_max = m.mask[i] && std::abs(x[i]) == best;
      EXPECT_EQ(top.weighted[i] != 0.0, is_max) << i;
    }
  }
  const auto all = threshold_gate(x, m, 1e-300, 125);
  for (std::size_t i = 0; i < 500; ++i) {
    EXPECT_EQ(all.weighted[i] != 0.0, m.mask[i] == 1);
  }
}

TEST(SpikeEncoder, ThresholdSupportWithinHalfGaussianSupport) {
  for (const auto& bands : testutil::synthetic_bands(1, 1, 21)) {
    const auto hg = build_feature_epoch(bands);
    const auto th = build_feature_epoch_threshold(bands, 0.5);
    for (std::size_t i = 0; i < hg.data.size(); ++i)
      if (th.data[i] != 0.0f) EXPECT_NE(hg.data[i], 0.0f) << i;
  }
}

TEST(SpikeEncoder, ColumnNames) {
  const auto names = feature_column_names();
  ASSERT_EQ(names.size(), 10u);
  EXPECT_EQ(names[0], "delta_peak");
  EXPECT_EQ(names[9], "beta_trough");
}

TEST(SpikeEncoder, FeatureFileRoundTrip) {
  testutil::TempDir dir("feat");
  const auto bands = testutil::synthetic_bands(1, 1, 4);
  const auto fe = build_feature_epoch(bands[2]);
  const auto params = encoder_params_json({}, EncoderArm::HalfGaussian);
  save_features(dir / "x", fe, params);
  const auto back = load_features(dir / "x");
  EXPECT_EQ(back.features.data, fe.data);
  EXPECT_EQ(back.features.stage, fe.stage);
  EXPECT_EQ(back.params, params);
}

TEST(SpikeEncoder, CorruptFeatureFile) {
  testutil::TempDir dir("featbad");
  const auto fe = build_feature_epoch(zero_bands());
  save_features(dir / "x", fe, encoder_params_json({}, EncoderArm::Threshold));
  std::filesystem::resize_file(dir / "x.f32", 100);
  EXPECT_THROW(load_features(dir / "x"), Error);
}
