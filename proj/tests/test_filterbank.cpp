#include <gtest/gtest.h>

#include <numeric>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace spikesleep;

namespace {

std::vector<double> sine(double f, std::size_t n, double fs = 125.0, double amp = 1.0) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(i) / fs);
  return x;
}

double rms(const std::vector<double>& x, std::size_t trim) {
  double s = 0.0;
  for (std::size_t i = trim; i + trim < x.size(); ++i) s += x[i] * x[i];
  return std::sqrt(s / static_cast<double>(x.size() - 2 * trim));
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Expanded numerator and denominator of the whole cascade.
std::pair<std::vector<double>, std::vector<double>> expand(const SosCascade& c) {
  std::vector<double> b{1.0}, a{1.0};
  for (const auto& s : c.sections) {
    b = oracle::polymul(b, {s.b0, s.b1, s.b2});
    a = oracle::polymul(a, {1.0, s.a1, s.a2});
  }
  return {b, a};
}

double oracle_mag(const SosCascade& c, double f) {
  const auto [b, a] = expand(c);
  return std::abs(oracle::polyval_zinv(b, f, c.sample_rate_hz) / oracle::polyval_zinv(a, f, c.sample_rate_hz));
}

}  // namespace

TEST(Filterbank, FrontBandpassStableAndFlatAt17Hz) {
  const auto c = design_filter({FilterKind::Bandpass, 8, 0.5, 35.0, 125});
  EXPECT_TRUE(c.stable());
  EXPECT_EQ(c.sections.size(), 4u);
  EXPECT_LE(std::abs(20.0 * std::log10(oracle_mag(c, 17.0))), 1.0);
}

TEST(Filterbank, DeltaLowpassAttenuation) {
  const auto c = design_filter({FilterKind::Lowpass, 8, 0.0, 4.0, 125});
  EXPECT_TRUE(c.stable());
  EXPECT_LE(20.0 * std::log10(oracle_mag(c, 8.0)), -40.0);
}

TEST(Filterbank, MatchesAnalogButterworthMagnitude) {
  const auto lp = design_filter({FilterKind::Lowpass, 8, 0.0, 4.0, 125});
  const auto bp = design_filter({FilterKind::Bandpass, 8, 8.0, 12.0, 125});
  for (double f = 0.25; f < 62.5; f += 0.25) {
    EXPECT_NEAR(std::abs(lp.response(f)), oracle::butter_lowpass_mag(f, 4.0, 125.0, 8), 1e-9) << f;
    EXPECT_NEAR(std::abs(bp.response(f)), oracle::butter_bandpass_mag(f, 8.0, 12.0, 125.0, 4), 1e-9) << f;
    EXPECT_NEAR(std::abs(bp.response(f)), oracle_mag(bp, f), 1e-9) << f;
  }
}

TEST(Filterbank, InvalidSpecs) {
  try {
    design_filter({FilterKind::Bandpass, 8, 0.5, 70.0, 125});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidEdges);
  }
  try {
    design_filter({FilterKind::Bandpass, 7, 0.5, 35.0, 125});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnsupportedOrder);
  }
  EXPECT_THROW(design_filter({FilterKind::Bandpass, 8, 12.0, 8.0, 125}), Error);
}

TEST(Filterbank, ZeroInZeroOut) {
  const FilterBank fb;
  const std::vector<double> z(3750, 0.0);
  for (auto b : kAllBands) {
    const auto y = apply_filter(fb.band(b), z);
    EXPECT_TRUE(std::all_of(y.begin(), y.end(), [](double v) { return v == 0.0; }));
  }
}

TEST(Filterbank, SineThroughAlphaAndDelta) {
  const FilterBank fb;
  const auto x = sine(10.0, 3750);
  const double in = rms(x, 250);
  EXPECT_GE(rms(apply_filter(fb.band(BandId::Alpha), x), 250), 0.9 * in);
  EXPECT_LE(rms(apply_filter(fb.band(BandId::Delta), x), 250), 0.05 * in);
}

TEST(Filterbank, ZeroPhase) {
  const FilterBank fb;
  const auto x = sine(10.0, 3750);
  const auto y = apply_filter(fb.band(BandId::Alpha), x);
  // cross-correlation peaks at lag 0
  auto xcorr = [&](int lag) {
    double s = 0.0;
    for (int i = 300; i < 3450; ++i) s += x[i] * y[i + lag];
    return s;
  };
  const double c0 = xcorr(0);
  for (int lag = -6; lag <= 6; ++lag)
    if (lag != 0) EXPECT_GT(c0, xcorr(lag)) << lag;
}

TEST(Filterbank, Linearity) {
  const FilterBank fb;
  std::mt19937_64 rng(5);
  const auto a = testutil::random_signal(rng, 1000);
  const auto b = testutil::random_signal(rng, 1000);
  std::vector<double> mix(1000);
  for (int i = 0; i < 1000; ++i) mix[i] = 2.0 * a[i] - 0.5 * b[i];
  const auto ya = apply_filter(fb.band(BandId::Theta), a);
  const auto yb = apply_filter(fb.band(BandId::Theta), b);
  const auto ym = apply_filter(fb.band(BandId::Theta), mix);
  for (int i = 0; i < 1000; ++i) EXPECT_NEAR(ym[i], 2.0 * ya[i] - 0.5 * yb[i], 1e-9);
}

TEST(Filterbank, DecomposeShapesAndZeroEpoch) {
  const Epoch e(std::vector<double>(3750, 0.0), 125, Stage::N2, 3, "s1");
  const auto bs = decompose(e);
  std::size_t total = 0;
  for (auto b : kAllBands) {
    total += bs[b].size();
    EXPECT_TRUE(std::all_of(bs[b].begin(), bs[b].end(), [](double v) { return v == 0.0; }));
  }
  EXPECT_EQ(total, 5u * 3750u);
  EXPECT_EQ(bs.epoch_index, 3u);
  EXPECT_EQ(bs.subject_id, "s1");
  EXPECT_EQ(bs.stage, Stage::N2);
}

TEST(Filterbank, DecomposeSeparatesComponents) {
  const auto slow = sine(2.0, 3750, 125.0, 40.0);
  const auto fast = sine(20.0, 3750, 125.0, 20.0);
  std::vector<double> mix(3750);
  for (int i = 0; i < 3750; ++i) mix[i] = slow[i] + fast[i];
  const auto bs = FilterBank().decompose(std::span<const double>(mix));
  EXPECT_GT(pearson(bs[BandId::Delta], slow), 0.95);
  EXPECT_GT(pearson(bs[BandId::Beta], fast), 0.95);
}

TEST(Filterbank, NonFiniteInputRejected) {
  std::vector<double> x(100, 0.0);
  x[50] = std::nan("");
  EXPECT_THROW(apply_filter(FilterBank().front(), x), Error);
}
