#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spikesleep/error.hpp"
#include "spikesleep/filterbank.hpp"
#include "spikesleep/signal_io.hpp"

namespace spikesleep {

enum class Polarity { Peak = 0, Trough = 1 };

inline const char* to_string(Polarity p) { return p == Polarity::Peak ? "peak" : "trough"; }

inline constexpr int kFeatureColumns = 2 * kNumBands;

// Column order is band-major, peak before trough.
inline constexpr int feature_column(BandId band, Polarity pol) {
  return 2 * static_cast<int>(band) + static_cast<int>(pol);
}

inline std::vector<std::string> feature_column_names() {
  std::vector<std::string> names;
  for (auto b : kAllBands)
    for (auto p : {Polarity::Peak, Polarity::Trough}) names.push_back(std::string(to_string(b)) + "_" + to_string(p));
  return names;
}

struct SpikeMask {
  BandId band = BandId::Delta;
  Polarity polarity = Polarity::Peak;
  std::vector<std::uint8_t> mask;

  std::size_t count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
};

struct SpikeTrain {
  BandId band = BandId::Delta;
  Polarity polarity = Polarity::Peak;
  std::vector<double> weighted;
};

struct HalfGaussianParams {
  double mu = 0.0;  // fixed location; carried for completeness
  double sigma = 0.5;
  int window_size = 125;
  bool normalize_to_unit_peak = true;
};

struct EncoderParams {
  HalfGaussianParams half_gaussian;
  int accumulation_width = kAccumulationWidth;
  double ablation_cutoff = 0.5;
};

inline void validate(const HalfGaussianParams& p) {
  if (!(p.sigma > 0.0) || !std::isfinite(p.sigma)) throw Error(ErrorKind::InvalidArgument, "sigma must be > 0");
  if (p.window_size <= 0) throw Error(ErrorKind::InvalidArgument, "window_size must be positive");
}

// T x 10 matrix of accumulated weighted spikes, stored row-major as float32.
struct FeatureEpoch {
  std::size_t rows = 0;
  std::vector<float> data;
  std::optional<Stage> stage;
  std::string subject_id;
  std::size_t epoch_index = 0;

  FeatureEpoch() = default;
  explicit FeatureEpoch(std::size_t t) : rows(t), data(t * kFeatureColumns, 0.0f) {}

  float& at(std::size_t row, int col) { return data[row * kFeatureColumns + static_cast<std::size_t>(col)]; }
  float at(std::size_t row, int col) const { return data[row * kFeatureColumns + static_cast<std::size_t>(col)]; }
  static constexpr int cols() { return kFeatureColumns; }
};

// Extrema by derivative sign change: d_i = x_{i+1} - x_i; i is a peak when
// d_{i-1} > 0 and d_i <= 0, a trough when d_{i-1} < 0 and d_i >= 0. A flat run
// entered without a strict slope produces no spike. Endpoints are never marked.
inline SpikeMask encode(std::span<const double> x, Polarity polarity, BandId band = BandId::Delta) {
  if (x.size() < 3) throw Error(ErrorKind::InvalidArgument, "encode needs at least 3 samples");
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i])) throw Error(ErrorKind::NonFinite, "encode input sample " + std::to_string(i));
  SpikeMask m{band, polarity, std::vector<std::uint8_t>(x.size(), 0)};
  for (std::size_t i = 1; i + 1 < x.size(); ++i) {
    const double before = x[i] - x[i - 1];
    const double after = x[i + 1] - x[i];
    const bool hit = polarity == Polarity::Peak ? (before > 0.0 && after <= 0.0) : (before < 0.0 && after >= 0.0);
    m.mask[i] = hit ? 1 : 0;
  }
  return m;
}

inline double half_gaussian(double z, const HalfGaussianParams& p = {}) {
  if (z < 0.0 || std::isnan(z)) throw Error(ErrorKind::InvalidArgument, "half_gaussian needs z >= 0");
  validate(p);
  const double q = -(z * z) / (2.0 * p.sigma * p.sigma);
  if (p.normalize_to_unit_peak) return std::exp(q);
  const double coef = std::numbers::sqrt2 / (p.sigma * std::sqrt(std::numbers::pi));
  // near underflow, scale inside exp so the subnormal result is rounded once
  if (q < -700.0) return std::exp(q + std::log(coef));
  return coef * std::exp(q);
}

namespace detail {

// |x| at marked indices divided by the window's largest marked |x|; windows
// of `window` samples, the last one possibly shorter.
inline std::vector<double> standardized_amplitudes(std::span<const double> x, const SpikeMask& m, int window) {
  std::vector<double> z(x.size(), 0.0);
  const auto w = static_cast<std::size_t>(window);
  for (std::size_t start = 0; start < x.size(); start += w) {
    const std::size_t stop = std::min(x.size(), start + w);
    double peak = 0.0;
    for (std::size_t i = start; i < stop; ++i)
      if (m.mask[i]) peak = std::max(peak, std::abs(x[i]));
    if (peak <= 0.0) continue;
    for (std::size_t i = start; i < stop; ++i)
      if (m.mask[i]) z[i] = std::abs(x[i]) / peak;
  }
  return z;
}

inline void check_lengths(std::span<const double> x, const SpikeMask& m) {
  if (x.size() != m.mask.size())
    throw Error(ErrorKind::LengthMismatch, "signal " + std::to_string(x.size()) + " vs mask " +
                                               std::to_string(m.mask.size()));
}

}  // namespace detail

// z' = f(z) * z over the standardized masked amplitudes.
inline SpikeTrain probabilitize(std::span<const double> x, const SpikeMask& mask, const HalfGaussianParams& p = {}) {
  detail::check_lengths(x, mask);
  validate(p);
  SpikeTrain t{mask.band, mask.polarity, detail::standardized_amplitudes(x, mask, p.window_size)};
  for (std::size_t i = 0; i < t.weighted.size(); ++i)
    if (mask.mask[i]) t.weighted[i] = half_gaussian(t.weighted[i], p) * t.weighted[i];
  return t;
}

// Hard gate used by the ablation arm: standardized amplitude survives
// unchanged when >= cutoff, else 0.
inline SpikeTrain threshold_gate(std::span<const double> x, const SpikeMask& mask, double cutoff, int window_size) {
  detail::check_lengths(x, mask);
  if (!(cutoff > 0.0 && cutoff <= 1.0)) throw Error(ErrorKind::InvalidArgument, "ablation cutoff must be in (0, 1]");
  if (window_size <= 0) throw Error(ErrorKind::InvalidArgument, "window_size must be positive");
  SpikeTrain t{mask.band, mask.polarity, detail::standardized_amplitudes(x, mask, window_size)};
  for (auto& v : t.weighted)
    if (v < cutoff) v = 0.0;
  return t;
}

// Sums over non-overlapping windows of `width`.
inline std::vector<double> accumulate(std::span<const double> train, int width = kAccumulationWidth) {
  if (width <= 0) throw Error(ErrorKind::InvalidArgument, "accumulation width must be positive");
  const auto w = static_cast<std::size_t>(width);
  if (train.size() % w != 0)
    throw Error(ErrorKind::LengthMismatch, "train length " + std::to_string(train.size()) +
                                               " not divisible by " + std::to_string(width));
  std::vector<double> a(train.size() / w, 0.0);
  for (std::size_t k = 0; k < a.size(); ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < w; ++j) s += train[k * w + j];
    a[k] = s;
  }
  return a;
}

inline std::vector<double> accumulate(const SpikeTrain& t, int width = kAccumulationWidth) {
  return accumulate(std::span<const double>(t.weighted), width);
}

enum class EncoderArm { HalfGaussian, Threshold };

inline const char* to_string(EncoderArm a) { return a == EncoderArm::HalfGaussian ? "half_gaussian" : "threshold"; }

namespace detail {

template <typename WeightFn>
FeatureEpoch build_features(const BandSet& bands, int width, WeightFn&& weigh) {
  const std::size_t n = bands.length();
  for (auto b : kAllBands)
    if (bands[b].size() != n) throw Error(ErrorKind::LengthMismatch, "band lengths differ");
  if (width <= 0 || n % static_cast<std::size_t>(width) != 0)
    throw Error(ErrorKind::LengthMismatch, "band length " + std::to_string(n) + " not divisible by " +
                                               std::to_string(width));
  FeatureEpoch fe(n / static_cast<std::size_t>(width));
  fe.stage = bands.stage;
  fe.subject_id = bands.subject_id;
  fe.epoch_index = bands.epoch_index;
  for (auto b : kAllBands) {
    const std::span<const double> x(bands[b]);
    for (auto pol : {Polarity::Peak, Polarity::Trough}) {
      const auto mask = encode(x, pol, b);
      const auto a = accumulate(std::span<const double>(weigh(x, mask).weighted), width);
      const int col = feature_column(b, pol);
      for (std::size_t r = 0; r < a.size(); ++r) fe.at(r, col) = static_cast<float>(a[r]);
    }
  }
  return fe;
}

}  // namespace detail

inline FeatureEpoch build_feature_epoch(const BandSet& bands, const HalfGaussianParams& p = {},
                                        int width = kAccumulationWidth) {
  validate(p);
  return detail::build_features(bands, width,
                                [&](std::span<const double> x, const SpikeMask& m) { return probabilitize(x, m, p); });
}

inline FeatureEpoch build_feature_epoch_threshold(const BandSet& bands, double cutoff, int window_size = 125,
                                                  int width = kAccumulationWidth) {
  if (!(cutoff > 0.0 && cutoff <= 1.0)) throw Error(ErrorKind::InvalidArgument, "ablation cutoff must be in (0, 1]");
  return detail::build_features(bands, width, [&](std::span<const double> x, const SpikeMask& m) {
    return threshold_gate(x, m, cutoff, window_size);
  });
}

inline FeatureEpoch build_feature_epoch(const BandSet& bands, const EncoderParams& p, EncoderArm arm) {
  return arm == EncoderArm::HalfGaussian
             ? build_feature_epoch(bands, p.half_gaussian, p.accumulation_width)
             : build_feature_epoch_threshold(bands, p.ablation_cutoff, p.half_gaussian.window_size,
                                             p.accumulation_width);
}

}  // namespace spikesleep
