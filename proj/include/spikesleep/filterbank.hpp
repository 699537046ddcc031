#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spikesleep/error.hpp"
#include "spikesleep/signal_io.hpp"

namespace spikesleep {

enum class BandId { Delta = 0, Theta = 1, Alpha = 2, Sigma = 3, Beta = 4 };
inline constexpr int kNumBands = 5;
inline constexpr std::array<BandId, kNumBands> kAllBands = {BandId::Delta, BandId::Theta, BandId::Alpha,
                                                            BandId::Sigma, BandId::Beta};

inline const char* to_string(BandId b) {
  switch (b) {
    case BandId::Delta: return "delta";
    case BandId::Theta: return "theta";
    case BandId::Alpha: return "alpha";
    case BandId::Sigma: return "sigma";
    case BandId::Beta: return "beta";
  }
  return "?";
}

struct BandEdges {
  double low_hz;
  double high_hz;
};

inline constexpr BandEdges nominal_edges(BandId b) {
  switch (b) {
    case BandId::Delta: return {0.0, 4.0};
    case BandId::Theta: return {4.0, 8.0};
    case BandId::Alpha: return {8.0, 12.0};
    case BandId::Sigma: return {12.0, 16.0};
    case BandId::Beta: return {16.0, 32.0};
  }
  return {0.0, 0.0};
}

enum class FilterKind { Bandpass, Lowpass };

struct FilterSpec {
  FilterKind kind = FilterKind::Bandpass;
  int order = 8;  // total order of the digital filter
  double low_hz = 0.5;
  double high_hz = 35.0;
  int sample_rate_hz = kDefaultSampleRate;
};

// b0 + b1 z^-1 + b2 z^-2 over 1 + a1 z^-1 + a2 z^-2
struct Biquad {
  double b0, b1, b2, a1, a2;

  std::complex<double> response(double freq_hz, double fs) const {
    const auto z1 = std::polar(1.0, -2.0 * std::numbers::pi * freq_hz / fs);
    const auto z2 = z1 * z1;
    return (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2);
  }

  std::array<std::complex<double>, 2> poles() const {
    const std::complex<double> disc = std::sqrt(std::complex<double>(a1 * a1 - 4.0 * a2));
    return {(-a1 + disc) / 2.0, (-a1 - disc) / 2.0};
  }
};

struct SosCascade {
  std::vector<Biquad> sections;
  int sample_rate_hz = kDefaultSampleRate;
  int order = 0;

  std::complex<double> response(double freq_hz) const {
    std::complex<double> h = 1.0;
    for (const auto& s : sections) h *= s.response(freq_hz, sample_rate_hz);
    return h;
  }

  double magnitude_db(double freq_hz) const { return 20.0 * std::log10(std::abs(response(freq_hz))); }

  bool stable() const {
    for (const auto& s : sections)
      for (const auto& p : s.poles())
        if (!(std::abs(p) < 1.0)) return false;
    return true;
  }
};

inline constexpr int kMaxFilterOrder = 24;

inline void validate(const FilterSpec& spec) {
  if (spec.sample_rate_hz <= 0) throw Error(ErrorKind::InvalidArgument, "sample rate must be positive");
  if (spec.order < 2 || spec.order % 2 != 0 || spec.order > kMaxFilterOrder)
    throw Error(ErrorKind::UnsupportedOrder, "order " + std::to_string(spec.order) + " (need even, 2.." +
                                                 std::to_string(kMaxFilterOrder) + ")");
  const double nyq = spec.sample_rate_hz / 2.0;
  const bool lowpass = spec.kind == FilterKind::Lowpass;
  if ((lowpass && spec.low_hz != 0.0) || (!lowpass && !(spec.low_hz > 0.0)) || !(spec.high_hz > spec.low_hz) ||
      !(spec.high_hz < nyq))
    throw Error(ErrorKind::InvalidEdges, "edges " + std::to_string(spec.low_hz) + "-" + std::to_string(spec.high_hz) +
                                             " Hz at " + std::to_string(spec.sample_rate_hz) + " Hz");
}

namespace detail {

// Left-half-plane poles of the normalized analog Butterworth prototype.
inline std::vector<std::complex<double>> butter_prototype(int n) {
  std::vector<std::complex<double>> p;
  for (int k = 0; k < n; ++k) p.push_back(std::polar(1.0, std::numbers::pi * (2.0 * k + 1.0 + n) / (2.0 * n)));
  return p;
}

inline std::complex<double> bilinear(std::complex<double> s, double fs) { return (2.0 * fs + s) / (2.0 * fs - s); }

inline double prewarp(double f, double fs) { return 2.0 * fs * std::tan(std::numbers::pi * f / fs); }

// Groups digital poles into conjugate pairs; real poles are paired with each other.
inline std::vector<std::array<double, 2>> pair_poles(const std::vector<std::complex<double>>& poles) {
  constexpr double eps = 1e-10;
  std::vector<std::array<double, 2>> out;  // {a1, a2}
  std::vector<double> reals;
  for (const auto& p : poles) {
    if (std::abs(p.imag()) <= eps * std::max(1.0, std::abs(p))) {
      reals.push_back(p.real());
    } else if (p.imag() > 0) {
      out.push_back({-2.0 * p.real(), std::norm(p)});
    }
  }
  for (std::size_t i = 0; i + 1 < reals.size(); i += 2) out.push_back({-(reals[i] + reals[i + 1]), reals[i] * reals[i + 1]});
  return out;
}

}  // namespace detail

// Butterworth design realized as second-order sections. `order` is the total
// digital order: a lowpass of order N has N/2 sections, a bandpass of order N
// comes from an N/2-order prototype and also has N/2 sections. Each section is
// normalized to unit gain at DC (lowpass) or at the geometric band centre.
inline SosCascade design_filter(const FilterSpec& spec) {
  validate(spec);
  const double fs = spec.sample_rate_hz;
  SosCascade out;
  out.sample_rate_hz = spec.sample_rate_hz;
  out.order = spec.order;

  std::vector<std::complex<double>> zpoles;
  double ref_hz = 0.0;
  std::array<double, 3> b_shape{};
  if (spec.kind == FilterKind::Lowpass) {
    const double wc = detail::prewarp(spec.high_hz, fs);
    for (const auto& p : detail::butter_prototype(spec.order)) zpoles.push_back(detail::bilinear(wc * p, fs));
    b_shape = {1.0, 2.0, 1.0};
  } else {
    const double w1 = detail::prewarp(spec.low_hz, fs);
    const double w2 = detail::prewarp(spec.high_hz, fs);
    const double w0 = std::sqrt(w1 * w2);
    const double bw = w2 - w1;
    for (const auto& p : detail::butter_prototype(spec.order / 2)) {
      const std::complex<double> half = p * bw / 2.0;
      const std::complex<double> root = std::sqrt(half * half - w0 * w0);
      zpoles.push_back(detail::bilinear(half + root, fs));
      zpoles.push_back(detail::bilinear(half - root, fs));
    }
    b_shape = {1.0, 0.0, -1.0};
    ref_hz = fs / std::numbers::pi * std::atan(w0 / (2.0 * fs));
  }

  for (const auto& a : detail::pair_poles(zpoles)) {
    Biquad q{b_shape[0], b_shape[1], b_shape[2], a[0], a[1]};
    const double g = 1.0 / std::abs(q.response(ref_hz, fs));
    q.b0 *= g;
    q.b1 *= g;
    q.b2 *= g;
    out.sections.push_back(q);
  }
  if (static_cast<int>(out.sections.size()) != spec.order / 2)
    throw Error(ErrorKind::UnsupportedOrder, "pole pairing failed for order " + std::to_string(spec.order));
  return out;
}

// One line per section: b0 b1 b2 a1 a2.
inline void dump_coefficients(const std::filesystem::path& path, const SosCascade& c) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out.precision(17);
  for (const auto& s : c.sections) out << s.b0 << ' ' << s.b1 << ' ' << s.b2 << ' ' << s.a1 << ' ' << s.a2 << '\n';
}

namespace detail {

// Transposed direct form II over the cascade, starting from state zi (2 per section).
inline void sosfilt_inplace(const SosCascade& c, std::vector<double>& x, std::vector<double> zi) {
  for (std::size_t k = 0; k < c.sections.size(); ++k) {
    const auto& s = c.sections[k];
    double z0 = zi[2 * k], z1 = zi[2 * k + 1];
    for (auto& v : x) {
      const double in = v;
      const double out = s.b0 * in + z0;
      z0 = s.b1 * in - s.a1 * out + z1;
      z1 = s.b2 * in - s.a2 * out;
      v = out;
    }
  }
}

// Steady-state state for a unit step input, section by section, scaled by the
// DC gain of the preceding sections.
inline std::vector<double> sos_step_state(const SosCascade& c) {
  std::vector<double> zi;
  double scale = 1.0;
  for (const auto& s : c.sections) {
    // (I - A^T) z = b[1:] - a[1:] * b0 with companion A^T = [[-a1, 1], [-a2, 0]]
    const double r0 = s.b1 - s.a1 * s.b0;
    const double r1 = s.b2 - s.a2 * s.b0;
    const double m00 = 1.0 + s.a1, m01 = -1.0, m10 = s.a2, m11 = 1.0;
    const double det = m00 * m11 - m01 * m10;
    zi.push_back(scale * (r0 * m11 - m01 * r1) / det);
    zi.push_back(scale * (m00 * r1 - m10 * r0) / det);
    scale *= (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
  }
  return zi;
}

}  // namespace detail

// Zero-phase forward-backward filtering with odd reflection of 3 * order
// samples at each edge and steady-state initial conditions.
inline std::vector<double> apply_filter(const SosCascade& cascade, std::span<const double> samples) {
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (!std::isfinite(samples[i])) throw Error(ErrorKind::NonFinite, "filter input sample " + std::to_string(i));
  const std::size_t n = samples.size();
  if (n == 0) return {};
  const std::size_t pad = std::min<std::size_t>(3 * static_cast<std::size_t>(cascade.order), n - 1);

  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t k = pad; k >= 1; --k) ext.push_back(2.0 * samples[0] - samples[k]);
  ext.insert(ext.end(), samples.begin(), samples.end());
  for (std::size_t k = 1; k <= pad; ++k) ext.push_back(2.0 * samples[n - 1] - samples[n - 1 - k]);

  const auto zi = detail::sos_step_state(cascade);
  auto scaled = [&](double x0) {
    auto z = zi;
    for (auto& v : z) v *= x0;
    return z;
  };
  detail::sosfilt_inplace(cascade, ext, scaled(ext.front()));
  std::reverse(ext.begin(), ext.end());
  detail::sosfilt_inplace(cascade, ext, scaled(ext.front()));
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(pad), ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

struct FilterBankConfig {
  int front_order = 8;
  double front_low_hz = 0.5;
  double front_high_hz = 35.0;
  int band_order = 8;
  double beta_high_hz = 32.0;
};

inline FilterSpec band_spec(BandId b, const FilterBankConfig& cfg, int sample_rate_hz) {
  const auto e = nominal_edges(b);
  if (b == BandId::Delta) return {FilterKind::Lowpass, cfg.band_order, 0.0, e.high_hz, sample_rate_hz};
  const double hi = b == BandId::Beta ? cfg.beta_high_hz : e.high_hz;
  return {FilterKind::Bandpass, cfg.band_order, e.low_hz, hi, sample_rate_hz};
}

inline FilterSpec front_spec(const FilterBankConfig& cfg, int sample_rate_hz) {
  return {FilterKind::Bandpass, cfg.front_order, cfg.front_low_hz, cfg.front_high_hz, sample_rate_hz};
}

struct BandSet {
  std::array<std::vector<double>, kNumBands> bands;
  std::size_t epoch_index = 0;
  std::string subject_id;
  std::optional<Stage> stage;

  const std::vector<double>& operator[](BandId b) const { return bands[static_cast<std::size_t>(b)]; }
  std::vector<double>& operator[](BandId b) { return bands[static_cast<std::size_t>(b)]; }
  std::size_t length() const { return bands[0].size(); }
};

// Designed once, reused for every epoch.
class FilterBank {
 public:
  explicit FilterBank(const FilterBankConfig& cfg = {}, int sample_rate_hz = kDefaultSampleRate)
      : front_(design_filter(front_spec(cfg, sample_rate_hz))) {
    for (auto b : kAllBands) bands_[static_cast<std::size_t>(b)] = design_filter(band_spec(b, cfg, sample_rate_hz));
  }

  const SosCascade& front() const { return front_; }
  const SosCascade& band(BandId b) const { return bands_[static_cast<std::size_t>(b)]; }

  BandSet decompose(std::span<const double> samples) const {
    BandSet out;
    const auto pre = apply_filter(front_, samples);
    for (auto b : kAllBands) out[b] = apply_filter(band(b), pre);
    return out;
  }

  BandSet decompose(const Epoch& epoch) const {
    BandSet out = decompose(std::span<const double>(epoch.samples()));
    out.epoch_index = epoch.epoch_index();
    out.subject_id = epoch.subject_id();
    out.stage = epoch.stage();
    return out;
  }

 private:
  SosCascade front_;
  std::array<SosCascade, kNumBands> bands_;
};

inline BandSet decompose(const Epoch& epoch, const FilterBankConfig& cfg = {}) {
  return FilterBank(cfg, epoch.sample_rate_hz()).decompose(epoch);
}

}  // namespace spikesleep
