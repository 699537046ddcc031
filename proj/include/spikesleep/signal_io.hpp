#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spikesleep/error.hpp"

namespace spikesleep {

inline constexpr int kDefaultSampleRate = 125;
inline constexpr int kEpochSeconds = 30;
inline constexpr int kAccumulationWidth = 25;

enum class Stage { Wake = 0, N1 = 1, N2 = 2, N3 = 3, REM = 4 };
inline constexpr int kNumStages = 5;
inline constexpr std::array<Stage, kNumStages> kAllStages = {Stage::Wake, Stage::N1, Stage::N2,
                                                             Stage::N3, Stage::REM};

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::Wake: return "Wake";
    case Stage::N1: return "N1";
    case Stage::N2: return "N2";
    case Stage::N3: return "N3";
    case Stage::REM: return "REM";
  }
  return "?";
}

inline int stage_index(Stage s) { return static_cast<int>(s); }

inline Stage stage_from_index(int i) {
  if (i < 0 || i >= kNumStages) throw Error(ErrorKind::InvalidArgument, "stage index " + std::to_string(i));
  return static_cast<Stage>(i);
}

namespace detail {

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n\v\f");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n\v\f");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace detail

// Maps an annotation token to a stage. Legacy S3 and S4 both become N3; the
// AASM names are accepted too so the remap is idempotent. Returns nullopt for
// the UNSCORED token and throws for anything else.
inline std::optional<Stage> parse_stage_label(std::string_view token) {
  const std::string t = detail::upper(detail::trim(token));
  if (t == "W" || t == "WAKE") return Stage::Wake;
  if (t == "S1" || t == "N1") return Stage::N1;
  if (t == "S2" || t == "N2") return Stage::N2;
  if (t == "S3" || t == "S4" || t == "N3") return Stage::N3;
  if (t == "REM" || t == "R") return Stage::REM;
  if (t == "UNSCORED") return std::nullopt;
  throw Error(ErrorKind::UnrecognizedLabel, "annotation token '" + std::string(token) + "'");
}

struct RawRecord {
  std::vector<double> samples;
  int sample_rate_hz = kDefaultSampleRate;
  std::string channel_name;
  std::string subject_id;
};

inline void validate(const RawRecord& r) {
  if (r.sample_rate_hz <= 0) throw Error(ErrorKind::InvalidArgument, "sample rate must be positive");
  if (r.samples.empty()) throw Error(ErrorKind::EmptyInput, "record '" + r.subject_id + "' has no samples");
  for (std::size_t i = 0; i < r.samples.size(); ++i)
    if (!std::isfinite(r.samples[i]))
      throw Error(ErrorKind::NonFinite, "record '" + r.subject_id + "' sample " + std::to_string(i));
}

// One 30 s window. Length is checked at construction: exactly 30 * rate and a
// multiple of the accumulation width.
class Epoch {
 public:
  Epoch(std::vector<double> samples, int sample_rate_hz, std::optional<Stage> stage,
        std::size_t epoch_index, std::string subject_id)
      : samples_(std::move(samples)),
        sample_rate_hz_(sample_rate_hz),
        stage_(stage),
        epoch_index_(epoch_index),
        subject_id_(std::move(subject_id)) {
    if (sample_rate_hz_ <= 0) throw Error(ErrorKind::InvalidArgument, "sample rate must be positive");
    const auto expected = static_cast<std::size_t>(kEpochSeconds) * static_cast<std::size_t>(sample_rate_hz_);
    if (samples_.size() != expected)
      throw Error(ErrorKind::LengthMismatch, "epoch length " + std::to_string(samples_.size()) +
                                                 " != " + std::to_string(expected));
    if (samples_.size() % kAccumulationWidth != 0)
      throw Error(ErrorKind::LengthMismatch, "epoch length " + std::to_string(samples_.size()) +
                                                 " is not a multiple of " + std::to_string(kAccumulationWidth));
  }

  const std::vector<double>& samples() const { return samples_; }
  int sample_rate_hz() const { return sample_rate_hz_; }
  std::optional<Stage> stage() const { return stage_; }
  std::size_t epoch_index() const { return epoch_index_; }
  const std::string& subject_id() const { return subject_id_; }

 private:
  std::vector<double> samples_;
  int sample_rate_hz_;
  std::optional<Stage> stage_;
  std::size_t epoch_index_;
  std::string subject_id_;
};

// ---------------------------------------------------------------------------
// Ingestion

enum class RecordFormat { Edf, Csv };

struct IngestOptions {
  int expected_rate_hz = kDefaultSampleRate;
  bool allow_resample = false;
  // CSV carries no rate of its own.
  int csv_rate_hz = kDefaultSampleRate;
};

// Linear-interpolation resampler. Output length is floor((n - 1) * to / from) + 1.
inline std::vector<double> resample_linear(const std::vector<double>& x, int from_hz, int to_hz) {
  if (from_hz <= 0 || to_hz <= 0) throw Error(ErrorKind::InvalidArgument, "resample rates must be positive");
  if (x.empty() || from_hz == to_hz) return x;
  const std::size_t n_out = static_cast<std::size_t>((x.size() - 1) * static_cast<std::size_t>(to_hz) /
                                                     static_cast<std::size_t>(from_hz)) + 1;
  std::vector<double> y(n_out);
  const double step = static_cast<double>(from_hz) / to_hz;
  for (std::size_t i = 0; i < n_out; ++i) {
    const double t = static_cast<double>(i) * step;
    const auto k = std::min(static_cast<std::size_t>(t), x.size() - 1);
    const double frac = t - static_cast<double>(k);
    y[i] = (k + 1 < x.size()) ? x[k] + frac * (x[k + 1] - x[k]) : x[k];
  }
  return y;
}

namespace detail {

inline std::string field(const std::string& header, std::size_t offset, std::size_t len) {
  return trim(std::string_view(header).substr(offset, len));
}

inline long parse_long_field(const std::string& s, const char* what) {
  try {
    std::size_t pos = 0;
    long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::MalformedHeader, std::string("EDF field '") + what + "' = '" + s + "'");
  }
}

inline double parse_double_field(const std::string& s, const char* what) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::MalformedHeader, std::string("EDF field '") + what + "' = '" + s + "'");
  }
}

inline RawRecord finish_rate(RawRecord r, int native_rate, const IngestOptions& opt) {
  if (native_rate != opt.expected_rate_hz) {
    if (!opt.allow_resample)
      throw Error(ErrorKind::RateMismatch, "record rate " + std::to_string(native_rate) + " Hz, expected " +
                                               std::to_string(opt.expected_rate_hz) + " Hz");
    r.samples = resample_linear(r.samples, native_rate, opt.expected_rate_hz);
  }
  r.sample_rate_hz = opt.expected_rate_hz;
  validate(r);
  return r;
}

inline std::string subject_from_path(const std::filesystem::path& p) { return p.stem().string(); }

}  // namespace detail

struct EdfSignal {
  std::string label;
  std::vector<double> samples;  // physical units
  int sample_rate_hz = kDefaultSampleRate;
  double physical_min = -500.0;
  double physical_max = 500.0;
};

// Writes a plain EDF (not EDF+) file with one-second data records. Used for
// fixtures and interchange; samples are quantized to 16 bits.
inline void write_edf(const std::filesystem::path& path, const std::vector<EdfSignal>& signals) {
  if (signals.empty()) throw Error(ErrorKind::EmptyInput, "EDF needs at least one signal");
  std::size_t n_records = 0;
  for (const auto& s : signals) {
    if (s.sample_rate_hz <= 0) throw Error(ErrorKind::InvalidArgument, "EDF signal rate must be positive");
    n_records = std::max(n_records, (s.samples.size() + s.sample_rate_hz - 1) / s.sample_rate_hz);
  }
  auto pad = [](std::string s, std::size_t n) {
    s.resize(n, ' ');
    return s;
  };
  const std::size_t ns = signals.size();
  std::string h;
  h += pad("0", 8);
  h += pad("X X X X", 80);
  h += pad("Startdate X X X X", 80);
  h += pad("01.01.01", 8);
  h += pad("00.00.00", 8);
  h += pad(std::to_string(256 * (ns + 1)), 8);
  h += pad("", 44);
  h += pad(std::to_string(n_records), 8);
  h += pad("1", 8);
  h += pad(std::to_string(ns), 4);
  auto each = [&](auto fn, std::size_t n) {
    for (const auto& s : signals) h += pad(fn(s), n);
  };
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
  };
  each([](const EdfSignal& s) { return s.label; }, 16);
  each([](const EdfSignal&) { return std::string("AgAgCl electrode"); }, 80);
  each([](const EdfSignal&) { return std::string("uV"); }, 8);
  each([&](const EdfSignal& s) { return num(s.physical_min); }, 8);
  each([&](const EdfSignal& s) { return num(s.physical_max); }, 8);
  each([](const EdfSignal&) { return std::string("-32768"); }, 8);
  each([](const EdfSignal&) { return std::string("32767"); }, 8);
  each([](const EdfSignal&) { return std::string(""); }, 80);
  each([](const EdfSignal& s) { return std::to_string(s.sample_rate_hz); }, 8);
  each([](const EdfSignal&) { return std::string(""); }, 32);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (std::size_t rec = 0; rec < n_records; ++rec) {
    for (const auto& s : signals) {
      const double scale = 65535.0 / (s.physical_max - s.physical_min);
      for (int k = 0; k < s.sample_rate_hz; ++k) {
        const std::size_t i = rec * s.sample_rate_hz + k;
        const double phys = i < s.samples.size() ? s.samples[i] : 0.0;
        double d = std::round((phys - s.physical_min) * scale - 32768.0);
        d = std::clamp(d, -32768.0, 32767.0);
        const auto v = static_cast<std::uint16_t>(static_cast<std::int16_t>(d));
        const char bytes[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
        out.write(bytes, 2);
      }
    }
  }
}

inline RawRecord read_edf(const std::filesystem::path& path, const std::string& channel,
                          const IngestOptions& opt = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::FileNotFound, path.string());
  std::string fixed(256, '\0');
  if (!in.read(fixed.data(), 256)) throw Error(ErrorKind::MalformedHeader, path.string() + ": short fixed header");
  const long header_bytes = detail::parse_long_field(detail::field(fixed, 184, 8), "header bytes");
  const long n_records = detail::parse_long_field(detail::field(fixed, 236, 8), "data records");
  const double duration = detail::parse_double_field(detail::field(fixed, 244, 8), "record duration");
  const long ns = detail::parse_long_field(detail::field(fixed, 252, 4), "signal count");
  if (ns <= 0 || header_bytes != 256 * (ns + 1) || n_records < 0 || duration <= 0)
    throw Error(ErrorKind::MalformedHeader, path.string() + ": inconsistent header");

  std::string sig(static_cast<std::size_t>(256 * ns), '\0');
  if (!in.read(sig.data(), static_cast<std::streamsize>(sig.size())))
    throw Error(ErrorKind::MalformedHeader, path.string() + ": short signal header");
  auto sfield = [&](std::size_t block_offset, std::size_t width, long i) {
    return detail::field(sig, block_offset * static_cast<std::size_t>(ns) + width * static_cast<std::size_t>(i), width);
  };
  // Block offsets in units of ns: label 16, transducer 80, dim 8, pmin 8, pmax 8, dmin 8, dmax 8, prefilt 80, nsamp 8.
  std::vector<std::string> labels(ns);
  std::vector<double> pmin(ns), pmax(ns), dmin(ns), dmax(ns);
  std::vector<long> nsamp(ns);
  for (long i = 0; i < ns; ++i) {
    labels[i] = sfield(0, 16, i);
    pmin[i] = detail::parse_double_field(sfield(104, 8, i), "physical min");
    pmax[i] = detail::parse_double_field(sfield(112, 8, i), "physical max");
    dmin[i] = detail::parse_double_field(sfield(120, 8, i), "digital min");
    dmax[i] = detail::parse_double_field(sfield(128, 8, i), "digital max");
    nsamp[i] = detail::parse_long_field(sfield(216, 8, i), "samples per record");
    if (nsamp[i] <= 0 || dmax[i] <= dmin[i]) throw Error(ErrorKind::MalformedHeader, path.string() + ": signal " + labels[i]);
  }
  long target = -1;
  for (long i = 0; i < ns; ++i)
    if (detail::upper(labels[i]) == detail::upper(detail::trim(channel))) target = i;
  if (target < 0) throw Error(ErrorKind::ChannelAbsent, "channel '" + channel + "' not in " + path.string());

  const double native = static_cast<double>(nsamp[target]) / duration;
  if (std::abs(native - std::round(native)) > 1e-9)
    throw Error(ErrorKind::RateMismatch, "non-integer sample rate " + std::to_string(native));

  RawRecord r;
  r.channel_name = labels[target];
  r.subject_id = detail::subject_from_path(path);
  const double gain = (pmax[target] - pmin[target]) / (dmax[target] - dmin[target]);
  r.samples.reserve(static_cast<std::size_t>(n_records * nsamp[target]));
  std::vector<char> buf;
  for (long rec = 0; rec < n_records; ++rec) {
    for (long i = 0; i < ns; ++i) {
      buf.resize(static_cast<std::size_t>(2 * nsamp[i]));
      if (!in.read(buf.data(), static_cast<std::streamsize>(buf.size())))
        throw Error(ErrorKind::MalformedHeader, path.string() + ": truncated data record " + std::to_string(rec));
      if (i != target) continue;
      for (long k = 0; k < nsamp[i]; ++k) {
        const auto lo = static_cast<std::uint8_t>(buf[2 * k]);
        const auto hi = static_cast<std::uint8_t>(buf[2 * k + 1]);
        const auto d = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
        r.samples.push_back(pmin[i] + (static_cast<double>(d) - dmin[i]) * gain);
      }
    }
  }
  return detail::finish_rate(std::move(r), static_cast<int>(std::lround(native)), opt);
}

// One sample per line; an optional first header line is skipped when it does
// not parse as a number.
inline RawRecord read_csv(const std::filesystem::path& path, const std::string& channel,
                          const IngestOptions& opt = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::FileNotFound, path.string());
  RawRecord r;
  r.channel_name = channel;
  r.subject_id = detail::subject_from_path(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    double v = 0.0;
    std::size_t pos = 0;
    bool ok = true;
    try {
      v = std::stod(t, &pos);
    } catch (const std::exception&) {
      ok = false;
    }
    if (!ok || pos != t.size()) {
      if (lineno == 1) {
        // header line names the channel when present
        if (!channel.empty() && detail::upper(t) != detail::upper(channel))
          throw Error(ErrorKind::ChannelAbsent, "channel '" + channel + "' not in " + path.string() + " (header '" + t + "')");
        continue;
      }
      throw Error(ErrorKind::MalformedHeader, path.string() + ":" + std::to_string(lineno) + ": '" + t + "'");
    }
    r.samples.push_back(v);
  }
  if (r.samples.empty()) throw Error(ErrorKind::EmptyInput, path.string() + " has no samples");
  return detail::finish_rate(std::move(r), opt.csv_rate_hz, opt);
}

inline void write_csv(const std::filesystem::path& path, const RawRecord& r) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << r.channel_name << '\n';
  out.precision(17);
  for (double v : r.samples) out << v << '\n';
}

inline RawRecord ingest_record(const std::filesystem::path& path, const std::string& channel, RecordFormat format,
                               const IngestOptions& opt = {}) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::FileNotFound, path.string());
  return format == RecordFormat::Edf ? read_edf(path, channel, opt) : read_csv(path, channel, opt);
}

inline RecordFormat format_from_path(const std::filesystem::path& path) {
  const std::string ext = detail::upper(path.extension().string());
  return ext == ".EDF" ? RecordFormat::Edf : RecordFormat::Csv;
}

inline std::vector<std::optional<Stage>> parse_annotations(std::istream& in) {
  std::vector<std::optional<Stage>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    out.push_back(parse_stage_label(line));
  }
  return out;
}

inline std::vector<std::optional<Stage>> load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::FileNotFound, path.string());
  return parse_annotations(in);
}

inline void write_annotations(const std::filesystem::path& path, const std::vector<std::optional<Stage>>& stages) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  for (const auto& s : stages) out << (s ? to_string(*s) : "UNSCORED") << '\n';
}

// Splits into consecutive 30 s windows; the trailing partial window is
// dropped. Epochs beyond the annotation list are unlabeled.
inline std::vector<Epoch> epochize(const RawRecord& record,
                                   const std::optional<std::vector<std::optional<Stage>>>& annotations = std::nullopt) {
  validate(record);
  const std::size_t len = static_cast<std::size_t>(kEpochSeconds) * static_cast<std::size_t>(record.sample_rate_hz);
  const std::size_t count = record.samples.size() / len;
  if (count == 0)
    throw Error(ErrorKind::RecordTooShort, std::to_string(record.samples.size()) + " samples < one epoch (" +
                                               std::to_string(len) + ")");
  std::vector<Epoch> out;
  out.reserve(count);
  for (std::size_t e = 0; e < count; ++e) {
    auto first = record.samples.begin() + static_cast<std::ptrdiff_t>(e * len);
    std::optional<Stage> stage;
    if (annotations && e < annotations->size()) stage = (*annotations)[e];
    out.emplace_back(std::vector<double>(first, first + static_cast<std::ptrdiff_t>(len)), record.sample_rate_hz,
                     stage, e, record.subject_id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic recordings

struct SynthScenario {
  std::vector<Stage> stages;
  double noise_uv = 5.0;
  int sample_rate_hz = kDefaultSampleRate;
  bool kcomplexes = true;
  std::string subject_id = "synth";
  std::string channel = "C4-A1";
  std::uint64_t seed = 0;
};

// Parses `key = value` lines; '#' starts a comment. The stage list accepts
// repetition, e.g. `stages = N3*5, W*5`.
inline SynthScenario parse_scenario(std::istream& in) {
  SynthScenario sc;
  std::string line;
  std::size_t lineno = 0;
  bool have_stages = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::ParseError, "scenario line " + std::to_string(lineno));
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string val = detail::trim(std::string_view(line).substr(eq + 1));
    try {
      if (key == "stages") {
        have_stages = true;
        std::string list = val;
        std::replace(list.begin(), list.end(), ',', ' ');
        std::stringstream ss(list);
        std::string item;
        while (ss >> item) {
          std::size_t rep = 1;
          if (auto star = item.find('*'); star != std::string::npos) {
            rep = std::stoul(item.substr(star + 1));
            item = detail::trim(item.substr(0, star));
          }
          auto st = parse_stage_label(item);
          if (!st) throw Error(ErrorKind::ParseError, "UNSCORED is not a synthesizable stage");
          sc.stages.insert(sc.stages.end(), rep, *st);
        }
      } else if (key == "noise") {
        sc.noise_uv = std::stod(val);
      } else if (key == "seed") {
        sc.seed = std::stoull(val);
      } else if (key == "sample_rate") {
        sc.sample_rate_hz = std::stoi(val);
      } else if (key == "kcomplexes") {
        sc.kcomplexes = (val == "true" || val == "1" || val == "yes");
      } else if (key == "subject_id") {
        sc.subject_id = val;
      } else if (key == "channel") {
        sc.channel = val;
      } else {
        throw Error(ErrorKind::ParseError, "unknown scenario key '" + key + "'");
      }
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      throw Error(ErrorKind::ParseError, "scenario key '" + key + "' value '" + val + "'");
    }
  }
  if (!have_stages) throw Error(ErrorKind::Validation, "scenario is missing key 'stages'");
  return sc;
}

inline SynthScenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::FileNotFound, path.string());
  return parse_scenario(in);
}

namespace detail {

struct Oscillation {
  double lo_hz;
  double hi_hz;
  double amplitude_uv;
};

// Dominant rhythm per stage. Background activity in every band comes from the
// white-noise floor.
inline std::vector<Oscillation> stage_rhythms(Stage s) {
  switch (s) {
    case Stage::Wake: return {{18.0, 28.0, 30.0}};
    case Stage::N1: return {{5.0, 7.0, 40.0}};
    case Stage::N2: return {{12.5, 15.0, 35.0}};
    case Stage::N3: return {{1.0, 3.0, 75.0}};
    case Stage::REM: return {{9.0, 11.0, 35.0}};
  }
  return {};
}

}  // namespace detail

// Deterministic in (scenario, seed): each epoch is its stage's dominant
// sinusoid plus white noise; N2 epochs optionally carry K-complex-like
// biphasic transients of 0.5-1.5 s.
inline std::pair<RawRecord, std::vector<Stage>> synth_record(const SynthScenario& scenario, std::uint64_t seed) {
  if (scenario.stages.empty()) throw Error(ErrorKind::EmptyInput, "scenario has an empty stage sequence");
  if (scenario.sample_rate_hz <= 0) throw Error(ErrorKind::InvalidArgument, "sample rate must be positive");
  const int fs = scenario.sample_rate_hz;
  const std::size_t len = static_cast<std::size_t>(kEpochSeconds) * static_cast<std::size_t>(fs);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  constexpr double two_pi = 2.0 * std::numbers::pi;

  RawRecord rec;
  rec.sample_rate_hz = fs;
  rec.channel_name = scenario.channel;
  rec.subject_id = scenario.subject_id;
  rec.samples.reserve(len * scenario.stages.size());

  for (Stage st : scenario.stages) {
    std::vector<double> x(len, 0.0);
    for (const auto& osc : detail::stage_rhythms(st)) {
      const double f = osc.lo_hz + (osc.hi_hz - osc.lo_hz) * unit(rng);
      const double phase = two_pi * unit(rng);
      const double amp = osc.amplitude_uv * (0.85 + 0.3 * unit(rng));
      for (std::size_t i = 0; i < len; ++i) x[i] += amp * std::sin(two_pi * f * static_cast<double>(i) / fs + phase);
    }
    if (st == Stage::N2 && scenario.kcomplexes) {
      const int bursts = 1 + static_cast<int>(unit(rng) * 2.0);
      for (int b = 0; b < bursts; ++b) {
        const double dur = 0.5 + unit(rng);
        const auto n = static_cast<std::size_t>(dur * fs);
        const auto start = static_cast<std::size_t>(unit(rng) * static_cast<double>(len - n));
        const double amp = 60.0 + 30.0 * unit(rng);
        // one full cycle: sharp negative wave followed by a slower positive one
        for (std::size_t k = 0; k < n; ++k) {
          const double t = static_cast<double>(k) / static_cast<double>(n);
          x[start + k] += -amp * std::sin(two_pi * t) * std::sin(std::numbers::pi * t);
        }
      }
    }
    for (auto& v : x) v += scenario.noise_uv * gauss(rng);
    rec.samples.insert(rec.samples.end(), x.begin(), x.end());
  }
  return {std::move(rec), scenario.stages};
}

}  // namespace spikesleep
