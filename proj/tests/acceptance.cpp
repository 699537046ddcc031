// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace spikesleep;

namespace {

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail) {
  std::cout << (ok ? "[PASS] " : "[FAIL] ") << std::setw(2) << id << "  " << name << ": " << detail << std::endl;
  if (!ok) ++failures;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

void criterion1() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> len(200, 4000);
  std::size_t mismatches = 0, spikes = 0, plateaus = 0;
  for (int i = 0; i < 1000; ++i) {
    auto x = testutil::random_signal(rng, len(rng));
    // quantize every third signal so that flat runs occur
    if (i % 3 == 0)
      for (auto& v : x) v = std::round(v * 2.0) / 2.0;
    for (std::size_t k = 1; k < x.size(); ++k) plateaus += x[k] == x[k - 1];
    for (auto pol : {Polarity::Peak, Polarity::Trough}) {
      const auto got = encode(std::span<const double>(x), pol).mask;
      const auto want = pol == Polarity::Peak ? oracle::peaks(x) : oracle::troughs(x);
      for (std::size_t k = 0; k < x.size(); ++k) {
        mismatches += got[k] != want[k];
        spikes += want[k];
      }
    }
  }
  report(1, "encoder oracle equivalence", mismatches == 0,
         std::to_string(mismatches) + " mismatches over 1000 signals (" + std::to_string(spikes) + " extrema, " +
             std::to_string(plateaus) + " flat steps)");
}

void criterion2() {
  // Relative 1e-12 throughout; below the normal double range the subnormal
  // grid spacing (denorm_min) is added as an absolute rounding floor.
  constexpr double tiny = std::numeric_limits<double>::denorm_min();
  double worst = 0.0;
  std::size_t points = 0, subnormal = 0, failed = 0;
  for (double sigma : {0.1, 0.5, 2.0})
    for (bool unit : {false, true})
      for (int i = 0; i < 10000; ++i) {
        const double z = 5.0 * i / 9999.0;
        HalfGaussianParams p;
        p.sigma = sigma;
        p.normalize_to_unit_peak = unit;
        const double got = half_gaussian(z, p);
        const long double ref = oracle::half_gaussian(z, sigma, unit);
        ++points;
        const long double err = std::abs(got - ref);
        if (ref < std::numeric_limits<double>::min()) {
          ++subnormal;
          failed += err > 1e-12L * ref + 2.0L * tiny;
          continue;
        }
        worst = std::max(worst, static_cast<double>(err / ref));
        failed += err > 1e-12L * ref;
      }
  report(2, "half-Gaussian fidelity", failed == 0,
         "max relative error " + fmt(worst) + " over " + std::to_string(points - subnormal) + " normal-range points; " +
             std::to_string(subnormal) + " subnormal points within 1e-12 rel + 2 denorm_min; " +
             std::to_string(failed) + " failures");
}

void criterion3() {
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<std::size_t> windows(8, 160);
  double worst = 0.0;
  bool lengths = true;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 25 * windows(rng);
    const auto x = testutil::random_signal(rng, n);
    const auto pol = i % 2 ? Polarity::Peak : Polarity::Trough;
    const auto train = probabilitize(x, encode(std::span<const double>(x), pol));
    const auto a = accumulate(train);
    lengths = lengths && a.size() == n / 25;
    long double ref = 0.0L, got = 0.0L;
    for (double v : train.weighted) ref += v;
    for (double v : a) got += v;
    if (ref != 0.0L) worst = std::max(worst, static_cast<double>(std::abs((got - ref) / ref)));
  }
  report(3, "accumulation conservation", lengths && worst <= 1e-12,
         "max relative error " + fmt(worst) + ", output length n/25 " + (lengths ? "always" : "NOT always"));
}

// Steady-state single-pass gain of a sine at f, measured on the filtered signal.
double measured_gain(const SosCascade& c, double f) {
  const double fs = c.sample_rate_hz;
  const std::size_t n = static_cast<std::size_t>(120 * fs);
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = std::sin(2.0 * std::numbers::pi * f * static_cast<double>(i) / fs);
  auto y = x;
  detail::sosfilt_inplace(c, y, std::vector<double>(2 * c.sections.size(), 0.0));
  double sx = 0.0, sy = 0.0;
  for (std::size_t i = n / 2; i < n; ++i) {
    sx += x[i] * x[i];
    sy += y[i] * y[i];
  }
  return std::sqrt(sy / sx);
}

void criterion4() {
  const FilterBank fb;
  bool ok = fb.front().stable();
  std::ostringstream detail;
  for (auto b : kAllBands) {
    const auto& c = fb.band(b);
    ok = ok && c.stable();
    const auto e = nominal_edges(b);
    const double lo = b == BandId::Delta ? 0.0 : e.low_hz;
    const double hi = b == BandId::Beta ? FilterBankConfig{}.beta_high_hz : e.high_hz;
    // sweep on a 0.5 Hz grid up to Nyquist
    std::map<double, double> db;
    for (double f = 0.5; f < 62.5; f += 0.5) db[f] = 20.0 * std::log10(measured_gain(c, f));
    const double mid = b == BandId::Delta ? hi / 2.0 : std::round(2.0 * std::sqrt(lo * hi)) / 2.0;
    const bool flat = std::abs(db.at(mid)) <= 1.0;
    std::string stop;
    bool down = true;
    if (lo > 0.0) {
      down = down && db.at(lo / 2.0) <= -40.0;
      stop += fmt(db.at(lo / 2.0)) + " dB @" + fmt(lo / 2.0) + " Hz ";
    }
    if (2.0 * hi < 62.5) {
      down = down && db.at(2.0 * hi) <= -40.0;
      stop += fmt(db.at(2.0 * hi)) + " dB @" + fmt(2.0 * hi) + " Hz";
    } else {
      stop += "(upper octave above Nyquist)";
    }
    ok = ok && flat && down;
    detail << to_string(b) << " mid " << fmt(db.at(mid)) << " dB, " << stop << "; ";
  }
  report(4, "filter correctness", ok, detail.str() + "all cascades stable: " + (ok ? "yes" : "see above"));
}

void criterion5() {
  std::mt19937_64 rng(505);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  double worst = 0.0, worst_row = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t t = dim(rng), d = dim(rng);
    const auto q = testutil::random_tensor(rng, t, d), k = testutil::random_tensor(rng, t, d),
               v = testutil::random_tensor(rng, t, d);
    const double scale = std::sqrt(static_cast<double>(d));
    const auto out = attention(q, k, v, scale);
    const auto ref = oracle::attention(q.data, k.data, v.data, t, d, d, 1.0 / scale);
    for (std::size_t j = 0; j < ref.size(); ++j) worst = std::max(worst, std::abs(out.data[j] - ref[j]));
    const auto p = attention_probs(q, k, scale);
    for (std::size_t r = 0; r < t; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < t; ++c) s += p(r, c);
      worst_row = std::max(worst_row, std::abs(s - 1.0));
    }
  }
  bool identity = true;
  for (int i = 0; i < 100; ++i) {
    const std::size_t d = dim(rng);
    const auto q = testutil::random_tensor(rng, 1, d), k = testutil::random_tensor(rng, 1, d),
               v = testutil::random_tensor(rng, 1, d);
    identity = identity && attention(q, k, v, std::sqrt(static_cast<double>(d))) == v;
  }
  report(5, "attention correctness", worst <= 1e-12 && worst_row <= 1e-12 && identity,
         "max |diff| vs oracle " + fmt(worst) + ", max |row sum - 1| " + fmt(worst_row) + ", single-token identity " +
             (identity ? "exact" : "BROKEN"));
}

void criterion6() {
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = init_model(testutil::tiny_config(4), seed);
    std::mt19937_64 rng(600 + seed);
    const auto r = grad_check(m, testutil::random_tensor(rng, 4, 10), static_cast<int>(seed % 5));
    checked += r.checked;
    if (r.max_relative_error > worst) {
      worst = r.max_relative_error;
      where = r.worst_parameter;
    }
  }
  report(6, "gradient check", worst < 1e-5,
         "max relative error " + fmt(worst) + " (" + where + ") over " + std::to_string(checked) +
             " parameters in 5 models");
}

void criterion7() {
  auto c = testutil::tiny_config(20);
  c.model_dim = 16;
  c.mlp_dim = 32;
  c.heads = 4;
  c.depth = 2;
  c.positional = PositionalEncoding::None;
  double worst_tok = 0.0, worst_logit = 0.0;
  std::mt19937_64 rng(707);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto m = init_model(c, s);
    const auto x = testutil::random_tensor(rng, 20, 10);
    std::vector<std::size_t> perm(20);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor xp(20, 10);
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t j = 0; j < 10; ++j) xp(i, j) = x(perm[i], j);
    const auto t = encode_tokens(m, x), tp = encode_tokens(m, xp);
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t j = 0; j < 16; ++j) worst_tok = std::max(worst_tok, std::abs(tp(i, j) - t(perm[i], j)));
    const auto l = forward(m, x), lp = forward(m, xp);
    for (std::size_t i = 0; i < l.size(); ++i) worst_logit = std::max(worst_logit, std::abs(l[i] - lp[i]));
  }
  report(7, "permutation equivariance", worst_tok <= 1e-9 && worst_logit <= 1e-9,
         "max token diff " + fmt(worst_tok) + ", max logit diff " + fmt(worst_logit) + " over 20 models");
}

struct Runs {
  testutil::OverfitOutcome overfit;
  CvResult desk;
  AblationReport ablation;
};

void criterion8(Runs& runs) {
  runs.overfit = testutil::overfit_run(8);
  const auto& r = runs.overfit.result;
  const double dev = std::abs(r.first_step_loss - std::log(5.0));
  report(8, "overfit smoke test", runs.overfit.eval_accuracy == 1.0 && r.steps <= 200 && dev <= 0.1,
         "training accuracy " + fmt(runs.overfit.eval_accuracy) + " after " + std::to_string(r.steps) +
             " steps, first-step loss " + fmt(r.first_step_loss) + " (|diff from ln 5| " + fmt(dev) + ")");
}

// Reduced model for a single CPU core; see README.
ModelConfig desk_model() {
  ModelConfig c;
  c.depth = 2;
  c.heads = 4;
  c.model_dim = 32;
  c.mlp_dim = 32;
  c.dropout = 0.1;
  return c;
}

TrainConfig desk_train() {
  TrainConfig t;
  t.epochs = 10;
  t.batch_size = 32;
  t.learning_rate = 2e-3;
  t.seed = 1;
  return t;
}

constexpr std::uint64_t kDeskDataSeed = 100;
constexpr std::uint64_t kDeskFoldSeed = 3;

bool folds_disjoint(const CvResult& r) {
  for (const auto& f : r.folds)
    for (const auto& s : f.test_subjects)
      if (std::find(f.train_subjects.begin(), f.train_subjects.end(), s) != f.train_subjects.end()) return false;
  return true;
}

void criterion9(const std::vector<BandSet>& bands, Runs& runs) {
  const auto t0 = Clock::now();
  const auto data = encode_all(bands, EncoderParams{}, EncoderArm::HalfGaussian);
  const auto plan = make_folds(subjects_of(data), 2, kDeskFoldSeed);
  runs.desk = run_cv(data, desk_model(), desk_train(), plan);
  const double acc = runs.desk.pooled_metrics.accuracy;
  const bool disjoint = folds_disjoint(runs.desk);
  report(9, "desk-scale end-to-end", acc >= 0.85 && disjoint,
         "pooled accuracy " + fmt(acc) + " on " + std::to_string(runs.desk.pooled.total()) +
             " epochs, folds disjoint: " + (disjoint ? "yes" : "NO") + ", " + fmt(seconds_since(t0)) + " s");
  std::cout << metrics_table(runs.desk.pooled_metrics, "     pooled (half-Gaussian)");
}

void criterion10(const std::vector<BandSet>& bands, Runs& runs) {
  const auto t0 = Clock::now();
  std::vector<std::string> subjects;
  for (const auto& b : bands)
    if (std::find(subjects.begin(), subjects.end(), b.subject_id) == subjects.end()) subjects.push_back(b.subject_id);
  const auto plan = make_folds(subjects, 2, kDeskFoldSeed);
  const EncoderParams p;
  runs.ablation = compare_ablation(bands, p, desk_model(), desk_train(), plan);
  const auto& hg = runs.ablation.half_gaussian;
  const auto& th = runs.ablation.threshold;
  bool same_folds = hg.folds.size() == th.folds.size();
  for (std::size_t f = 0; same_folds && f < hg.folds.size(); ++f)
    same_folds = hg.folds[f].test_subjects == th.folds[f].test_subjects &&
                 hg.folds[f].train_subjects == th.folds[f].train_subjects;

  // provenance: each arm's sidecar records which arm produced it
  testutil::TempDir dir("accept10");
  save_features(dir / "hg", build_feature_epoch(bands[0], p, EncoderArm::HalfGaussian),
                encoder_params_json(p, EncoderArm::HalfGaussian));
  save_features(dir / "th", build_feature_epoch(bands[0], p, EncoderArm::Threshold),
                encoder_params_json(p, EncoderArm::Threshold));
  const auto arm_hg = load_features(dir / "hg").params.at("arm").get<std::string>();
  const auto arm_th = load_features(dir / "th").params.at("arm").get<std::string>();
  const bool provenance = arm_hg == "half_gaussian" && arm_th == "threshold";

  const double a = hg.pooled_metrics.accuracy, b = th.pooled_metrics.accuracy;
  report(10, "ablation harness parity", same_folds && provenance && a >= 0.75 && b >= 0.75,
         "half-Gaussian " + fmt(a) + ", threshold " + fmt(b) + ", identical folds: " + (same_folds ? "yes" : "NO") +
             ", sidecar arms '" + arm_hg + "' / '" + arm_th + "', " + fmt(seconds_since(t0)) + " s");
  std::cout << "       (both arms >= 0.9: " << (a >= 0.9 && b >= 0.9 ? "yes" : "no") << ")\n";
  std::cout << ablation_table(runs.ablation);
}

void criterion11(const std::vector<BandSet>& bands, const Runs& runs) {
  const auto t0 = Clock::now();
  auto report_of = [](const CvResult& r) { return to_json(r).dump() + metrics_table(r.pooled_metrics); };
  const auto overfit2 = testutil::overfit_run(8);
  const bool c8 = overfit2.result.trace == runs.overfit.result.trace &&
                  overfit2.result.model.params == runs.overfit.result.model.params &&
                  overfit2.eval_accuracy == runs.overfit.eval_accuracy;
  // criterion 9's run and the half-Gaussian arm of criterion 10 share every seed
  const bool c9 = report_of(runs.desk) == report_of(runs.ablation.half_gaussian);
  const auto th_data = encode_all(bands, EncoderParams{}, EncoderArm::Threshold);
  const auto th = run_cv(th_data, desk_model(), desk_train(), make_folds(subjects_of(th_data), 2, kDeskFoldSeed));
  const bool c10 = report_of(th) == report_of(runs.ablation.threshold);
  report(11, "determinism", c8 && c9 && c10,
         std::string("overfit rerun ") + (c8 ? "identical" : "DIFFERS") + ", desk run vs ablation arm " +
             (c9 ? "identical" : "DIFFERS") + ", threshold rerun " + (c10 ? "identical" : "DIFFERS") + ", " +
             fmt(seconds_since(t0)) + " s");
}

void criterion12() {
  testutil::TempDir dir("accept12");
  std::mt19937_64 rng(1212);
  std::uniform_int_distribution<std::uint32_t> bits;
  std::size_t feature_ok = 0, model_ok = 0;
  for (int i = 0; i < 100; ++i) {
    FeatureEpoch fe(1 + i % 150);
    // arbitrary finite float bit patterns, signed zeros and denormals included
    for (auto& v : fe.data) {
      float f;
      do {
        const std::uint32_t b = bits(rng);
        std::memcpy(&f, &b, sizeof f);
      } while (!std::isfinite(f));
      v = f;
    }
    fe.stage = stage_from_index(i % 5);
    fe.subject_id = "subject_" + std::to_string(i);
    fe.epoch_index = static_cast<std::size_t>(i);
    const auto base = dir / ("f" + std::to_string(i));
    save_features(base, fe, encoder_params_json({}, i % 2 ? EncoderArm::Threshold : EncoderArm::HalfGaussian));
    const auto back = load_features(base).features;
    feature_ok += back.rows == fe.rows && back.stage == fe.stage && back.subject_id == fe.subject_id &&
                  back.epoch_index == fe.epoch_index && back.data.size() == fe.data.size() &&
                  std::memcmp(back.data.data(), fe.data.data(), fe.data.size() * sizeof(float)) == 0;
  }
  for (int i = 0; i < 100; ++i) {
    auto c = testutil::tiny_config(2 + i % 6);
    c.positional = static_cast<PositionalEncoding>(i % 3);
    c.depth = 1 + i % 2;
    auto m = init_model(c, static_cast<std::uint64_t>(i));
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& p : m.params)
      for (auto& v : p.data) v = g(rng);
    const auto path = dir / ("m" + std::to_string(i) + ".bin");
    save_model(path, m);
    const auto back = load_model(path, &c);
    bool same = back.names == m.names && back.params.size() == m.params.size();
    for (std::size_t p = 0; same && p < m.params.size(); ++p)
      same = back.params[p].shape == m.params[p].shape &&
             std::memcmp(back.params[p].data.data(), m.params[p].data.data(), m.params[p].size() * sizeof(double)) == 0;
    const auto x = testutil::random_tensor(rng, static_cast<std::size_t>(c.seq_len), 10);
    const auto la = forward(m, x), lb = forward(back, x);
    same = same && std::memcmp(la.data(), lb.data(), la.size() * sizeof(double)) == 0;
    model_ok += same;
  }
  report(12, "round-trips", feature_ok == 100 && model_ok == 100,
         std::to_string(feature_ok) + "/100 feature files and " + std::to_string(model_ok) +
             "/100 model files bit-exact");
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  try {
    criterion1();
    criterion2();
    criterion3();
    criterion4();
    criterion5();
    criterion6();
    criterion7();
    Runs runs;
    criterion8(runs);
    const auto bands = testutil::synthetic_bands(8, 12, kDeskDataSeed);
    criterion9(bands, runs);
    criterion10(bands, runs);
    criterion11(bands, runs);
    criterion12();
  } catch (const std::exception& e) {
    std::cout << "[FAIL] aborted: " << e.what() << std::endl;
    return 1;
  }
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all 12 criteria passed"))
            << " in " << fmt(seconds_since(t0)) << " s" << std::endl;
  return failures ? 1 : 0;
}
