#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spikesleep/attention_model.hpp"
#include "spikesleep/error.hpp"
#include "spikesleep/feature_io.hpp"
#include "spikesleep/signal_io.hpp"
#include "spikesleep/spike_encoder.hpp"

namespace spikesleep {

// Rows are true stages, columns predicted, both in Wake, N1, N2, N3, REM order.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kNumStages>, kNumStages> counts{};

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& r : counts)
      for (auto v : r) t += v;
    return t;
  }
  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (int s = 0; s < kNumStages; ++s) t += counts[s][s];
    return t;
  }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    for (int i = 0; i < kNumStages; ++i)
      for (int j = 0; j < kNumStages; ++j) counts[i][j] += o.counts[i][j];
    return *this;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion(std::span<const Stage> truth, std::span<const Stage> pred) {
  if (truth.size() != pred.size())
    throw Error(ErrorKind::LengthMismatch, "confusion: " + std::to_string(truth.size()) + " true vs " +
                                               std::to_string(pred.size()) + " predicted");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < truth.size(); ++i) ++cm.counts[stage_index(truth[i])][stage_index(pred[i])];
  return cm;
}

struct StageMetrics {
  std::array<double, kNumStages> precision{};
  std::array<double, kNumStages> recall{};
  std::array<double, kNumStages> f1{};
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  // One entry per zero denominator that was reported as 0.
  std::vector<std::string> warnings;

  friend bool operator==(const StageMetrics&, const StageMetrics&) = default;
};

inline StageMetrics metrics(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw Error(ErrorKind::EmptyInput, "metrics of an empty confusion matrix");
  StageMetrics m;
  for (int s = 0; s < kNumStages; ++s) {
    std::uint64_t row = 0, col = 0;
    for (int o = 0; o < kNumStages; ++o) {
      row += cm.counts[s][o];
      col += cm.counts[o][s];
    }
    const double tp = static_cast<double>(cm.counts[s][s]);
    if (col == 0) {
      m.warnings.push_back(std::string("precision of ") + to_string(stage_from_index(s)) + " undefined (never predicted)");
    } else {
      m.precision[s] = tp / static_cast<double>(col);
    }
    if (row == 0) {
      m.warnings.push_back(std::string("recall of ") + to_string(stage_from_index(s)) + " undefined (no true epochs)");
    } else {
      m.recall[s] = tp / static_cast<double>(row);
    }
    const double pr = m.precision[s] + m.recall[s];
    m.f1[s] = pr > 0.0 ? 2.0 * m.precision[s] * m.recall[s] / pr : 0.0;
    m.macro_f1 += m.f1[s];
  }
  m.macro_f1 /= kNumStages;
  m.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
  return m;
}

// ---------------------------------------------------------------------------
// Folds

struct FoldPlan {
  int k = 7;
  std::map<std::string, int> assignment;

  std::vector<std::string> subjects_in(int fold) const {
    std::vector<std::string> out;
    for (const auto& [s, f] : assignment)
      if (f == fold) out.push_back(s);
    return out;
  }
  int fold_of(const std::string& subject) const {
    auto it = assignment.find(subject);
    if (it == assignment.end()) throw Error(ErrorKind::Validation, "subject '" + subject + "' has no fold");
    return it->second;
  }
  friend bool operator==(const FoldPlan&, const FoldPlan&) = default;
};

// Seeded shuffle, then round-robin deal into k folds.
inline FoldPlan make_folds(std::vector<std::string> subjects, int k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorKind::InvalidArgument, "need at least 2 folds");
  std::set<std::string> unique(subjects.begin(), subjects.end());
  if (unique.size() != subjects.size()) throw Error(ErrorKind::InvalidArgument, "duplicate subject ids");
  if (subjects.size() < static_cast<std::size_t>(k))
    throw Error(ErrorKind::TooFewSubjects, std::to_string(subjects.size()) + " subjects for " + std::to_string(k) + " folds");
  std::mt19937_64 rng(seed);
  std::shuffle(subjects.begin(), subjects.end(), rng);
  FoldPlan plan;
  plan.k = k;
  for (std::size_t i = 0; i < subjects.size(); ++i) plan.assignment[subjects[i]] = static_cast<int>(i % k);
  return plan;
}

inline std::vector<std::string> subjects_of(std::span<const FeatureEpoch> data) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& fe : data)
    if (seen.insert(fe.subject_id).second) out.push_back(fe.subject_id);
  return out;
}

// ---------------------------------------------------------------------------
// Cross-validation

struct Prediction {
  std::string subject_id;
  std::size_t epoch_index = 0;
  Stage truth = Stage::Wake;
  Stage predicted = Stage::Wake;
  friend bool operator==(const Prediction&, const Prediction&) = default;
};

struct FoldResult {
  int fold = 0;
  std::vector<std::string> train_subjects;
  std::vector<std::string> test_subjects;
  ConfusionMatrix confusion;
  StageMetrics metrics;
  std::vector<EpochLog> trace;
  std::vector<Prediction> predictions;
};

struct CvResult {
  std::vector<FoldResult> folds;
  ConfusionMatrix pooled;
  StageMetrics pooled_metrics;
  double fold_accuracy_mean = 0.0;
  double fold_accuracy_std = 0.0;
};

using FoldProgress = std::function<void(int fold, const EpochLog&)>;

// Trains one model per fold on the other folds' subjects and scores the held
// out subjects. Unscored epochs are skipped on both sides. Fold f initializes
// its model from train.seed + f.
inline CvResult run_cv(std::span<const FeatureEpoch> dataset, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                       const FoldPlan& plan, const FoldProgress& progress = {}) {
  for (const auto& fe : dataset) plan.fold_of(fe.subject_id);
  CvResult out;
  for (int f = 0; f < plan.k; ++f) {
    FoldResult fr;
    fr.fold = f;
    std::vector<FeatureEpoch> train_set;
    std::vector<const FeatureEpoch*> test_set;
    for (const auto& fe : dataset) {
      if (!fe.stage) continue;
      if (plan.fold_of(fe.subject_id) == f) {
        test_set.push_back(&fe);
      } else {
        train_set.push_back(fe);
      }
    }
    for (const auto& [s, fold] : plan.assignment) (fold == f ? fr.test_subjects : fr.train_subjects).push_back(s);
    if (test_set.empty()) throw Error(ErrorKind::EmptyFold, "fold " + std::to_string(f) + " has no scored epochs");
    if (train_set.empty()) throw Error(ErrorKind::EmptyFold, "fold " + std::to_string(f) + " has no training epochs");

    TrainConfig tc = train_cfg;
    tc.seed = train_cfg.seed + static_cast<std::uint64_t>(f);
    auto trained = train(init_model(model_cfg, tc.seed), train_set, tc, [&](const EpochLog& l) {
      if (progress) progress(f, l);
    });
    std::vector<Stage> truth, pred;
    for (const auto* fe : test_set) {
      const Stage p = stage_from_index(predict(trained.model, features_to_tensor(*fe)));
      truth.push_back(*fe->stage);
      pred.push_back(p);
      fr.predictions.push_back({fe->subject_id, fe->epoch_index, *fe->stage, p});
    }
    fr.confusion = confusion(truth, pred);
    fr.metrics = metrics(fr.confusion);
    fr.trace = std::move(trained.trace);
    out.pooled += fr.confusion;
    out.folds.push_back(std::move(fr));
  }
  out.pooled_metrics = metrics(out.pooled);
  double s = 0.0, s2 = 0.0;
  for (const auto& f : out.folds) {
    s += f.metrics.accuracy;
    s2 += f.metrics.accuracy * f.metrics.accuracy;
  }
  const double n = static_cast<double>(out.folds.size());
  out.fold_accuracy_mean = s / n;
  out.fold_accuracy_std = std::sqrt(std::max(0.0, s2 / n - out.fold_accuracy_mean * out.fold_accuracy_mean));
  return out;
}

// Encodes every decomposed epoch with the chosen arm.
inline std::vector<FeatureEpoch> encode_all(std::span<const BandSet> bands, const EncoderParams& p, EncoderArm arm) {
  std::vector<FeatureEpoch> out;
  out.reserve(bands.size());
  for (const auto& b : bands) out.push_back(build_feature_epoch(b, p, arm));
  return out;
}

struct AblationReport {
  CvResult half_gaussian;
  CvResult threshold;
  EncoderParams params;
};

// Two cross-validation runs that differ only in the encoder arm.
inline AblationReport compare_ablation(std::span<const BandSet> bands, const EncoderParams& p, const ModelConfig& model_cfg,
                                       const TrainConfig& train_cfg, const FoldPlan& plan,
                                       const std::function<void(EncoderArm, int, const EpochLog&)>& progress = {}) {
  AblationReport r;
  r.params = p;
  for (auto arm : {EncoderArm::HalfGaussian, EncoderArm::Threshold}) {
    const auto data = encode_all(bands, p, arm);
    auto cv = run_cv(data, model_cfg, train_cfg, plan, [&](int f, const EpochLog& l) {
      if (progress) progress(arm, f, l);
    });
    (arm == EncoderArm::HalfGaussian ? r.half_gaussian : r.threshold) = std::move(cv);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::json to_json(const ConfusionMatrix& cm) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : cm.counts) rows.push_back(r);
  return rows;
}

inline ConfusionMatrix confusion_from_json(const nlohmann::json& j) {
  ConfusionMatrix cm;
  if (j.size() != kNumStages) throw Error(ErrorKind::ParseError, "confusion matrix needs 5 rows");
  for (int i = 0; i < kNumStages; ++i) {
    if (j[i].size() != kNumStages) throw Error(ErrorKind::ParseError, "confusion matrix needs 5 columns");
    for (int k = 0; k < kNumStages; ++k) cm.counts[i][k] = j[i][k].get<std::uint64_t>();
  }
  return cm;
}

inline nlohmann::json to_json(const StageMetrics& m) {
  nlohmann::json per = nlohmann::json::object();
  for (int s = 0; s < kNumStages; ++s)
    per[to_string(stage_from_index(s))] = {{"precision", m.precision[s]}, {"recall", m.recall[s]}, {"f1", m.f1[s]}};
  return {{"stages", per}, {"accuracy", m.accuracy}, {"macro_f1", m.macro_f1}, {"warnings", m.warnings}};
}

inline nlohmann::json to_json(const CvResult& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds)
    folds.push_back({{"fold", f.fold},
                     {"train_subjects", f.train_subjects},
                     {"test_subjects", f.test_subjects},
                     {"confusion", to_json(f.confusion)},
                     {"metrics", to_json(f.metrics)}});
  return {{"folds", folds},
          {"pooled", {{"confusion", to_json(r.pooled)}, {"metrics", to_json(r.pooled_metrics)}}},
          {"fold_accuracy_mean", r.fold_accuracy_mean},
          {"fold_accuracy_std", r.fold_accuracy_std}};
}

// Pre / Re / F1 rows per stage plus overall accuracy.
inline std::string metrics_table(const StageMetrics& m, const std::string& title = "") {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  if (!title.empty()) os << title << '\n';
  os << std::left << std::setw(6) << "" << std::right;
  for (auto s : kAllStages) os << std::setw(8) << to_string(s);
  os << std::setw(10) << "Overall" << '\n';
  const std::array<std::pair<const char*, const std::array<double, kNumStages>*>, 3> rows = {
      {{"Pre", &m.precision}, {"Re", &m.recall}, {"F1", &m.f1}}};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    os << std::left << std::setw(6) << rows[r].first << std::right;
    for (double v : *rows[r].second) os << std::setw(8) << v;
    if (r == 0) os << std::setw(10) << m.accuracy;
    os << '\n';
  }
  os << "macro-F1 " << m.macro_f1 << '\n';
  return os.str();
}

inline std::string confusion_table(const ConfusionMatrix& cm, const std::string& title = "") {
  std::ostringstream os;
  if (!title.empty()) os << title << '\n';
  os << std::setw(8) << "true\\pred";
  for (auto s : kAllStages) os << std::setw(8) << to_string(s);
  os << '\n';
  for (int i = 0; i < kNumStages; ++i) {
    os << std::setw(9) << to_string(stage_from_index(i));
    for (int j = 0; j < kNumStages; ++j) os << std::setw(8) << cm.counts[i][j];
    os << '\n';
  }
  return os.str();
}

inline std::string ablation_table(const AblationReport& r) {
  std::ostringstream os;
  os << confusion_table(r.half_gaussian.pooled, "(a) half-Gaussian weighting");
  os << '\n' << confusion_table(r.threshold.pooled, "(b) fixed cut-off threshold " + std::to_string(r.params.ablation_cutoff));
  const auto& a = r.half_gaussian.pooled_metrics;
  const auto& b = r.threshold.pooled_metrics;
  os << "\nper-stage delta (half-Gaussian minus threshold)\n" << std::fixed << std::setprecision(3);
  os << std::left << std::setw(8) << "stage" << std::right << std::setw(10) << "dPre" << std::setw(10) << "dRe"
     << std::setw(10) << "dF1" << '\n';
  for (int s = 0; s < kNumStages; ++s)
    os << std::left << std::setw(8) << to_string(stage_from_index(s)) << std::right << std::setw(10)
       << a.precision[s] - b.precision[s] << std::setw(10) << a.recall[s] - b.recall[s] << std::setw(10)
       << a.f1[s] - b.f1[s] << '\n';
  os << "accuracy " << a.accuracy << " vs " << b.accuracy << '\n';
  return os.str();
}

inline nlohmann::json to_json(const AblationReport& r) {
  nlohmann::json delta = nlohmann::json::object();
  for (int s = 0; s < kNumStages; ++s) {
    const auto& a = r.half_gaussian.pooled_metrics;
    const auto& b = r.threshold.pooled_metrics;
    delta[to_string(stage_from_index(s))] = {{"precision", a.precision[s] - b.precision[s]},
                                             {"recall", a.recall[s] - b.recall[s]},
                                             {"f1", a.f1[s] - b.f1[s]}};
  }
  return {{"half_gaussian", to_json(r.half_gaussian)},
          {"threshold", to_json(r.threshold)},
          {"delta", delta},
          {"encoder", encoder_params_json(r.params, EncoderArm::HalfGaussian)}};
}

// ---------------------------------------------------------------------------
// Hypnograms

struct Hypnogram {
  std::vector<Stage> truth;
  std::vector<Stage> predicted;

  Hypnogram(std::vector<Stage> t, std::vector<Stage> p) : truth(std::move(t)), predicted(std::move(p)) {
    if (truth.size() != predicted.size())
      throw Error(ErrorKind::LengthMismatch, "hypnogram lanes " + std::to_string(truth.size()) + " vs " +
                                                 std::to_string(predicted.size()));
  }
  bool mismatch(std::size_t i) const { return truth[i] != predicted[i]; }
  std::size_t mismatches() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) n += mismatch(i);
    return n;
  }
};

namespace detail {

// Conventional hypnogram ordering, Wake on top.
inline int hypnogram_level(Stage s) {
  switch (s) {
    case Stage::Wake: return 0;
    case Stage::REM: return 1;
    case Stage::N1: return 2;
    case Stage::N2: return 3;
    case Stage::N3: return 4;
  }
  return 0;
}

}  // namespace detail

inline std::string hypnogram_svg(const Hypnogram& h) {
  const double w = 900, lane = 140, gap = 40, left = 50, top = 20;
  const std::size_t n = std::max<std::size_t>(h.truth.size(), 1);
  const double dx = (w - left - 10) / static_cast<double>(n);
  const double dy = lane / 4.0;
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << 2 * lane + gap + 2 * top
     << "\">\n";
  auto lane_plot = [&](const std::vector<Stage>& seq, double y0, const char* title, bool mark) {
    os << "<text x=\"4\" y=\"" << y0 - 6 << "\" font-size=\"11\">" << title << "</text>\n";
    for (auto s : kAllStages)
      os << "<text x=\"4\" y=\"" << y0 + detail::hypnogram_level(s) * dy + 4 << "\" font-size=\"10\">" << to_string(s)
         << "</text>\n";
    if (mark)
      for (std::size_t i = 0; i < seq.size(); ++i)
        if (h.mismatch(i))
          os << "<rect class=\"mismatch\" x=\"" << left + i * dx << "\" y=\"" << y0 - 4 << "\" width=\"" << dx
             << "\" height=\"" << lane << "\" fill=\"red\" fill-opacity=\"0.35\"/>\n";
    os << "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"1\" points=\"";
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const double y = y0 + detail::hypnogram_level(seq[i]) * dy;
      os << left + i * dx << ',' << y << ' ' << left + (i + 1) * dx << ',' << y << ' ';
    }
    os << "\"/>\n";
  };
  lane_plot(h.truth, top + 10, "expert", false);
  lane_plot(h.predicted, top + 10 + lane + gap, "model", true);
  os << "</svg>\n";
  return os.str();
}

// Writes `<base>.svg` and `<base>.csv` (epoch_index,true,pred,match).
inline void export_hypnogram(const Hypnogram& h, const std::filesystem::path& base) {
  const std::filesystem::path csv = base.string() + ".csv", svg = base.string() + ".svg";
  std::ofstream c(csv);
  if (!c) throw Error(ErrorKind::IoError, "cannot write " + csv.string());
  c << "epoch_index,true,pred,match\n";
  for (std::size_t i = 0; i < h.truth.size(); ++i)
    c << i << ',' << to_string(h.truth[i]) << ',' << to_string(h.predicted[i]) << ',' << (h.mismatch(i) ? 0 : 1) << '\n';
  std::ofstream s(svg);
  if (!s) throw Error(ErrorKind::IoError, "cannot write " + svg.string());
  s << hypnogram_svg(h);
}

inline void export_hypnogram(std::vector<Stage> truth, std::vector<Stage> pred, const std::filesystem::path& base) {
  export_hypnogram(Hypnogram(std::move(truth), std::move(pred)), base);
}

// One hypnogram per test subject of a CV run, epochs in index order.
inline std::map<std::string, Hypnogram> hypnograms(const CvResult& r) {
  std::map<std::string, std::vector<Prediction>> by_subject;
  for (const auto& f : r.folds)
    for (const auto& p : f.predictions) by_subject[p.subject_id].push_back(p);
  std::map<std::string, Hypnogram> out;
  for (auto& [s, preds] : by_subject) {
    std::sort(preds.begin(), preds.end(), [](const auto& a, const auto& b) { return a.epoch_index < b.epoch_index; });
    std::vector<Stage> t, p;
    for (const auto& x : preds) {
      t.push_back(x.truth);
      p.push_back(x.predicted);
    }
    out.emplace(s, Hypnogram(std::move(t), std::move(p)));
  }
  return out;
}

}  // namespace spikesleep
