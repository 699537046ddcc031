#pragma once

#include <array>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spikesleep/attention_model.hpp"
#include "spikesleep/error.hpp"
#include "spikesleep/evaluation.hpp"
#include "spikesleep/feature_io.hpp"
#include "spikesleep/filterbank.hpp"
#include "spikesleep/run_config.hpp"
#include "spikesleep/signal_io.hpp"
#include "spikesleep/spike_encoder.hpp"

namespace spikesleep {

namespace fs = std::filesystem;

// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitRuntime = 2, kExitNumeric = 3 };

inline int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Validation:
    case ErrorKind::InvalidArgument:
    case ErrorKind::InvalidEdges:
    case ErrorKind::UnsupportedOrder:
    case ErrorKind::ConfigMismatch:
    case ErrorKind::TooFewSubjects:
      return kExitValidation;
    case ErrorKind::NonFiniteLoss:
      return kExitNumeric;
    default:
      return kExitRuntime;
  }
}

// ---------------------------------------------------------------------------
// Manifest: {"channel", "sample_rate", "records": [{"subject_id", "record",
// "format", "annotations"}]}; paths are relative to the manifest.

struct ManifestEntry {
  std::string subject_id;
  fs::path record;
  RecordFormat format = RecordFormat::Csv;
  std::optional<fs::path> annotations;
};

struct Manifest {
  std::string channel;
  int sample_rate_hz = kDefaultSampleRate;
  std::vector<ManifestEntry> records;
};

inline Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::FileNotFound, "manifest " + path.string());
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    m.channel = j.value("channel", std::string{});
    m.sample_rate_hz = j.value("sample_rate", kDefaultSampleRate);
    for (const auto& r : j.at("records")) {
      ManifestEntry e;
      e.record = path.parent_path() / r.at("record").get<std::string>();
      e.subject_id = r.value("subject_id", e.record.stem().string());
      e.format = r.value("format", std::string("csv")) == "edf" ? RecordFormat::Edf : RecordFormat::Csv;
      if (r.contains("annotations") && !r.at("annotations").is_null())
        e.annotations = path.parent_path() / r.at("annotations").get<std::string>();
      m.records.push_back(std::move(e));
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::ParseError, "manifest " + path.string() + ": " + e.what());
  }
  return m;
}

// Ingests, epochizes and decomposes every scored epoch listed in a manifest.
inline std::vector<BandSet> decompose_manifest(const RunConfig& cfg, std::ostream& log) {
  const auto manifest = load_manifest(cfg.path("data.manifest"));
  const FilterBank bank(cfg.filter_bank(), cfg.get<int>("data.sample_rate"));
  const auto channel = cfg.get<std::string>("data.channel");
  std::vector<BandSet> out;
  for (const auto& e : manifest.records) {
    try {
      auto rec = ingest_record(e.record, channel, e.format, cfg.ingest());
      rec.subject_id = e.subject_id;
      std::optional<std::vector<std::optional<Stage>>> ann;
      if (e.annotations) ann = load_annotations(*e.annotations);
      std::size_t kept = 0;
      for (const auto& ep : epochize(rec, ann)) {
        if (!ep.stage()) continue;
        out.push_back(bank.decompose(ep));
        ++kept;
      }
      log << "  " << e.record.filename().string() << ": " << kept << " scored epochs\n";
    } catch (const Error& err) {
      throw Error(err.kind(), e.record.string() + ": " + err.detail());
    }
  }
  return out;
}

inline std::string feature_basename(const std::string& subject, std::size_t epoch_index) {
  std::ostringstream os;
  os << subject << "_e" << std::setw(5) << std::setfill('0') << epoch_index;
  return os.str();
}

inline std::vector<FeatureEpoch> load_feature_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::FileNotFound, "feature directory " + dir.string());
  std::vector<fs::path> bases;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    const std::string suffix = ".meta.json";
    if (name.size() > suffix.size() && name.ends_with(suffix))
      bases.push_back(dir / name.substr(0, name.size() - suffix.size()));
  }
  std::sort(bases.begin(), bases.end());
  std::vector<FeatureEpoch> out;
  for (const auto& b : bases) out.push_back(load_features(b).features);
  if (out.empty()) throw Error(ErrorKind::EmptyInput, "no feature files in " + dir.string());
  return out;
}

inline std::vector<FeatureEpoch> load_dataset(const RunConfig& cfg, std::ostream& log) {
  if (cfg.has("data.features")) return load_feature_dir(cfg.path("data.features"));
  if (!cfg.has("data.manifest")) throw Error(ErrorKind::Validation, "missing config key 'data.manifest' (or 'data.features')");
  const auto bands = decompose_manifest(cfg, log);
  return encode_all(bands, cfg.encoder(), cfg.encoder_arm());
}

inline fs::path make_run_dir(const fs::path& out, const std::string& command) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << command << "-" << std::put_time(&tm, "%Y%m%d-%H%M%S");
  fs::path dir = out / os.str();
  for (int n = 1; fs::exists(dir); ++n) dir = out / (os.str() + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + p.string());
  out << text;
}

inline void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

inline void write_resolved_config(const fs::path& dir, const RunConfig& cfg, const std::string& command) {
  auto j = cfg.json();
  j["command"] = command;
  write_json(dir / "config.json", j);
}

// ---------------------------------------------------------------------------
// Commands

struct SynthOutput {
  std::vector<fs::path> records;
  std::vector<fs::path> annotations;
  fs::path manifest;
};

// Seeds: subject i uses base + i, where base is the config seed when it was
// set explicitly and the scenario's own seed otherwise.
inline SynthOutput cmd_synth(const RunConfig& cfg, bool dry_run, std::ostream& log) {
  cfg.validate_all();
  if (!cfg.has("data.scenario")) throw Error(ErrorKind::Validation, "missing config key 'data.scenario'");
  const auto scenario = load_scenario(cfg.path("data.scenario"));
  const int subjects = cfg.get<int>("data.subjects");
  const std::uint64_t base =
      cfg.source("seed") == ConfigSource::Default ? scenario.seed : cfg.get<std::uint64_t>("seed");
  const fs::path out = cfg.path("out");
  SynthOutput res;
  res.manifest = out / "manifest.json";
  nlohmann::json records = nlohmann::json::array();
  for (int i = 0; i < subjects; ++i) {
    std::ostringstream id;
    id << "subject_" << std::setw(2) << std::setfill('0') << i;
    res.records.push_back(out / (id.str() + ".csv"));
    res.annotations.push_back(out / (id.str() + ".ann"));
    records.push_back({{"subject_id", id.str()},
                       {"record", id.str() + ".csv"},
                       {"format", "csv"},
                       {"annotations", id.str() + ".ann"}});
  }
  if (dry_run) {
    log << "dry run: would write " << subjects << " records to " << out.string() << "\n";
    return res;
  }
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw Error(ErrorKind::IoError, "cannot create output directory " + out.string());
  for (int i = 0; i < subjects; ++i) {
    SynthScenario sc = scenario;
    sc.subject_id = records[i]["subject_id"].get<std::string>();
    sc.channel = cfg.get<std::string>("data.channel");
    sc.sample_rate_hz = cfg.get<int>("data.sample_rate");
    auto [rec, stages] = synth_record(sc, base + static_cast<std::uint64_t>(i));
    write_csv(res.records[i], rec);
    write_annotations(res.annotations[i], std::vector<std::optional<Stage>>(stages.begin(), stages.end()));
  }
  write_json(res.manifest, {{"channel", cfg.get<std::string>("data.channel")},
                            {"sample_rate", cfg.get<int>("data.sample_rate")},
                            {"records", records}});
  log << "wrote " << subjects << " records, " << subjects << " annotation files and " << res.manifest.string() << "\n";
  return res;
}

struct EncodeOutput {
  fs::path directory;
  std::size_t files = 0;
  std::array<std::size_t, kNumStages> per_stage{};
};

inline EncodeOutput cmd_encode(const RunConfig& cfg, bool dry_run, std::ostream& log) {
  cfg.validate_all();
  if (!cfg.has("data.manifest")) throw Error(ErrorKind::Validation, "missing config key 'data.manifest'");
  EncodeOutput res;
  res.directory = cfg.path("out") / "features";
  if (dry_run) {
    const auto m = load_manifest(cfg.path("data.manifest"));
    for (const auto& e : m.records)
      if (!fs::exists(e.record)) throw Error(ErrorKind::FileNotFound, e.record.string());
    log << "dry run: " << m.records.size() << " records resolvable; features would go to " << res.directory.string()
        << "\n";
    return res;
  }
  const auto bands = decompose_manifest(cfg, log);
  const auto params = cfg.encoder();
  const auto arm = cfg.encoder_arm();
  const auto provenance = encoder_params_json(params, arm);
  fs::create_directories(res.directory);
  for (const auto& b : bands) {
    const auto fe = build_feature_epoch(b, params, arm);
    save_features(res.directory / feature_basename(fe.subject_id, fe.epoch_index), fe, provenance);
    ++res.files;
    if (fe.stage) ++res.per_stage[stage_index(*fe.stage)];
  }
  log << "encoded " << res.files << " epochs (" << to_string(arm) << "):";
  for (auto s : kAllStages) log << ' ' << to_string(s) << '=' << res.per_stage[stage_index(s)];
  log << "\n";
  return res;
}

inline fs::path cmd_train(const RunConfig& cfg, bool dry_run, std::ostream& log) {
  cfg.validate_all();
  if (dry_run) {
    if (!cfg.has("data.features") && !cfg.has("data.manifest"))
      throw Error(ErrorKind::Validation, "missing config key 'data.manifest' (or 'data.features')");
    log << "dry run: configuration valid\n";
    return {};
  }
  const auto data = load_dataset(cfg, log);
  const auto tc = cfg.train();
  auto res = train(init_model(cfg.model(), tc.seed), data, tc, [&](const EpochLog& l) {
    log << "  epoch " << l.epoch << " loss " << l.mean_loss << " acc " << l.train_accuracy << "\n";
  });
  const auto dir = make_run_dir(cfg.path("out"), "train");
  write_resolved_config(dir, cfg, "train");
  save_model(dir / "model.bin", res.model);
  write_loss_trace(dir / "loss.csv", res.trace);
  log << "model written to " << (dir / "model.bin").string() << "\n";
  return dir;
}

inline void write_cv_artifacts(const fs::path& dir, const CvResult& r) {
  write_json(dir / "metrics.json", to_json(r));
  for (const auto& f : r.folds) {
    const auto stem = "fold_" + std::to_string(f.fold);
    write_json(dir / (stem + ".json"), {{"fold", f.fold},
                                        {"train_subjects", f.train_subjects},
                                        {"test_subjects", f.test_subjects},
                                        {"confusion", to_json(f.confusion)},
                                        {"metrics", to_json(f.metrics)}});
    write_text(dir / (stem + ".txt"), metrics_table(f.metrics, "fold " + std::to_string(f.fold)) + "\n" +
                                          confusion_table(f.confusion));
    write_loss_trace(dir / ("loss_" + stem + ".csv"), f.trace);
  }
  write_text(dir / "pooled.txt", metrics_table(r.pooled_metrics, "pooled over folds") + "\n" + confusion_table(r.pooled));
  fs::create_directories(dir / "hypnograms");
  for (const auto& [subject, h] : hypnograms(r)) export_hypnogram(h, dir / "hypnograms" / subject);
}

inline fs::path cmd_cv(const RunConfig& cfg, bool dry_run, std::ostream& log) {
  cfg.validate_all();
  if (dry_run) {
    if (!cfg.has("data.features") && !cfg.has("data.manifest"))
      throw Error(ErrorKind::Validation, "missing config key 'data.manifest' (or 'data.features')");
    log << "dry run: configuration valid\n";
    return {};
  }
  const auto data = load_dataset(cfg, log);
  const auto plan = make_folds(subjects_of(data), cfg.get<int>("cv.folds"), cfg.get<std::uint64_t>("seed"));
  const auto r = run_cv(data, cfg.model(), cfg.train(), plan, [&](int f, const EpochLog& l) {
    log << "  fold " << f << " epoch " << l.epoch << " loss " << l.mean_loss << "\n";
  });
  const auto dir = make_run_dir(cfg.path("out"), "cv");
  write_resolved_config(dir, cfg, "cv");
  write_cv_artifacts(dir, r);
  log << metrics_table(r.pooled_metrics, "pooled over folds");
  log << "run written to " << dir.string() << "\n";
  return dir;
}

inline fs::path cmd_ablate(const RunConfig& cfg, bool dry_run, std::ostream& log) {
  cfg.validate_all();
  if (!cfg.has("data.manifest")) throw Error(ErrorKind::Validation, "missing config key 'data.manifest'");
  if (dry_run) {
    log << "dry run: configuration valid\n";
    return {};
  }
  const auto bands = decompose_manifest(cfg, log);
  std::vector<std::string> subjects;
  for (const auto& b : bands)
    if (std::find(subjects.begin(), subjects.end(), b.subject_id) == subjects.end()) subjects.push_back(b.subject_id);
  const auto plan = make_folds(subjects, cfg.get<int>("cv.folds"), cfg.get<std::uint64_t>("seed"));
  const auto r = compare_ablation(bands, cfg.encoder(), cfg.model(), cfg.train(), plan,
                                  [&](EncoderArm a, int f, const EpochLog& l) {
                                    log << "  " << to_string(a) << " fold " << f << " epoch " << l.epoch << " loss "
                                        << l.mean_loss << "\n";
                                  });
  const auto dir = make_run_dir(cfg.path("out"), "ablate");
  write_resolved_config(dir, cfg, "ablate");
  write_json(dir / "ablation.json", to_json(r));
  write_text(dir / "ablation.txt", ablation_table(r));
  fs::create_directories(dir / "half_gaussian");
  fs::create_directories(dir / "threshold");
  write_cv_artifacts(dir / "half_gaussian", r.half_gaussian);
  write_cv_artifacts(dir / "threshold", r.threshold);
  log << ablation_table(r);
  log << "run written to " << dir.string() << "\n";
  return dir;
}

// Renders the tables of a finished cv or ablate run and stores them as report.txt.
inline std::string cmd_report(const fs::path& run_dir, std::ostream& log) {
  auto read = [](const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw Error(ErrorKind::FileNotFound, p.string());
    try {
      return nlohmann::json::parse(in);
    } catch (const std::exception& e) {
      throw Error(ErrorKind::ParseError, p.string() + ": " + e.what());
    }
  };
  std::ostringstream os;
  if (fs::exists(run_dir / "ablation.json")) {
    const auto j = read(run_dir / "ablation.json");
    AblationReport r;
    r.half_gaussian.pooled = confusion_from_json(j.at("half_gaussian").at("pooled").at("confusion"));
    r.threshold.pooled = confusion_from_json(j.at("threshold").at("pooled").at("confusion"));
    r.half_gaussian.pooled_metrics = metrics(r.half_gaussian.pooled);
    r.threshold.pooled_metrics = metrics(r.threshold.pooled);
    r.params.ablation_cutoff = j.at("encoder").at("ablation_cutoff").get<double>();
    os << ablation_table(r) << '\n';
    os << metrics_table(r.half_gaussian.pooled_metrics, "half-Gaussian arm") << '\n';
    os << metrics_table(r.threshold.pooled_metrics, "threshold arm");
  } else if (fs::exists(run_dir / "metrics.json")) {
    const auto j = read(run_dir / "metrics.json");
    for (const auto& f : j.at("folds")) {
      const auto cm = confusion_from_json(f.at("confusion"));
      os << metrics_table(metrics(cm), "fold " + std::to_string(f.at("fold").get<int>())) << '\n';
    }
    const auto pooled = confusion_from_json(j.at("pooled").at("confusion"));
    os << metrics_table(metrics(pooled), "pooled over folds") << '\n' << confusion_table(pooled);
  } else {
    throw Error(ErrorKind::FileNotFound, "no metrics.json or ablation.json in " + run_dir.string());
  }
  write_text(run_dir / "report.txt", os.str());
  log << os.str();
  return os.str();
}

}  // namespace spikesleep
