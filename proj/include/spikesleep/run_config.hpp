#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "spikesleep/attention_model.hpp"
#include "spikesleep/error.hpp"
#include "spikesleep/filterbank.hpp"
#include "spikesleep/signal_io.hpp"
#include "spikesleep/spike_encoder.hpp"

namespace spikesleep {

// Flat JSON object with dotted keys. Defaults are the reference
// hyperparameters; precedence is flag > file > default.
inline nlohmann::json default_run_config() {
  return {
      {"out", "out"},
      {"seed", 0},
      {"data.scenario", nullptr},
      {"data.subjects", 4},
      {"data.manifest", nullptr},
      {"data.features", nullptr},
      {"data.channel", "C4-A1"},
      {"data.sample_rate", kDefaultSampleRate},
      {"data.allow_resample", false},
      {"filter.family", "butterworth"},
      {"filter.front_order", 8},
      {"filter.front_low_hz", 0.5},
      {"filter.front_high_hz", 35.0},
      {"filter.band_order", 8},
      {"filter.beta_high_hz", 32.0},
      {"encoder.arm", "half_gaussian"},
      {"encoder.mu", 0.0},
      {"encoder.sigma", 0.5},
      {"encoder.window_size", 125},
      {"encoder.normalize", true},
      {"encoder.accumulation_width", kAccumulationWidth},
      {"encoder.ablation_cutoff", 0.5},
      {"model.depth", 8},
      {"model.heads", 4},
      {"model.model_dim", 128},
      {"model.attention_scale", 8.0},
      {"model.mlp_dim", 128},
      {"model.dropout", 0.5},
      {"model.positional", "learned"},
      {"model.head_init_scale", 0.1},
      {"train.epochs", 100},
      {"train.batch_size", 32},
      {"train.learning_rate", 1e-4},
      {"cv.folds", 7},
  };
}

enum class ConfigSource { Default, File, Flag };

inline const char* to_string(ConfigSource s) {
  switch (s) {
    case ConfigSource::Default: return "default";
    case ConfigSource::File: return "file";
    case ConfigSource::Flag: return "flag";
  }
  return "?";
}

class RunConfig {
 public:
  RunConfig() : values_(default_run_config()) {
    for (auto& [k, v] : values_.items()) sources_[k] = ConfigSource::Default;
  }

  // Layers `overrides` on top; every key must already exist.
  void merge(const nlohmann::json& overrides, ConfigSource source) {
    if (!overrides.is_object()) throw Error(ErrorKind::Validation, "config must be a flat JSON object");
    for (auto& [k, v] : overrides.items()) {
      if (!values_.contains(k)) throw Error(ErrorKind::Validation, "unknown config key '" + k + "'");
      if (v.is_object()) throw Error(ErrorKind::Validation, "config key '" + k + "' must not be nested");
      values_[k] = v;
      sources_[k] = source;
    }
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Validation, "config file not found: " + path.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const std::exception& e) {
      throw Error(ErrorKind::Validation, path.string() + ": " + e.what());
    }
    merge(j, ConfigSource::File);
  }

  const nlohmann::json& json() const { return values_; }
  ConfigSource source(const std::string& key) const { return sources_.at(key); }
  bool has(const std::string& key) const { return values_.contains(key) && !values_.at(key).is_null(); }

  template <typename T>
  T get(const std::string& key) const {
    if (!has(key)) throw Error(ErrorKind::Validation, "missing config key '" + key + "'");
    try {
      return values_.at(key).get<T>();
    } catch (const std::exception&) {
      throw Error(ErrorKind::Validation, "config key '" + key + "' has the wrong type: " + values_.at(key).dump());
    }
  }

  std::filesystem::path path(const std::string& key) const { return get<std::string>(key); }

  FilterBankConfig filter_bank() const {
    if (get<std::string>("filter.family") != "butterworth")
      throw Error(ErrorKind::Validation, "filter.family must be 'butterworth'");
    return {get<int>("filter.front_order"), get<double>("filter.front_low_hz"), get<double>("filter.front_high_hz"),
            get<int>("filter.band_order"), get<double>("filter.beta_high_hz")};
  }

  EncoderParams encoder() const {
    EncoderParams p;
    p.half_gaussian = {get<double>("encoder.mu"), get<double>("encoder.sigma"), get<int>("encoder.window_size"),
                       get<bool>("encoder.normalize")};
    p.accumulation_width = get<int>("encoder.accumulation_width");
    p.ablation_cutoff = get<double>("encoder.ablation_cutoff");
    return p;
  }

  EncoderArm encoder_arm() const {
    const auto a = get<std::string>("encoder.arm");
    if (a == "half_gaussian") return EncoderArm::HalfGaussian;
    if (a == "threshold") return EncoderArm::Threshold;
    throw Error(ErrorKind::Validation, "encoder.arm must be 'half_gaussian' or 'threshold'");
  }

  ModelConfig model() const {
    ModelConfig c;
    c.depth = get<int>("model.depth");
    c.heads = get<int>("model.heads");
    c.model_dim = get<int>("model.model_dim");
    c.attention_scale = get<double>("model.attention_scale");
    c.mlp_dim = get<int>("model.mlp_dim");
    c.dropout = get<double>("model.dropout");
    c.positional = positional_from_string(get<std::string>("model.positional"));
    c.head_init_scale = get<double>("model.head_init_scale");
    c.seq_len = static_cast<int>(kEpochSeconds * get<int>("data.sample_rate") / get<int>("encoder.accumulation_width"));
    return c;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.epochs = get<int>("train.epochs");
    t.batch_size = get<int>("train.batch_size");
    t.learning_rate = get<double>("train.learning_rate");
    t.seed = get<std::uint64_t>("seed");
    return t;
  }

  IngestOptions ingest() const {
    IngestOptions o;
    o.expected_rate_hz = get<int>("data.sample_rate");
    o.csv_rate_hz = o.expected_rate_hz;
    o.allow_resample = get<bool>("data.allow_resample");
    return o;
  }

  // Checks every typed view and the numeric invariants behind them.
  void validate_all() const {
    try {
      for (auto b : kAllBands) validate(band_spec(b, filter_bank(), get<int>("data.sample_rate")));
      validate(front_spec(filter_bank(), get<int>("data.sample_rate")));
      const auto e = encoder();
      validate(e.half_gaussian);
      if (e.accumulation_width <= 0) throw Error(ErrorKind::Validation, "encoder.accumulation_width must be positive");
      if (!(e.ablation_cutoff > 0.0 && e.ablation_cutoff <= 1.0))
        throw Error(ErrorKind::Validation, "encoder.ablation_cutoff must be in (0, 1]");
      const int epoch_len = kEpochSeconds * get<int>("data.sample_rate");
      if (epoch_len % e.accumulation_width != 0)
        throw Error(ErrorKind::Validation, "epoch length must be a multiple of encoder.accumulation_width");
      encoder_arm();
      validate(model());
      validate(train());
      if (get<int>("cv.folds") < 2) throw Error(ErrorKind::Validation, "cv.folds must be >= 2");
      if (get<int>("data.subjects") < 1) throw Error(ErrorKind::Validation, "data.subjects must be >= 1");
    } catch (const Error& err) {
      if (err.kind() == ErrorKind::Validation) throw;
      throw Error(ErrorKind::Validation, err.detail());
    }
  }

 private:
  nlohmann::json values_;
  std::map<std::string, ConfigSource> sources_;
};

}  // namespace spikesleep
