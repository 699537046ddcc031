#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "spikesleep/error.hpp"
#include "spikesleep/spike_encoder.hpp"

namespace spikesleep {

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline nlohmann::json encoder_params_json(const EncoderParams& p, EncoderArm arm) {
  return {{"arm", to_string(arm)},
          {"mu", p.half_gaussian.mu},
          {"sigma", p.half_gaussian.sigma},
          {"window_size", p.half_gaussian.window_size},
          {"normalize", p.half_gaussian.normalize_to_unit_peak},
          {"accumulation_width", p.accumulation_width},
          {"ablation_cutoff", p.ablation_cutoff}};
}

// Paths for a feature file: `<base>.f32` and `<base>.meta.json`.
struct FeaturePaths {
  std::filesystem::path data;
  std::filesystem::path meta;

  static FeaturePaths from_base(const std::filesystem::path& base) {
    return {base.string() + ".f32", base.string() + ".meta.json"};
  }
};

inline void save_features(const std::filesystem::path& base, const FeatureEpoch& fe, const nlohmann::json& params) {
  const auto paths = FeaturePaths::from_base(base);
  std::string bytes;
  bytes.reserve(fe.data.size() * 4);
  for (float v : fe.data) detail::put_u32_le(bytes, std::bit_cast<std::uint32_t>(v));
  {
    std::ofstream out(paths.data, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + paths.data.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  nlohmann::json meta = {{"subject_id", fe.subject_id},
                         {"epoch_index", fe.epoch_index},
                         {"stage", fe.stage ? nlohmann::json(to_string(*fe.stage)) : nlohmann::json(nullptr)},
                         {"T", fe.rows},
                         {"columns", feature_column_names()},
                         {"params", params}};
  std::ofstream out(paths.meta);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + paths.meta.string());
  out << meta.dump(2) << '\n';
}

struct LoadedFeatures {
  FeatureEpoch features;
  nlohmann::json params;
};

inline LoadedFeatures load_features(const std::filesystem::path& base) {
  const auto paths = FeaturePaths::from_base(base);
  std::ifstream meta_in(paths.meta);
  if (!meta_in) throw Error(ErrorKind::FileNotFound, paths.meta.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_in);
  } catch (const std::exception& e) {
    throw Error(ErrorKind::ParseError, paths.meta.string() + ": " + e.what());
  }
  std::ifstream in(paths.data, std::ios::binary);
  if (!in) throw Error(ErrorKind::FileNotFound, paths.data.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  LoadedFeatures out;
  try {
    out.features.rows = meta.at("T").get<std::size_t>();
    out.features.subject_id = meta.at("subject_id").get<std::string>();
    out.features.epoch_index = meta.at("epoch_index").get<std::size_t>();
    if (!meta.at("stage").is_null()) out.features.stage = parse_stage_label(meta.at("stage").get<std::string>());
    out.params = meta.at("params");
    if (meta.at("columns").size() != static_cast<std::size_t>(kFeatureColumns))
      throw Error(ErrorKind::ShapeMismatch, paths.meta.string() + ": column count");
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::ParseError, paths.meta.string() + ": " + e.what());
  }
  const std::size_t expected = out.features.rows * kFeatureColumns * 4;
  if (bytes.size() != expected)
    throw Error(ErrorKind::ParseError, paths.data.string() + ": " + std::to_string(bytes.size()) + " bytes, expected " +
                                           std::to_string(expected));
  out.features.data.resize(out.features.rows * kFeatureColumns);
  for (std::size_t i = 0; i < out.features.data.size(); ++i)
    out.features.data[i] = std::bit_cast<float>(detail::get_u32_le(bytes.data() + 4 * i));
  return out;
}

}  // namespace spikesleep
