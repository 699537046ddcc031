#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "spikesleep/spikesleep.hpp"

using namespace spikesleep;

namespace {

struct Flags {
  std::string config;
  std::optional<std::string> out, channel;
  std::optional<std::uint64_t> seed;
  std::optional<double> sigma, ablation_threshold;
  std::optional<int> window_size, accum_width, folds;
  bool dry_run = false;
  std::string run_dir;
};

void add_shared(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "flat JSON config file");
  sub->add_option("--out", f.out, "output directory");
  sub->add_option("--seed", f.seed, "random seed");
  sub->add_option("--channel", f.channel, "EEG channel name");
  sub->add_option("--sigma", f.sigma, "half-Gaussian sigma");
  sub->add_option("--window-size", f.window_size, "standardization window in samples");
  sub->add_option("--accum-width", f.accum_width, "accumulation width in samples");
  sub->add_option("--ablation-threshold", f.ablation_threshold, "use the threshold encoder with this cutoff");
  sub->add_option("--folds", f.folds, "number of cross-validation folds");
  sub->add_flag("--dry-run", f.dry_run, "validate without writing");
}

RunConfig resolve(const Flags& f) {
  RunConfig cfg;
  if (!f.config.empty()) cfg.merge_file(f.config);
  nlohmann::json flags = nlohmann::json::object();
  if (f.out) flags["out"] = *f.out;
  if (f.seed) flags["seed"] = *f.seed;
  if (f.channel) flags["data.channel"] = *f.channel;
  if (f.sigma) flags["encoder.sigma"] = *f.sigma;
  if (f.window_size) flags["encoder.window_size"] = *f.window_size;
  if (f.accum_width) flags["encoder.accumulation_width"] = *f.accum_width;
  if (f.ablation_threshold) {
    flags["encoder.arm"] = "threshold";
    flags["encoder.ablation_cutoff"] = *f.ablation_threshold;
  }
  if (f.folds) flags["cv.folds"] = *f.folds;
  cfg.merge(flags, ConfigSource::Flag);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spike-train sleep staging"};
  app.require_subcommand(1);
  Flags f;
  std::vector<std::pair<std::string, CLI::App*>> subs;
  for (const char* name : {"synth", "encode", "train", "cv", "ablate"}) {
    auto* sub = app.add_subcommand(name);
    add_shared(sub, f);
    subs.emplace_back(name, sub);
  }
  auto* report = app.add_subcommand("report", "render the tables of a finished run");
  report->add_option("run", f.run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (report->parsed()) {
      cmd_report(f.run_dir, std::cout);
      return kExitOk;
    }
    const auto cfg = resolve(f);
    for (const auto& [name, sub] : subs) {
      if (!sub->parsed()) continue;
      if (name == "synth") cmd_synth(cfg, f.dry_run, std::cout);
      else if (name == "encode") cmd_encode(cfg, f.dry_run, std::cout);
      else if (name == "train") cmd_train(cfg, f.dry_run, std::cout);
      else if (name == "cv") cmd_cv(cfg, f.dry_run, std::cout);
      else cmd_ablate(cfg, f.dry_run, std::cout);
    }
    return kExitOk;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
