// viewlab: experiment runner.
//
//   viewlab make-dataset --config exp.json [--force]
//   viewlab invert | gen-views | pretrain | probe | knn | mi --config exp.json
//   viewlab plot --config exp.json [--runs a,b]
//   viewlab sweep --config exp.json --grid grid.json
//
// Results go to stdout as JSON. Failures print {"error": {...}} and exit
// nonzero.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "viewlab/pipeline.hpp"

namespace {

using nlohmann::json;
using namespace viewlab;

enum ExitCode { ok = 0, config_error = 2, missing_artifact = 3, format_error = 4, numerical_error = 5, other = 1 };

int fail(const std::string& command, const std::string& type, const std::string& message, int code,
         const std::string& required = "") {
  json err = {{"command", command}, {"type", type}, {"message", message}};
  if (!required.empty()) err["required_command"] = required;
  std::cout << json{{"error", err}}.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"viewlab: contrastive learning with generated views"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(version()));

  std::string config_path, output, grid_path, run, level = "info";
  std::optional<std::uint64_t> seed;
  bool force = false, baseline = false;
  std::vector<std::string> runs;
  app.add_option("--log-level", level, "trace, debug, info, warn, error or off");

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON); defaults apply when omitted")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--output", output, "override the config output_dir");
    sub->add_flag("--force", force, "overwrite existing outputs");
    return sub;
  };
  common(app.add_subcommand("make-dataset", "generate the procedural blob dataset"));
  common(app.add_subcommand("invert", "train the inverter and cache per-image latents"));
  common(app.add_subcommand("gen-views", "generate and cache W-search / W-perturb views"));
  auto* pre = common(app.add_subcommand("pretrain", "contrastive pretraining"));
  pre->add_flag("--baseline", baseline, "train the two-expert-view counterpart of the configured run");
  auto* prb = common(app.add_subcommand("probe", "linear probe on frozen backbone features"));
  auto* kn = common(app.add_subcommand("knn", "k-NN accuracy on frozen embeddings"));
  auto* mi = common(app.add_subcommand("mi", "MINE estimates between anchors and their views"));
  for (auto* sub : {prb, kn, mi}) sub->add_option("--run", run, "run name under <output>/runs (default: from config)");
  auto* plt = common(app.add_subcommand("plot", "overlay 5-NN curves of pretraining runs (SVG)"));
  plt->add_option("--runs", runs, "run names (default: all)")->delimiter(',');
  auto* swp = common(app.add_subcommand("sweep", "run a parameter grid, one JSON row per cell"));
  swp->add_option("--grid", grid_path, "grid spec (JSON)")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("", "UsageError", e.what(), config_error);
  }
  spdlog::set_default_logger(spdlog::stderr_color_mt("viewlab"));
  spdlog::set_level(spdlog::level::from_str(level));

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    json doc = json::object();
    if (!config_path.empty()) {
      std::ifstream is(config_path);
      try {
        doc = json::parse(is);
      } catch (const json::parse_error& e) {
        throw ConfigError(config_path + ": invalid JSON: " + e.what());
      }
    }
    if (seed) doc["seed"] = *seed;
    if (!output.empty()) doc["output_dir"] = output;
    const ExperimentConfig cfg = ExperimentConfig::from_json(doc);

    json result;
    if (command == "make-dataset") result = make_dataset(cfg, force);
    else if (command == "invert") result = invert(cfg);
    else if (command == "gen-views") result = gen_views(cfg);
    else if (command == "pretrain") result = pretrain_run(cfg, baseline);
    else if (command == "probe") result = probe(cfg, run);
    else if (command == "knn") result = knn(cfg, run);
    else if (command == "mi") result = mutual_information(cfg, run);
    else if (command == "plot") result = plot(cfg, runs);
    else if (command == "sweep") {
      std::ifstream is(grid_path);
      json grid;
      try {
        grid = json::parse(is);
      } catch (const json::parse_error& e) {
        throw ConfigError(grid_path + ": invalid JSON: " + e.what());
      }
      result = sweep(cfg, grid);
    }
    std::cout << result.dump() << std::endl;
    return ok;
  } catch (const MissingArtifact& e) {
    return fail(command, "MissingArtifact", e.what(), missing_artifact, e.required_command());
  } catch (const ConfigError& e) {
    return fail(command, "ConfigError", e.what(), config_error);
  } catch (const FormatError& e) {
    return fail(command, "FormatError", e.what(), format_error);
  } catch (const NumericalError& e) {
    return fail(command, "NumericalError", e.what(), numerical_error);
  } catch (const std::exception& e) {
    return fail(command, "Error", e.what(), other);
  }
}
