#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "viewlab/config.hpp"

namespace viewlab {

/// An input produced by an earlier pipeline stage is absent.
class MissingArtifact : public ConfigError {
 public:
  MissingArtifact(const std::filesystem::path& path, const std::string& command, const std::string& hint = "");
  const std::string& required_command() const { return command_; }

 private:
  std::string command_;
};

/// Artifact locations under an experiment's output directory.
struct Workspace {
  std::filesystem::path root;

  explicit Workspace(std::filesystem::path r) : root(std::move(r)) {}
  std::filesystem::path dataset_dir() const { return root / "dataset"; }
  std::filesystem::path inversion_dir() const { return root / "inversion"; }
  std::filesystem::path latents() const { return inversion_dir() / "latents.vlvc"; }
  std::filesystem::path inverter() const { return inversion_dir() / "inverter.vlck"; }
  std::filesystem::path view_cache(GeneratorOp op) const { return root / "views" / (to_string(op) + ".vlvc"); }
  std::filesystem::path run_dir(const std::string& run) const { return root / "runs" / run; }
  std::filesystem::path encoder(const std::string& run) const { return run_dir(run) / "encoder.vlck"; }
  std::filesystem::path metrics(const std::string& run) const { return run_dir(run) / "metrics.csv"; }
};

/// "baseline", "a1-w_perturb", "a2-w_search", ... (suffixed "-simsiam" etc.
/// when the loss is not the mode's default contrastive family).
std::string run_name(const TrainConfig& t);
/// The two-expert-view counterpart of t, with the non-A2 loss of the same family.
TrainConfig baseline_of(const TrainConfig& t);

/// {config_hash, seed, version}.
nlohmann::json provenance(const ExperimentConfig& cfg);

// Pipeline stages. Each writes its artifacts under cfg.output_dir and returns
// a JSON summary that is also written next to them.

nlohmann::json make_dataset(const ExperimentConfig& cfg, bool force);
nlohmann::json invert(const ExperimentConfig& cfg);
nlohmann::json gen_views(const ExperimentConfig& cfg);
/// Trains the run described by cfg.train (its baseline counterpart when
/// baseline is set).
nlohmann::json pretrain_run(const ExperimentConfig& cfg, bool baseline = false);
/// Evaluations default to the run described by cfg.train.
nlohmann::json probe(const ExperimentConfig& cfg, const std::string& run = "");
nlohmann::json knn(const ExperimentConfig& cfg, const std::string& run = "");
/// MINE between each training image and (a) an expert view of it and (b) a
/// cached generated view, when a cache exists.
nlohmann::json mutual_information(const ExperimentConfig& cfg, const std::string& run = "");
/// Overlays the 5-NN curves of the given runs (all runs when empty).
nlohmann::json plot(const ExperimentConfig& cfg, const std::vector<std::string>& runs);

/// Grid spec: {"axes": [{path: [values], ...}, ...], "steps": [...]} where
/// paths within one axis vary together and axes form a Cartesian product.
/// {"parameters": {path: [values]}} is shorthand for one axis per path.
/// Steps name pipeline stages; "pretrain-baseline" trains the baseline
/// counterpart. A failing cell is recorded and the sweep continues.
nlohmann::json sweep(const ExperimentConfig& cfg, const nlohmann::json& grid);

struct Curve {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

/// Reads the (epoch, knn5_acc) points of a metric CSV.
Curve read_knn_curve(const std::filesystem::path& csv, const std::string& label);
/// Line chart of the curves as an SVG document.
std::string render_svg(const std::vector<Curve>& curves, const std::string& title, const std::string& x_label,
                       const std::string& y_label);

}  // namespace viewlab
