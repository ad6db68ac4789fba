#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "viewlab/dataset.hpp"
#include "viewlab/eval.hpp"
#include "viewlab/inversion.hpp"
#include "viewlab/trainer.hpp"
#include "viewlab/viewcache.hpp"
#include "viewlab/viewgen.hpp"

namespace viewlab {

/// Library version string embedded in every artifact.
const char* version();

struct ModelConfig {
  std::size_t embedding_dim = 32;
  std::size_t predictor_hidden = 32;
};

struct ViewgenConfig {
  GeneratorOp op = GeneratorOp::w_perturb;
  WSearchConfig search;
  PerturbConfig perturb;
  double max_skip_fraction = 0.01;
};

enum class MiSpace { embedding, pixels };

std::string to_string(MiSpace s);
MiSpace mi_space_from_string(const std::string& s);

struct EvalConfig {
  ProbeConfig probe;
  MiSpace mi_space = MiSpace::embedding;
  /// Average-pooling factor applied before pixel-space MI.
  std::size_t mi_pixel_pool = 4;
};

/// Everything one experiment needs. Sections left out of a JSON document keep
/// their defaults; unknown keys anywhere are rejected. The top-level seed
/// drives every random stream (dataset, inversion, generation, training,
/// evaluation).
struct ExperimentConfig {
  BlobDatasetConfig dataset;
  ModelConfig model;
  ViewgenConfig viewgen;
  InversionConfig inversion;
  TrainConfig train;
  EvalConfig eval;
  std::uint64_t seed = 0;
  std::string output_dir = "runs";

  void validate() const;
  nlohmann::json to_json() const;
  /// Throws ConfigError naming the offending key path.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Hex digest of the canonical JSON without output_dir.
  std::string hash() const;

  /// Sections with the experiment seed and model sizes filled in.
  BlobDatasetConfig dataset_config() const;
  TrainConfig train_config() const;
};

/// Sets the value at a dotted path ("viewgen.perturb.sigma") of a config
/// document. The path must already exist.
void set_config_path(nlohmann::json& doc, const std::string& path, const nlohmann::json& value);

}  // namespace viewlab
