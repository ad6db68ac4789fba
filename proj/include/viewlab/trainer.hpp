#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "viewlab/batching.hpp"
#include "viewlab/dataset.hpp"
#include "viewlab/losses.hpp"
#include "viewlab/modelzoo.hpp"
#include "viewlab/optim.hpp"
#include "viewlab/viewcache.hpp"
#include "viewlab/viewgen.hpp"

namespace viewlab {

/// How generated views enter a batch. a1_replace swaps the second expert view
/// for a weakly transformed cached view; a2_multiview appends cached views as
/// extra positives.
enum class Assimilation { baseline, a1_replace, a2_multiview };
enum class ViewSource { expert, w_search_cache, w_perturb_cache };

std::string to_string(Assimilation a);
Assimilation assimilation_from_string(const std::string& s);
std::string to_string(ViewSource s);
ViewSource view_source_from_string(const std::string& s);

struct TrainConfig {
  Assimilation assimilation = Assimilation::baseline;
  ViewSource view_source = ViewSource::expert;
  SgdConfig optimizer{0.05, 0.9, 5e-4};
  bool cosine_decay = true;
  std::size_t batch_size = 64;
  std::size_t epochs = 50;
  LossConfig loss{0.5, 0.5, LossVariant::simclr, false, Reduction::mean, SimSiamSign::negative_cosine};
  /// Cached views appended per anchor (A2 only).
  std::size_t generated_views = 1;
  TransformConfig expert = TransformConfig::full();
  TransformConfig weak = TransformConfig::weak();
  /// Apply the weak preset to A2's appended views as well as A1's.
  bool weak_on_generated = true;
  /// 5-NN evaluation cadence in epochs; the last epoch is always evaluated.
  std::size_t knn_every = 5;
  std::size_t knn_k = 5;
  std::size_t embedding_dim = 32;
  std::size_t predictor_hidden = 32;
  std::uint64_t seed = 0;

  /// Throws ConfigError on bad sizes or a loss variant that does not fit the
  /// assimilation mode.
  void validate() const;

  /// "desk" (the defaults) or the full-scale schedules "cifar10", "cifar100",
  /// "tinyimagenet". The latter are far beyond desk budgets.
  static TrainConfig preset(const std::string& name);
};

/// Learning rate at step of total_steps; steps past the end clamp to 0.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

/// Views for the given anchors. Randomness comes from the per-anchor stream
/// (seed, epoch, anchor id), so the result does not depend on batch order.
/// cache is required unless view_source is expert.
MultiviewBatch assemble_views(const Dataset& ds, const std::vector<std::size_t>& anchors, const TrainConfig& cfg,
                              const ViewCache* cache, std::size_t epoch);

/// Encoder plus optional predictor and their optimizer state.
struct TrainState {
  Network encoder;
  std::optional<Network> predictor;
  Sgd encoder_opt;
  Sgd predictor_opt;
  std::size_t step = 0;

  static TrainState create(const ImageShape& image, const TrainConfig& cfg);
};

/// One momentum-SGD update at the given learning rate; returns the loss
/// before the update. Fills batch.embeddings.
double train_step(MultiviewBatch& batch, TrainState& state, const TrainConfig& cfg, double lr);

struct PretrainReport {
  std::vector<double> step_losses;
  /// (epoch, 5-NN accuracy) at the evaluation cadence.
  std::vector<std::pair<std::size_t, double>> knn_curve;
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
};

struct PretrainOutputs {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  /// Written into the checkpoint header and as a comment line atop the CSV.
  nlohmann::json provenance = nlohmann::json::object();
};

/// Runs cfg.epochs over train, evaluating 5-NN of test against train. The
/// metric CSV has columns step,epoch,lr,loss,knn5_acc with one row per step;
/// knn5_acc is empty except on evaluation steps.
PretrainReport pretrain(const TrainConfig& cfg, const Dataset& train, const Dataset& test, const ViewCache* cache,
                        const PretrainOutputs& out, TrainState* state_out = nullptr);

}  // namespace viewlab
