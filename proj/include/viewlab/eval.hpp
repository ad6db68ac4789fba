#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "viewlab/dataset.hpp"
#include "viewlab/modelzoo.hpp"
#include "viewlab/optim.hpp"

namespace viewlab {

struct MineConfig {
  std::vector<std::size_t> hidden{128, 128};
  std::size_t steps = 3000;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  /// Decay of the moving average that debiases the log-partition gradient.
  double ema_decay = 0.99;
  double held_out_fraction = 0.2;
  std::size_t eval_every = 100;
  /// Final estimate averages this many trailing held-out evaluations.
  std::size_t smoothing = 5;
  /// Bounds above this abort the run as unstable.
  double max_nats = 20.0;

  void validate() const;
};

struct ProbeConfig {
  std::size_t epochs = 100;
  SgdConfig optimizer{0.1, 0.9, 0.0};
  std::size_t batch_size = 64;
  bool cosine_decay = true;
  /// Standardize features with train-split statistics before probing.
  bool standardize = true;
  std::size_t k = 5;
  MineConfig mine;

  void validate() const;
};

/// One row per image.
Matrix embed(const DifferentiableMap& f, const std::vector<ImageTensor>& images);
/// Backbone features (Network::features) per image.
Matrix backbone_features(const Network& f, const std::vector<ImageTensor>& images);

/// Softmax regression trained with momentum SGD on fixed features; returns
/// top-1 test accuracy.
double linear_probe(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& test_x,
                    const std::vector<int>& test_y, std::size_t classes, const ProbeConfig& cfg, std::uint64_t seed);
/// Probe on the frozen encoder's backbone features.
double linear_probe(const Network& f, const Dataset& train, const Dataset& test, const ProbeConfig& cfg,
                    std::uint64_t seed);

/// Majority vote among the k most cosine-similar training rows. Neighbours
/// are ranked by (similarity desc, index asc); a tied vote goes to the label
/// whose first neighbour ranks highest.
std::vector<int> knn_predict(const Matrix& train_z, const std::vector<int>& train_y, const Matrix& test_z,
                             std::size_t k);
double knn_accuracy(const Matrix& train_z, const std::vector<int>& train_y, const Matrix& test_z,
                    const std::vector<int>& test_y, std::size_t k);
/// k-NN accuracy on normalized encoder embeddings.
double knn_eval(const DifferentiableMap& f, const Dataset& train, const Dataset& test, std::size_t k);

struct MineResult {
  /// Smoothed held-out bound clamped at zero (nats).
  double estimate = 0.0;
  /// Smoothed held-out bound before clamping.
  double bound = 0.0;
  /// Held-out bound at every evaluation.
  std::vector<double> curve;
};

/// Donsker-Varadhan mutual information estimate between paired rows of u and
/// v. The marginal is formed by shuffling v within each batch.
MineResult mine_estimate(const Matrix& u, const Matrix& v, const MineConfig& cfg, std::uint64_t seed);

/// {metric, value, config_hash, seed}.
nlohmann::json metric_row(const std::string& metric, double value, const std::string& config_hash,
                          std::uint64_t seed);

}  // namespace viewlab
