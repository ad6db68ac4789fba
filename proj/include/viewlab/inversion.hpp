#pragma once

#include <cstddef>
#include <vector>

#include <nlohmann/json.hpp>

#include "viewlab/modelzoo.hpp"
#include "viewlab/rng.hpp"

namespace viewlab {

struct DiscriminatorConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 16;
  double lr = 0.05;
  /// Std of the random latents decoded into fake images.
  double fake_latent_std = 1.0;
};

struct InversionConfig {
  double lambda_vgg = 0.1;
  double lambda_adv = 0.01;
  /// Inverter training iterations (one minibatch each).
  std::size_t encoder_steps = 300;
  std::size_t batch_size = 16;
  double encoder_lr = 1e-3;
  /// Held-out evaluation cadence during inverter training.
  std::size_t eval_every = 50;
  std::size_t latent_opt_steps = 50;
  /// Initial step of the backtracking latent search.
  double latent_step_size = 0.1;
  DiscriminatorConfig discriminator;

  void validate() const;
  nlohmann::json to_json() const;
};

struct InversionTerms {
  double reconstruction = 0.0;
  double perceptual = 0.0;
  double adversarial = 0.0;
  double total = 0.0;
};

struct InversionEvaluation {
  InversionTerms terms;
  /// d total / d w.
  Vector grad;
};

/// ||x - g(w)|| + lambda_vgg ||h(x) - h(g(w))|| + lambda_adv softplus(-d(g(w))),
/// with d(.) the discriminator's pre-activation output. d and h may be null
/// when their weight is zero.
InversionEvaluation inversion_objective(const ImageTensor& x, const LatentCode& w, const DifferentiableMap& g,
                                        const DifferentiableMap* d, const DifferentiableMap* h,
                                        const InversionConfig& cfg);

/// The objective at w = e(x).
InversionTerms inversion_loss(const ImageTensor& x, const DifferentiableMap& e, const DifferentiableMap& g,
                              const DifferentiableMap* d, const DifferentiableMap* h, const InversionConfig& cfg);

double mean_inversion_loss(const std::vector<ImageTensor>& images, const DifferentiableMap& e,
                           const DifferentiableMap& g, const DifferentiableMap* d, const DifferentiableMap* h,
                           const InversionConfig& cfg);

struct DiscriminatorReport {
  double final_loss = 0.0;
  /// Fraction of a fresh real/fake batch classified correctly.
  double accuracy = 0.0;
};

/// Logistic real-vs-generated training for a short fixed schedule; d is
/// frozen afterwards.
DiscriminatorReport pretrain_discriminator(DifferentiableMap& d, const std::vector<ImageTensor>& real,
                                           const DifferentiableMap& g, const DiscriminatorConfig& cfg,
                                           std::uint64_t seed);

struct InverterReport {
  double initial_held_out = 0.0;
  double final_held_out = 0.0;
  std::size_t steps = 0;
  /// Held-out loss at each evaluation, starting with the initial one.
  std::vector<double> curve;
};

/// Adam on the mean objective at w = e(x). Keeps the parameters with the
/// best held-out loss. Aborts if the held-out loss exceeds 10x its initial
/// value at three consecutive evaluations.
InverterReport train_inverter(const std::vector<ImageTensor>& train, const std::vector<ImageTensor>& held_out,
                              DifferentiableMap& e, const DifferentiableMap& g, const DifferentiableMap* d,
                              const DifferentiableMap* h, const InversionConfig& cfg, std::uint64_t seed);

struct LatentOptimization {
  LatentCode latent;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
};

/// Backtracking gradient descent on the objective over w from w_init. A step
/// is accepted only if it lowers the objective.
LatentOptimization optimize_latent(const ImageTensor& x, const LatentCode& w_init, const DifferentiableMap& g,
                                   const DifferentiableMap* d, const DifferentiableMap* h,
                                   const InversionConfig& cfg);
/// Warm start at e(x).
LatentOptimization optimize_latent(const ImageTensor& x, const DifferentiableMap& e, const DifferentiableMap& g,
                                   const DifferentiableMap* d, const DifferentiableMap* h,
                                   const InversionConfig& cfg);

}  // namespace viewlab
