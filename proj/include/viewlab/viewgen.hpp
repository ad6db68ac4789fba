#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "viewlab/core.hpp"
#include "viewlab/modelzoo.hpp"
#include "viewlab/rng.hpp"

namespace viewlab {

// ---------------------------------------------------------------------------
// Expert transformations

enum class TransformPreset { full, weak, custom };

struct TransformConfig {
  double crop_scale_low = 0.2;
  double crop_scale_high = 1.0;
  double aspect_low = 3.0 / 4.0;
  double aspect_high = 4.0 / 3.0;
  double flip_probability = 0.5;
  /// Brightness, contrast and saturation factors are drawn from [1-s, 1+s].
  double color_jitter_strength = 0.4;
  TransformPreset preset = TransformPreset::full;

  static TransformConfig full();
  /// Crop scale [0.8, 1], flip 0.5, no colour jitter.
  static TransformConfig weak();
  static TransformConfig identity();

  void validate() const;
};

std::string to_string(TransformPreset p);
TransformPreset transform_preset_from_string(const std::string& s);

/// Random-resized-crop (bilinear, back to the input size), horizontal flip,
/// then colour jitter. Output stays in [0, 1].
ImageTensor expert_transform(const ImageTensor& x, const ImageShape& shape,
                             const TransformConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// W-search

enum class InitPolicy { inverted_anchor_plus_noise, random };
/// Space in which the pairwise spread of the views is measured.
enum class DiversitySpace { embedding, latent };
/// Boundary penalty delta(eps, d).
enum class BoundaryPenalty { squared, huber };

std::string to_string(InitPolicy p);
InitPolicy init_policy_from_string(const std::string& s);
std::string to_string(DiversitySpace s);
DiversitySpace diversity_space_from_string(const std::string& s);
std::string to_string(BoundaryPenalty p);
BoundaryPenalty boundary_penalty_from_string(const std::string& s);

struct WSearchConfig {
  double epsilon1 = 0.3;
  double epsilon2 = 0.5;
  double lambda = 0.01;
  std::size_t views = 8;
  std::size_t steps = 200;
  double step_size = 0.05;
  InitPolicy init_policy = InitPolicy::inverted_anchor_plus_noise;
  /// Stops once a step moves the latents by less than this (L2 over all views).
  double tol = 1e-6;
  /// Initial noise std, as a multiple of epsilon1.
  double init_noise = 0.01;
  /// Std of the random init policy.
  double random_init_std = 1.0;
  DiversitySpace diversity = DiversitySpace::embedding;
  BoundaryPenalty penalty = BoundaryPenalty::squared;
  double huber_delta = 0.05;
  /// Measure distances between normalized embeddings. Off for raw-space
  /// setups such as f = g = identity.
  bool normalize = true;

  void validate() const;
};

/// Objective value and its gradient with respect to every latent.
struct WSearchObjective {
  double value = 0.0;
  double boundary = 0.0;
  double uniformity = 0.0;
  /// ||f(g(w_k)) - f(x0)|| - epsilon1 per view.
  std::vector<double> residuals;
  double mean_pairwise = 0.0;
  std::vector<Vector> grad;
};

/// (1/n) sum_k delta(eps1, ||z_k - z0||) + lambda (eps2 - mean pairwise)^+.
WSearchObjective w_search_objective(const std::vector<LatentCode>& latents,
                                    const Vector& anchor_embedding, const DifferentiableMap& f,
                                    const DifferentiableMap& g, const WSearchConfig& cfg);

/// f(x0), normalized when cfg.normalize is set.
Vector anchor_embedding(const DifferentiableMap& f, const ImageTensor& x0, const WSearchConfig& cfg);

struct WSearchResult {
  std::vector<LatentCode> latents;
  std::vector<ImageTensor> images;
  std::vector<double> residuals;
  double objective = 0.0;
  double mean_pairwise = 0.0;
  std::size_t iterations = 0;
  bool converged = false;

  double mean_abs_residual() const;
};

/// Gradient descent on w_search_objective. anchor_latent seeds the
/// inverted_anchor_plus_noise policy and may be null for the random policy.
WSearchResult w_search(const ImageTensor& x0, const DifferentiableMap& f, const DifferentiableMap& g,
                       const LatentCode* anchor_latent, const WSearchConfig& cfg, Rng& rng);
/// As above with the anchor latent computed as e(x0).
WSearchResult w_search(const ImageTensor& x0, const DifferentiableMap& f, const DifferentiableMap& g,
                       const DifferentiableMap& e, const WSearchConfig& cfg, Rng& rng);

/// w - step * sign(grad); zero gradient coordinates stay put.
LatentCode sign_gradient_step(const LatentCode& w, const Vector& grad, double step);

/// One fast-sign step on the single-view boundary objective. Kept as an
/// ablation; it trains worse than plain expert views.
LatentCode w_search_online_1step(const ImageTensor& x0, const DifferentiableMap& f,
                                 const DifferentiableMap& g, const LatentCode& w_init,
                                 double epsilon1, double step, bool normalize = true);

// ---------------------------------------------------------------------------
// W-perturb

struct PerturbConfig {
  double sigma = 0.2;
  std::size_t count = 8;

  void validate() const;
};

/// Gaussian noise with std sigma per coordinate.
Vector sample_perturbation(std::size_t dim, double sigma, Rng& rng);

struct PerturbResult {
  std::vector<LatentCode> latents;
  std::vector<ImageTensor> images;
};

/// g(w + w_p) for count draws of w_p.
PerturbResult w_perturb(const LatentCode& anchor_latent, const DifferentiableMap& g,
                        const PerturbConfig& cfg, Rng& rng);
PerturbResult w_perturb(const ImageTensor& x, const DifferentiableMap& g, const DifferentiableMap& e,
                        const PerturbConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Epsilon calibration

enum class CalibrationSpace { embedding, latent };

struct EpsilonEstimate {
  double epsilon1 = 0.0;
  double epsilon2 = 0.0;
  double stddev = 0.0;
  std::size_t samples = 0;
};

/// Mean ||f(x) - f(t(x))|| over the sample for expert transforms t (or the
/// same distance between inverted latents in latent space, which needs e).
/// epsilon2 = epsilon1 + margin.
EpsilonEstimate calibrate_epsilon(const DifferentiableMap& f, const std::vector<ImageTensor>& sample,
                                  const ImageShape& shape, const TransformConfig& transform,
                                  std::uint64_t seed, CalibrationSpace space = CalibrationSpace::embedding,
                                  const DifferentiableMap* e = nullptr, double margin = 0.2);

}  // namespace viewlab
