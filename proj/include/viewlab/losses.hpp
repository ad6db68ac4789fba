#pragma once

#include <string>

#include "viewlab/batching.hpp"
#include "viewlab/modelzoo.hpp"

namespace viewlab {

enum class LossVariant { simclr, infonce, a2_simclr, a2_infonce, a2_full, simsiam, a2_simsiam };
enum class Reduction { sum, mean };
/// Sign of D in the generated-view term of A2-SimSiam.
enum class SimSiamSign { negative_cosine, cosine };

std::string to_string(LossVariant v);
LossVariant loss_variant_from_string(const std::string& s);
bool is_a2(LossVariant v);
bool uses_predictor(LossVariant v);

struct LossConfig {
  double temperature = 0.5;
  double alpha = 0.5;
  LossVariant variant = LossVariant::a2_infonce;
  /// Adds generated views to the denominators of A2-SimCLR / A2-InfoNCE.
  /// A2-full always contrasts against every other view.
  bool include_generated_negatives = false;
  Reduction reduction = Reduction::sum;
  SimSiamSign a2_simsiam_sign = SimSiamSign::negative_cosine;

  void validate() const;
};

/// Loss value, its gradient with respect to the (unit-norm) embedding rows,
/// and the predictor parameter gradient for the SimSiam variants.
struct LossResult {
  double value = 0.0;
  Matrix grad;
  Vector predictor_grad;
};

// All losses take one embedding row per view of the index map. Rows must be
// unit-norm to within 1e-6. Log-sum-exp terms are max-shifted.

/// -sum_i log( exp(z_i.z_j(i)/t) / sum_{a in A(i)} exp(z_i.z_a/t) ) over the
/// expert views. Requires a batch without generated views.
LossResult simclr_loss(const Matrix& z, const IndexMap& index, const LossConfig& cfg);
/// Two-set InfoNCE: anchors in I1 contrast against I2 and vice versa.
LossResult infonce_two_set(const Matrix& z, const IndexMap& index, const LossConfig& cfg);
/// sum_i alpha/|k(i)| sum_{p in k(i)} z_i.z_p / t over expert views.
LossResult align_term(const Matrix& z, const IndexMap& index, const LossConfig& cfg);
/// A2-SimCLR, A2-InfoNCE (base loss minus align_term) or A2-full.
LossResult a2_loss(const Matrix& z, const IndexMap& index, const LossConfig& cfg);
/// Symmetric stop-gradient loss with D = negative cosine, mean over anchors.
LossResult simsiam_loss(const Matrix& z, const IndexMap& index, const DifferentiableMap& predictor,
                        const LossConfig& cfg);
/// simsiam_loss + sum_i alpha/|k(i)| sum_{p in k(i)} D(pred(z_p), stop(z_i)).
LossResult a2_simsiam_loss(const Matrix& z, const IndexMap& index,
                           const DifferentiableMap& predictor, const LossConfig& cfg);

/// Dispatches on cfg.variant. predictor is required for the SimSiam variants.
LossResult compute_loss(const Matrix& z, const IndexMap& index, const LossConfig& cfg,
                        const DifferentiableMap* predictor = nullptr);
LossResult compute_loss(const MultiviewBatch& batch, const LossConfig& cfg,
                        const DifferentiableMap* predictor = nullptr);

}  // namespace viewlab
