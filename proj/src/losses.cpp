#include "viewlab/losses.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <utility>

namespace viewlab {

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::simclr: return "SimCLR";
    case LossVariant::infonce: return "InfoNCE";
    case LossVariant::a2_simclr: return "A2-SimCLR";
    case LossVariant::a2_infonce: return "A2-InfoNCE";
    case LossVariant::a2_full: return "A2-full";
    case LossVariant::simsiam: return "SimSiam";
    case LossVariant::a2_simsiam: return "A2-SimSiam";
  }
  return "?";
}

// Case-insensitive; '_' and '-' are interchangeable ("a2_infonce").
LossVariant loss_variant_from_string(const std::string& s) {
  auto key = [](std::string t) {
    for (auto& c : t) c = c == '_' ? '-' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return t;
  };
  for (auto v : {LossVariant::simclr, LossVariant::infonce, LossVariant::a2_simclr,
                 LossVariant::a2_infonce, LossVariant::a2_full, LossVariant::simsiam,
                 LossVariant::a2_simsiam}) {
    if (key(to_string(v)) == key(s)) return v;
  }
  throw ConfigError("unknown loss variant: " + s);
}

bool is_a2(LossVariant v) {
  return v == LossVariant::a2_simclr || v == LossVariant::a2_infonce || v == LossVariant::a2_full ||
         v == LossVariant::a2_simsiam;
}

bool uses_predictor(LossVariant v) { return v == LossVariant::simsiam || v == LossVariant::a2_simsiam; }

void LossConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("loss temperature must be positive");
  if (!(alpha >= 0.0)) throw ConfigError("loss alpha must be non-negative");
}

namespace {

void check_embeddings(const Matrix& z, const IndexMap& index) {
  if (static_cast<std::size_t>(z.rows()) != index.size())
    throw ConfigError("loss: " + std::to_string(z.rows()) + " embeddings for " +
                      std::to_string(index.size()) + " views");
  if (index.anchors() < 2) throw ConfigError("loss: batch needs at least two anchors");
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double n = z.row(r).norm();
    if (!std::isfinite(n) || std::abs(n - 1.0) > 1e-6)
      throw ConfigError("loss: embedding row " + std::to_string(r) + " is not unit-norm (|z| = " +
                        std::to_string(n) + ")");
  }
}

double anchor_scale(const IndexMap& index, const LossConfig& cfg) {
  return cfg.reduction == Reduction::mean ? 1.0 / static_cast<double>(index.expert_count()) : 1.0;
}

/// Adds  scale * ( -sum_p w_p s_ip / t + logsumexp_{a in C} s_ia / t )  and its
/// gradient. Returns the unscaled row value.
double contrastive_row(const Matrix& z, std::size_t i,
                       const std::vector<std::pair<std::size_t, double>>& positives,
                       const std::vector<std::size_t>& candidates, double tau, double scale,
                       Matrix& grad) {
  const auto zi = z.row(static_cast<Eigen::Index>(i));
  std::vector<double> logits(candidates.size());
  double mx = -INFINITY;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    logits[c] = zi.dot(z.row(static_cast<Eigen::Index>(candidates[c]))) / tau;
    mx = std::max(mx, logits[c]);
  }
  double sum = 0.0;
  for (auto& l : logits) {
    l = std::exp(l - mx);
    sum += l;
  }
  double value = mx + std::log(sum);
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const double p = logits[c] / sum * scale / tau;
    const auto a = static_cast<Eigen::Index>(candidates[c]);
    grad.row(static_cast<Eigen::Index>(i)) += p * z.row(a);
    grad.row(a) += p * zi;
  }
  for (const auto& [pi, w] : positives) {
    const auto p = static_cast<Eigen::Index>(pi);
    value -= w * zi.dot(z.row(p)) / tau;
    const double c = w * scale / tau;
    grad.row(static_cast<Eigen::Index>(i)) -= c * z.row(p);
    grad.row(p) -= c * zi;
  }
  return value;
}

std::vector<std::size_t> all_generated(const IndexMap& index) {
  std::vector<std::size_t> out;
  for (std::size_t i = index.expert_count(); i < index.size(); ++i) out.push_back(i);
  return out;
}

LossResult simclr_core(const Matrix& z, const IndexMap& index, const LossConfig& cfg, bool with_generated) {
  LossResult r;
  r.grad = Matrix::Zero(z.rows(), z.cols());
  const double scale = anchor_scale(index, cfg);
  const auto gen = with_generated ? all_generated(index) : std::vector<std::size_t>{};
  const std::size_t n2 = index.expert_count();
  for (std::size_t i = 0; i < n2; ++i) {
    std::vector<std::size_t> cand;
    cand.reserve(n2 - 1 + gen.size());
    for (std::size_t a = 0; a < n2; ++a)
      if (a != i) cand.push_back(a);
    cand.insert(cand.end(), gen.begin(), gen.end());
    r.value += scale * contrastive_row(z, i, {{index.partner(i), 1.0}}, cand, cfg.temperature, scale, r.grad);
  }
  return r;
}

LossResult infonce_core(const Matrix& z, const IndexMap& index, const LossConfig& cfg, bool with_generated) {
  LossResult r;
  r.grad = Matrix::Zero(z.rows(), z.cols());
  const double scale = anchor_scale(index, cfg);
  const auto gen = with_generated ? all_generated(index) : std::vector<std::size_t>{};
  for (std::size_t i = 0; i < index.expert_count(); ++i) {
    auto cand = index.opposite_set(i);
    cand.insert(cand.end(), gen.begin(), gen.end());
    r.value += scale * contrastive_row(z, i, {{index.partner(i), 1.0}}, cand, cfg.temperature, scale, r.grad);
  }
  return r;
}

void subtract(LossResult& base, const LossResult& other) {
  base.value -= other.value;
  base.grad -= other.grad;
}

/// D(p, t) = sign * p.t / (|p||t|) and its gradient with respect to p.
double cosine_term(const Vector& p, const Vector& t, double sign, Vector& grad_p) {
  const double np = p.norm(), nt = t.norm();
  if (np == 0.0 || nt == 0.0) {
    grad_p = Vector::Zero(p.size());
    return 0.0;
  }
  const Vector ph = p / np, th = t / nt;
  const double c = ph.dot(th);
  grad_p = sign * (th - c * ph) / np;
  return sign * c;
}

void check_predictor(const DifferentiableMap& predictor, const Matrix& z) {
  const auto k = static_cast<std::size_t>(z.cols());
  if (predictor.input_size() != k || predictor.output_size() != k)
    throw ConfigError("predictor maps " + std::to_string(predictor.input_size()) + " -> " +
                      std::to_string(predictor.output_size()) + " but embeddings have dim " +
                      std::to_string(k));
}

/// Adds weight * D(pred(z_src), stop(z_tgt)) to r.
void predicted_cosine(const Matrix& z, std::size_t src, std::size_t tgt,
                      const DifferentiableMap& predictor, double weight, double sign, LossResult& r) {
  const Vector zs = z.row(static_cast<Eigen::Index>(src)).transpose();
  const Vector zt = z.row(static_cast<Eigen::Index>(tgt)).transpose();
  auto lin = predictor.linearize(zs);
  Vector gp;
  r.value += weight * cosine_term(lin.value, zt, sign, gp);
  const Vector gz = lin.pullback(weight * gp, &r.predictor_grad);
  r.grad.row(static_cast<Eigen::Index>(src)) += gz.transpose();
}

}  // namespace

LossResult simclr_loss(const Matrix& z, const IndexMap& index, const LossConfig& cfg) {
  cfg.validate();
  check_embeddings(z, index);
  if (index.generated_per_anchor() != 0)
    throw ConfigError("simclr_loss expects a two-view batch; use a2_loss for generated views");
  return simclr_core(z, index, cfg, false);
}

LossResult infonce_two_set(const Matrix& z, const IndexMap& index, const LossConfig& cfg) {
  cfg.validate();
  check_embeddings(z, index);
  if (index.generated_per_anchor() != 0)
    throw ConfigError("infonce_two_set expects a two-view batch; use a2_loss for generated views");
  return infonce_core(z, index, cfg, false);
}

LossResult align_term(const Matrix& z, const IndexMap& index, const LossConfig& cfg) {
  cfg.validate();
  check_embeddings(z, index);
  LossResult r;
  r.grad = Matrix::Zero(z.rows(), z.cols());
  const double scale = anchor_scale(index, cfg);
  for (std::size_t i = 0; i < index.expert_count(); ++i) {
    const auto k = index.generated(i);
    if (k.empty()) throw ConfigError("align_term: anchor " + std::to_string(i) + " has no generated views");
    const double w = scale * cfg.alpha / (static_cast<double>(k.size()) * cfg.temperature);
    const auto ii = static_cast<Eigen::Index>(i);
    for (auto p : k) {
      const auto pp = static_cast<Eigen::Index>(p);
      r.value += w * z.row(ii).dot(z.row(pp));
      r.grad.row(ii) += w * z.row(pp);
      r.grad.row(pp) += w * z.row(ii);
    }
  }
  return r;
}

LossResult a2_loss(const Matrix& z, const IndexMap& index, const LossConfig& cfg) {
  cfg.validate();
  check_embeddings(z, index);
  switch (cfg.variant) {
    case LossVariant::a2_simclr: {
      auto r = simclr_core(z, index, cfg, cfg.include_generated_negatives);
      subtract(r, align_term(z, index, cfg));
      return r;
    }
    case LossVariant::a2_infonce: {
      auto r = infonce_core(z, index, cfg, cfg.include_generated_negatives);
      subtract(r, align_term(z, index, cfg));
      return r;
    }
    case LossVariant::a2_full: {
      LossResult r;
      r.grad = Matrix::Zero(z.rows(), z.cols());
      const double scale = anchor_scale(index, cfg);
      for (std::size_t i = 0; i < index.expert_count(); ++i) {
        const auto pos = index.positives(i);
        std::vector<std::pair<std::size_t, double>> weighted;
        for (auto p : pos) weighted.emplace_back(p, 1.0 / static_cast<double>(pos.size()));
        r.value += scale * contrastive_row(z, i, weighted, index.complement(i), cfg.temperature, scale, r.grad);
      }
      return r;
    }
    default:
      throw ConfigError("a2_loss: variant " + to_string(cfg.variant) + " is not an A2 contrastive loss");
  }
}

LossResult simsiam_loss(const Matrix& z, const IndexMap& index, const DifferentiableMap& predictor,
                        const LossConfig& cfg) {
  check_embeddings(z, index);
  check_predictor(predictor, z);
  (void)cfg;
  LossResult r;
  r.grad = Matrix::Zero(z.rows(), z.cols());
  r.predictor_grad = Vector::Zero(static_cast<Eigen::Index>(predictor.parameter_count()));
  const std::size_t n = index.anchors();
  const double w = 0.5 / static_cast<double>(n);
  for (std::size_t a = 0; a < n; ++a) {
    predicted_cosine(z, a, a + n, predictor, w, -1.0, r);
    predicted_cosine(z, a + n, a, predictor, w, -1.0, r);
  }
  return r;
}

LossResult a2_simsiam_loss(const Matrix& z, const IndexMap& index,
                           const DifferentiableMap& predictor, const LossConfig& cfg) {
  cfg.validate();
  LossResult r = simsiam_loss(z, index, predictor, cfg);
  const double sign = cfg.a2_simsiam_sign == SimSiamSign::negative_cosine ? -1.0 : 1.0;
  const double scale = anchor_scale(index, cfg);
  for (std::size_t i = 0; i < index.expert_count(); ++i) {
    const auto k = index.generated(i);
    if (k.empty()) throw ConfigError("a2_simsiam_loss: anchor " + std::to_string(i) + " has no generated views");
    const double w = scale * cfg.alpha / static_cast<double>(k.size());
    for (auto p : k) predicted_cosine(z, p, i, predictor, w, sign, r);
  }
  return r;
}

LossResult compute_loss(const Matrix& z, const IndexMap& index, const LossConfig& cfg,
                        const DifferentiableMap* predictor) {
  switch (cfg.variant) {
    case LossVariant::simclr: return simclr_loss(z, index, cfg);
    case LossVariant::infonce: return infonce_two_set(z, index, cfg);
    case LossVariant::a2_simclr:
    case LossVariant::a2_infonce:
    case LossVariant::a2_full: return a2_loss(z, index, cfg);
    case LossVariant::simsiam:
    case LossVariant::a2_simsiam:
      if (!predictor) throw ConfigError(to_string(cfg.variant) + " needs a predictor");
      return cfg.variant == LossVariant::simsiam ? simsiam_loss(z, index, *predictor, cfg)
                                                 : a2_simsiam_loss(z, index, *predictor, cfg);
  }
  throw ConfigError("unknown loss variant");
}

LossResult compute_loss(const MultiviewBatch& batch, const LossConfig& cfg,
                        const DifferentiableMap* predictor) {
  batch.validate();
  return compute_loss(batch.embeddings, batch.index_map, cfg, predictor);
}

}  // namespace viewlab
