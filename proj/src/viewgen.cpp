#include "viewlab/viewgen.hpp"

#include <algorithm>
#include <cmath>

namespace viewlab {

// ---------------------------------------------------------------------------
// Expert transformations

TransformConfig TransformConfig::full() { return TransformConfig{}; }

TransformConfig TransformConfig::weak() {
  TransformConfig c;
  c.crop_scale_low = 0.8;
  c.crop_scale_high = 1.0;
  c.flip_probability = 0.5;
  c.color_jitter_strength = 0.0;
  c.preset = TransformPreset::weak;
  return c;
}

TransformConfig TransformConfig::identity() {
  TransformConfig c;
  c.crop_scale_low = c.crop_scale_high = 1.0;
  c.aspect_low = c.aspect_high = 1.0;
  c.flip_probability = 0.0;
  c.color_jitter_strength = 0.0;
  c.preset = TransformPreset::custom;
  return c;
}

void TransformConfig::validate() const {
  if (!(crop_scale_low > 0.0 && crop_scale_low <= crop_scale_high && crop_scale_high <= 1.0))
    throw ConfigError("transform: crop scale range must satisfy 0 < low <= high <= 1");
  if (!(aspect_low > 0.0 && aspect_low <= aspect_high))
    throw ConfigError("transform: aspect range must satisfy 0 < low <= high");
  if (!(flip_probability >= 0.0 && flip_probability <= 1.0))
    throw ConfigError("transform: flip probability must lie in [0, 1]");
  if (!(color_jitter_strength >= 0.0)) throw ConfigError("transform: jitter strength must be >= 0");
}

std::string to_string(TransformPreset p) {
  switch (p) {
    case TransformPreset::full: return "full";
    case TransformPreset::weak: return "weak";
    case TransformPreset::custom: return "custom";
  }
  return "?";
}

TransformPreset transform_preset_from_string(const std::string& s) {
  for (auto p : {TransformPreset::full, TransformPreset::weak, TransformPreset::custom})
    if (to_string(p) == s) return p;
  throw ConfigError("unknown transform preset: " + s);
}

namespace {

struct CropBox {
  double x0, y0, w, h;
};

// torchvision-style sampling: ten tries, then a central crop clamped to the
// aspect range.
CropBox sample_crop(const ImageShape& s, const TransformConfig& cfg, Rng& rng) {
  const double W = static_cast<double>(s.width), H = static_cast<double>(s.height);
  const double area = W * H;
  std::uniform_real_distribution<double> scale(cfg.crop_scale_low, cfg.crop_scale_high);
  std::uniform_real_distribution<double> log_ratio(std::log(cfg.aspect_low), std::log(cfg.aspect_high));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * scale(rng);
    const double ratio = std::exp(log_ratio(rng));
    const double w = std::sqrt(target * ratio), h = std::sqrt(target / ratio);
    if (w <= W && h <= H && w > 0.0 && h > 0.0) return {unit(rng) * (W - w), unit(rng) * (H - h), w, h};
  }
  double w = W, h = H;
  const double in_ratio = W / H;
  if (in_ratio < cfg.aspect_low) {
    h = w / cfg.aspect_low;
  } else if (in_ratio > cfg.aspect_high) {
    w = h * cfg.aspect_high;
  }
  return {(W - w) / 2.0, (H - h) / 2.0, w, h};
}

ImageTensor resized_crop(const ImageTensor& x, const ImageShape& s, const CropBox& box) {
  const std::size_t H = s.height, W = s.width, hw = H * W;
  ImageTensor out(x.size());
  auto clampi = [](double v, std::size_t hi) {
    return std::clamp(v, 0.0, static_cast<double>(hi - 1));
  };
  for (std::size_t i = 0; i < H; ++i) {
    const double sy = clampi(box.y0 + (static_cast<double>(i) + 0.5) * box.h / static_cast<double>(H) - 0.5, H);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t j = 0; j < W; ++j) {
      const double sx = clampi(box.x0 + (static_cast<double>(j) + 0.5) * box.w / static_cast<double>(W) - 0.5, W);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < s.channels; ++c) {
        const auto at = [&](std::size_t y, std::size_t xx) { return x[static_cast<Eigen::Index>(c * hw + y * W + xx)]; };
        const double top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
        const double bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
        out[static_cast<Eigen::Index>(c * hw + i * W + j)] = (1.0 - fy) * top + fy * bottom;
      }
    }
  }
  return out;
}

void flip_horizontal(ImageTensor& x, const ImageShape& s) {
  const std::size_t W = s.width;
  for (std::size_t r = 0; r < s.channels * s.height; ++r) {
    auto row = x.segment(static_cast<Eigen::Index>(r * W), static_cast<Eigen::Index>(W));
    row.reverseInPlace();
  }
}

void color_jitter(ImageTensor& x, const ImageShape& s, double strength, Rng& rng) {
  std::uniform_real_distribution<double> factor(std::max(0.0, 1.0 - strength), 1.0 + strength);
  const double brightness = factor(rng), contrast = factor(rng), saturation = factor(rng);
  const auto hw = static_cast<Eigen::Index>(s.height * s.width);

  x = (x * brightness).cwiseMax(0.0).cwiseMin(1.0);

  double mean_grey = x.mean();
  if (s.channels == 3)
    mean_grey = (0.299 * x.segment(0, hw).sum() + 0.587 * x.segment(hw, hw).sum() +
                 0.114 * x.segment(2 * hw, hw).sum()) /
                static_cast<double>(hw);
  x = (mean_grey + contrast * (x.array() - mean_grey)).matrix().cwiseMax(0.0).cwiseMin(1.0);

  if (s.channels == 3) {
    const Vector grey = 0.299 * x.segment(0, hw) + 0.587 * x.segment(hw, hw) + 0.114 * x.segment(2 * hw, hw);
    for (Eigen::Index c = 0; c < 3; ++c) {
      auto ch = x.segment(c * hw, hw);
      ch = (grey + saturation * (ch - grey)).cwiseMax(0.0).cwiseMin(1.0);
    }
  }
}

}  // namespace

ImageTensor expert_transform(const ImageTensor& x, const ImageShape& shape, const TransformConfig& cfg,
                             Rng& rng) {
  cfg.validate();
  if (static_cast<std::size_t>(x.size()) != shape.size())
    throw ConfigError("expert_transform: image size " + std::to_string(x.size()) + " does not match " +
                      shape_to_string(shape.as_shape()));
  ImageTensor out = resized_crop(x, shape, sample_crop(shape, cfg, rng));
  std::bernoulli_distribution flip(cfg.flip_probability);
  if (flip(rng)) flip_horizontal(out, shape);
  if (cfg.color_jitter_strength > 0.0) color_jitter(out, shape, cfg.color_jitter_strength, rng);
  return out;
}

// ---------------------------------------------------------------------------
// W-search

std::string to_string(InitPolicy p) {
  return p == InitPolicy::random ? "random" : "inverted_anchor_plus_noise";
}

InitPolicy init_policy_from_string(const std::string& s) {
  if (s == "random") return InitPolicy::random;
  if (s == "inverted_anchor_plus_noise") return InitPolicy::inverted_anchor_plus_noise;
  throw ConfigError("unknown init policy: " + s);
}

std::string to_string(DiversitySpace s) { return s == DiversitySpace::latent ? "latent" : "embedding"; }

DiversitySpace diversity_space_from_string(const std::string& s) {
  if (s == "latent") return DiversitySpace::latent;
  if (s == "embedding") return DiversitySpace::embedding;
  throw ConfigError("unknown diversity space: " + s);
}

std::string to_string(BoundaryPenalty p) { return p == BoundaryPenalty::huber ? "huber" : "squared"; }

BoundaryPenalty boundary_penalty_from_string(const std::string& s) {
  if (s == "huber") return BoundaryPenalty::huber;
  if (s == "squared") return BoundaryPenalty::squared;
  throw ConfigError("unknown boundary penalty: " + s);
}

void WSearchConfig::validate() const {
  if (!(epsilon1 > 0.0)) throw ConfigError("w_search: epsilon1 must be positive");
  if (!(epsilon2 >= 0.0)) throw ConfigError("w_search: epsilon2 must be non-negative");
  if (!(lambda >= 0.0)) throw ConfigError("w_search: lambda must be non-negative");
  if (views < 1) throw ConfigError("w_search: need at least one view per anchor");
  if (!(step_size > 0.0)) throw ConfigError("w_search: step size must be positive");
  if (!(tol >= 0.0)) throw ConfigError("w_search: tolerance must be non-negative");
  if (!(init_noise >= 0.0) || !(random_init_std >= 0.0)) throw ConfigError("w_search: init noise must be >= 0");
  if (penalty == BoundaryPenalty::huber && !(huber_delta > 0.0))
    throw ConfigError("w_search: huber delta must be positive");
}

namespace {

// delta(eps, d) as a function of the residual r = d - eps, with its derivative.
std::pair<double, double> penalty(double r, const WSearchConfig& cfg) {
  if (cfg.penalty == BoundaryPenalty::huber && std::abs(r) > cfg.huber_delta) {
    const double s = r > 0 ? 1.0 : -1.0;
    return {2.0 * cfg.huber_delta * std::abs(r) - cfg.huber_delta * cfg.huber_delta, 2.0 * cfg.huber_delta * s};
  }
  return {r * r, 2.0 * r};
}

}  // namespace

Vector anchor_embedding(const DifferentiableMap& f, const ImageTensor& x0, const WSearchConfig& cfg) {
  return cfg.normalize ? encode(f, x0) : f.evaluate(x0);
}

WSearchObjective w_search_objective(const std::vector<LatentCode>& latents, const Vector& z0,
                                    const DifferentiableMap& f, const DifferentiableMap& g,
                                    const WSearchConfig& cfg) {
  const std::size_t n = latents.size();
  if (n == 0) throw ConfigError("w_search: no latents");
  WSearchObjective obj;
  obj.residuals.resize(n);
  obj.grad.resize(n);

  std::vector<Vector> z(n), gz(n);
  std::vector<std::function<Vector(const Vector&)>> back(n);
  for (std::size_t k = 0; k < n; ++k) {
    const ImageTensor x = generate(g, latents[k]);
    if (cfg.normalize) {
      auto ev = std::make_shared<EncodedView>(encode_linearized(f, x));
      z[k] = ev->z;
      back[k] = [ev](const Vector& gk) { return ev->pullback(gk, nullptr); };
    } else {
      auto lin = std::make_shared<DifferentiableMap::Linearization>(f.linearize(x));
      z[k] = lin->value;
      back[k] = [lin](const Vector& gk) { return lin->pullback(gk, nullptr); };
    }
    if (z[k].size() != z0.size()) throw ConfigError("w_search: anchor embedding size mismatch");
    gz[k] = Vector::Zero(z[k].size());
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) {
    const Vector diff = z[k] - z0;
    const double d = diff.norm();
    const double r = d - cfg.epsilon1;
    const auto [p, dp] = penalty(r, cfg);
    obj.residuals[k] = r;
    obj.boundary += inv_n * p;
    if (d > 0.0) gz[k] += inv_n * dp / d * diff;
  }

  std::vector<Vector> gw_direct(n);
  if (n >= 2) {
    const auto& u = cfg.diversity == DiversitySpace::latent ? latents : z;
    const double pairs = static_cast<double>(n * (n - 1) / 2);
    double sum = 0.0;
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b) sum += (u[a] - u[b]).norm();
    obj.mean_pairwise = sum / pairs;
    const double hinge = cfg.epsilon2 - obj.mean_pairwise;
    if (hinge > 0.0 && cfg.lambda > 0.0) {
      obj.uniformity = cfg.lambda * hinge;
      for (std::size_t a = 0; a < n; ++a) {
        Vector ga = Vector::Zero(u[a].size());
        for (std::size_t b = 0; b < n; ++b) {
          if (b == a) continue;
          const Vector d = u[a] - u[b];
          const double dn = d.norm();
          if (dn > 0.0) ga -= cfg.lambda / pairs * d / dn;
        }
        if (cfg.diversity == DiversitySpace::latent) {
          gw_direct[a] = ga;
        } else {
          gz[a] += ga;
        }
      }
    }
  }

  obj.value = obj.boundary + obj.uniformity;
  for (std::size_t k = 0; k < n; ++k) {
    obj.grad[k] = g.pullback(latents[k], back[k](gz[k]));
    if (gw_direct[k].size() > 0) obj.grad[k] += gw_direct[k];
  }
  return obj;
}

double WSearchResult::mean_abs_residual() const {
  if (residuals.empty()) return 0.0;
  double s = 0.0;
  for (double r : residuals) s += std::abs(r);
  return s / static_cast<double>(residuals.size());
}

WSearchResult w_search(const ImageTensor& x0, const DifferentiableMap& f, const DifferentiableMap& g,
                       const LatentCode* anchor_latent, const WSearchConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto dim = static_cast<Eigen::Index>(g.input_size());
  const Vector z0 = anchor_embedding(f, x0, cfg);

  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<LatentCode> w(cfg.views);
  for (auto& wk : w) {
    wk.resize(dim);
    if (cfg.init_policy == InitPolicy::inverted_anchor_plus_noise) {
      if (!anchor_latent) throw ConfigError("w_search: init policy needs the anchor's inverted latent");
      if (anchor_latent->size() != dim) throw ConfigError("w_search: anchor latent size mismatch");
      const double sd = cfg.init_noise * cfg.epsilon1;
      for (Eigen::Index i = 0; i < dim; ++i) wk[i] = (*anchor_latent)[i] + sd * normal(rng);
    } else {
      for (Eigen::Index i = 0; i < dim; ++i) wk[i] = cfg.random_init_std * normal(rng);
    }
  }

  auto evaluate = [&](std::size_t iteration) {
    WSearchObjective obj = w_search_objective(w, z0, f, g, cfg);
    bool finite = std::isfinite(obj.value);
    for (const auto& gk : obj.grad) finite = finite && all_finite(gk);
    if (!finite)
      throw NumericalError("w_search: non-finite objective at iteration " + std::to_string(iteration));
    return obj;
  };

  WSearchResult res;
  WSearchObjective obj = evaluate(0);
  while (res.iterations < cfg.steps) {
    double moved = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const Vector step = cfg.step_size * obj.grad[k];
      w[k] -= step;
      moved += step.squaredNorm();
    }
    ++res.iterations;
    obj = evaluate(res.iterations);
    if (std::sqrt(moved) < cfg.tol) {
      res.converged = true;
      break;
    }
  }

  res.objective = obj.value;
  res.residuals = obj.residuals;
  res.mean_pairwise = obj.mean_pairwise;
  res.latents = w;
  res.images.reserve(w.size());
  for (const auto& wk : w) res.images.push_back(generate(g, wk));
  return res;
}

WSearchResult w_search(const ImageTensor& x0, const DifferentiableMap& f, const DifferentiableMap& g,
                       const DifferentiableMap& e, const WSearchConfig& cfg, Rng& rng) {
  const LatentCode w0 = e.evaluate(x0);
  return w_search(x0, f, g, &w0, cfg, rng);
}

LatentCode sign_gradient_step(const LatentCode& w, const Vector& grad, double step) {
  if (grad.size() != w.size()) throw ConfigError("sign step: gradient size mismatch");
  if (!all_finite(w)) throw NumericalError("sign step: latent has non-finite entries");
  LatentCode out = w;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (grad[i] > 0.0) out[i] -= step;
    else if (grad[i] < 0.0) out[i] += step;
  }
  return out;
}

LatentCode w_search_online_1step(const ImageTensor& x0, const DifferentiableMap& f, const DifferentiableMap& g,
                                 const LatentCode& w_init, double epsilon1, double step, bool normalize) {
  WSearchConfig cfg;
  cfg.epsilon1 = epsilon1;
  cfg.views = 1;
  cfg.lambda = 0.0;
  cfg.normalize = normalize;
  cfg.validate();
  const WSearchObjective obj = w_search_objective({w_init}, anchor_embedding(f, x0, cfg), f, g, cfg);
  return sign_gradient_step(w_init, obj.grad[0], step);
}

// ---------------------------------------------------------------------------
// W-perturb

void PerturbConfig::validate() const {
  if (!(sigma >= 0.0)) throw ConfigError("w_perturb: sigma must be non-negative");
  if (count < 1) throw ConfigError("w_perturb: need at least one view per anchor");
}

Vector sample_perturbation(std::size_t dim, double sigma, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(static_cast<Eigen::Index>(dim));
  for (auto& x : v) x = sigma * normal(rng);
  return v;
}

PerturbResult w_perturb(const LatentCode& anchor_latent, const DifferentiableMap& g, const PerturbConfig& cfg,
                        Rng& rng) {
  cfg.validate();
  if (static_cast<std::size_t>(anchor_latent.size()) != g.input_size())
    throw ConfigError("w_perturb: latent size does not match the generator");
  PerturbResult res;
  for (std::size_t i = 0; i < cfg.count; ++i) {
    LatentCode w = anchor_latent;
    if (cfg.sigma > 0.0) w += sample_perturbation(g.input_size(), cfg.sigma, rng);
    res.images.push_back(generate(g, w));
    res.latents.push_back(std::move(w));
  }
  return res;
}

PerturbResult w_perturb(const ImageTensor& x, const DifferentiableMap& g, const DifferentiableMap& e,
                        const PerturbConfig& cfg, Rng& rng) {
  return w_perturb(e.evaluate(x), g, cfg, rng);
}

// ---------------------------------------------------------------------------
// Epsilon calibration

EpsilonEstimate calibrate_epsilon(const DifferentiableMap& f, const std::vector<ImageTensor>& sample,
                                  const ImageShape& shape, const TransformConfig& transform,
                                  std::uint64_t seed, CalibrationSpace space, const DifferentiableMap* e,
                                  double margin) {
  if (sample.empty()) throw ConfigError("calibrate_epsilon: empty sample");
  if (space == CalibrationSpace::latent && !e) throw ConfigError("calibrate_epsilon: latent space needs e");
  std::vector<double> d;
  d.reserve(sample.size());
  for (std::size_t i = 0; i < sample.size(); ++i) {
    Rng rng = make_stream(seed, {tag(StreamTag::calibration), i});
    const ImageTensor t = expert_transform(sample[i], shape, transform, rng);
    if (space == CalibrationSpace::latent) {
      d.push_back((e->evaluate(sample[i]) - e->evaluate(t)).norm());
    } else {
      d.push_back((encode(f, sample[i]) - encode(f, t)).norm());
    }
  }
  EpsilonEstimate est;
  est.samples = d.size();
  for (double v : d) est.epsilon1 += v;
  est.epsilon1 /= static_cast<double>(d.size());
  for (double v : d) est.stddev += (v - est.epsilon1) * (v - est.epsilon1);
  est.stddev = std::sqrt(est.stddev / static_cast<double>(d.size()));
  est.epsilon2 = est.epsilon1 + margin;
  return est;
}

}  // namespace viewlab
