#include "viewlab/inversion.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "viewlab/optim.hpp"

namespace viewlab {

namespace {

double softplus(double t) { return std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t))); }
double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

void require_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NumericalError(std::string("inversion loss: non-finite ") + term + " term");
}

}  // namespace

void InversionConfig::validate() const {
  if (!(lambda_vgg >= 0.0) || !(lambda_adv >= 0.0)) throw ConfigError("inversion: weights must be non-negative");
  if (batch_size < 1) throw ConfigError("inversion: batch size must be positive");
  if (!(encoder_lr > 0.0)) throw ConfigError("inversion: encoder lr must be positive");
  if (eval_every < 1) throw ConfigError("inversion: eval_every must be positive");
  if (!(latent_step_size > 0.0)) throw ConfigError("inversion: latent step size must be positive");
}

nlohmann::json InversionConfig::to_json() const {
  return {{"lambda_vgg", lambda_vgg},
          {"lambda_adv", lambda_adv},
          {"encoder_steps", encoder_steps},
          {"batch_size", batch_size},
          {"encoder_lr", encoder_lr},
          {"eval_every", eval_every},
          {"latent_opt_steps", latent_opt_steps},
          {"latent_step_size", latent_step_size},
          {"discriminator",
           {{"steps", discriminator.steps},
            {"batch_size", discriminator.batch_size},
            {"lr", discriminator.lr},
            {"fake_latent_std", discriminator.fake_latent_std}}}};
}

InversionEvaluation inversion_objective(const ImageTensor& x, const LatentCode& w, const DifferentiableMap& g,
                                        const DifferentiableMap* d, const DifferentiableMap* h,
                                        const InversionConfig& cfg) {
  if (cfg.lambda_vgg > 0.0 && !h) throw ConfigError("inversion loss: perceptual weight set but no network h");
  if (cfg.lambda_adv > 0.0 && !d) throw ConfigError("inversion loss: adversarial weight set but no discriminator");
  const ImageTensor xr = generate(g, w);
  if (xr.size() != x.size()) throw ConfigError("inversion loss: image size mismatch");

  InversionEvaluation out;
  const Vector r = x - xr;
  const double rn = r.norm();
  out.terms.reconstruction = rn;
  require_finite(rn, "reconstruction");
  Vector gx = rn > 0.0 ? Vector(-r / rn) : Vector::Zero(x.size());

  if (cfg.lambda_vgg > 0.0) {
    const auto lin = h->linearize(xr);
    const Vector q = h->evaluate(x) - lin.value;
    const double qn = q.norm();
    out.terms.perceptual = cfg.lambda_vgg * qn;
    require_finite(out.terms.perceptual, "perceptual");
    if (qn > 0.0) gx -= cfg.lambda_vgg * lin.pullback(q / qn, nullptr);
  }
  if (cfg.lambda_adv > 0.0) {
    const auto lin = d->linearize(xr);
    if (lin.value.size() != 1) throw ConfigError("inversion loss: discriminator must output a scalar");
    const double logit = lin.value[0];
    out.terms.adversarial = cfg.lambda_adv * softplus(-logit);
    require_finite(out.terms.adversarial, "adversarial");
    gx += lin.pullback(Vector::Constant(1, -cfg.lambda_adv * sigmoid(-logit)), nullptr);
  }
  out.terms.total = out.terms.reconstruction + out.terms.perceptual + out.terms.adversarial;
  out.grad = g.pullback(w, gx);
  return out;
}

InversionTerms inversion_loss(const ImageTensor& x, const DifferentiableMap& e, const DifferentiableMap& g,
                              const DifferentiableMap* d, const DifferentiableMap* h, const InversionConfig& cfg) {
  return inversion_objective(x, e.evaluate(x), g, d, h, cfg).terms;
}

double mean_inversion_loss(const std::vector<ImageTensor>& images, const DifferentiableMap& e,
                           const DifferentiableMap& g, const DifferentiableMap* d, const DifferentiableMap* h,
                           const InversionConfig& cfg) {
  if (images.empty()) throw ConfigError("inversion: empty image set");
  double s = 0.0;
  for (const auto& x : images) s += inversion_loss(x, e, g, d, h, cfg).total;
  return s / static_cast<double>(images.size());
}

DiscriminatorReport pretrain_discriminator(DifferentiableMap& d, const std::vector<ImageTensor>& real,
                                           const DifferentiableMap& g, const DiscriminatorConfig& cfg,
                                           std::uint64_t seed) {
  if (real.empty()) throw ConfigError("discriminator: no real images");
  if (cfg.batch_size < 1) throw ConfigError("discriminator: batch size must be positive");
  Rng rng = make_stream(seed, {tag(StreamTag::discriminator)});
  std::uniform_int_distribution<std::size_t> pick(0, real.size() - 1);
  std::normal_distribution<double> normal(0.0, cfg.fake_latent_std);
  auto fake = [&] {
    LatentCode w(static_cast<Eigen::Index>(g.input_size()));
    for (auto& v : w) v = normal(rng);
    return generate(g, w);
  };

  Sgd opt(SgdConfig{cfg.lr, 0.9, 0.0});
  Vector params = d.parameters();
  DiscriminatorReport rep;
  const double scale = 1.0 / static_cast<double>(2 * cfg.batch_size);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Vector grad = Vector::Zero(params.size());
    double loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      // real: softplus(-t), fake: softplus(t)
      for (int is_real = 0; is_real < 2; ++is_real) {
        const ImageTensor x = is_real ? real[pick(rng)] : fake();
        const auto lin = d.linearize(x);
        const double t = lin.value[0];
        const double sign = is_real ? -1.0 : 1.0;
        loss += scale * softplus(sign * t);
        lin.pullback(Vector::Constant(1, scale * sign * sigmoid(sign * t)), &grad);
      }
    }
    if (!std::isfinite(loss)) throw NumericalError("discriminator: non-finite loss at step " + std::to_string(step));
    opt.step(params, grad);
    d.set_parameters(params);
    rep.final_loss = loss;
  }

  std::size_t correct = 0;
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    correct += d.evaluate(real[pick(rng)])[0] > 0.0;
    correct += d.evaluate(fake())[0] < 0.0;
  }
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(2 * cfg.batch_size);
  d.set_trainable(false);
  return rep;
}

InverterReport train_inverter(const std::vector<ImageTensor>& train, const std::vector<ImageTensor>& held_out,
                              DifferentiableMap& e, const DifferentiableMap& g, const DifferentiableMap* d,
                              const DifferentiableMap* h, const InversionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (train.empty() || held_out.empty()) throw ConfigError("train_inverter: empty train or held-out split");
  Rng rng = make_stream(seed, {tag(StreamTag::inversion)});
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);

  InverterReport rep;
  rep.initial_held_out = mean_inversion_loss(held_out, e, g, d, h, cfg);
  rep.curve.push_back(rep.initial_held_out);
  double best = rep.initial_held_out;
  Vector best_params = e.parameters();
  Vector params = e.parameters();
  Adam opt(AdamConfig{cfg.encoder_lr});
  std::size_t diverged = 0;

  for (std::size_t step = 1; step <= cfg.encoder_steps; ++step) {
    Vector grad = Vector::Zero(params.size());
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const ImageTensor& x = train[pick(rng)];
      const auto lin = e.linearize(x);
      const auto obj = inversion_objective(x, lin.value, g, d, h, cfg);
      lin.pullback(obj.grad / static_cast<double>(cfg.batch_size), &grad);
    }
    if (!all_finite(grad)) throw NumericalError("train_inverter: non-finite gradient at step " + std::to_string(step));
    opt.step(params, grad);
    e.set_parameters(params);
    rep.steps = step;

    if (step % cfg.eval_every == 0 || step == cfg.encoder_steps) {
      const double loss = mean_inversion_loss(held_out, e, g, d, h, cfg);
      rep.curve.push_back(loss);
      if (loss < best) {
        best = loss;
        best_params = params;
      }
      diverged = loss > 10.0 * rep.initial_held_out ? diverged + 1 : 0;
      if (diverged >= 3)
        throw NumericalError("train_inverter: held-out loss diverged (" + std::to_string(loss) + " at step " +
                             std::to_string(step) + ")");
      spdlog::debug("inverter step {}: held-out loss {:.6f}", step, loss);
    }
  }
  e.set_parameters(best_params);
  rep.final_held_out = best;
  return rep;
}

LatentOptimization optimize_latent(const ImageTensor& x, const LatentCode& w_init, const DifferentiableMap& g,
                                   const DifferentiableMap* d, const DifferentiableMap* h,
                                   const InversionConfig& cfg) {
  cfg.validate();
  LatentOptimization out;
  out.latent = w_init;
  auto current = inversion_objective(x, w_init, g, d, h, cfg);
  out.initial_loss = out.final_loss = current.terms.total;
  double step = cfg.latent_step_size;

  for (std::size_t it = 0; it < cfg.latent_opt_steps; ++it) {
    if (!all_finite(current.grad))
      throw NumericalError("optimize_latent: non-finite gradient at step " + std::to_string(it));
    const double gn = current.grad.norm();
    if (gn == 0.0) break;
    bool accepted = false;
    for (int tries = 0; tries < 40 && !accepted; ++tries) {
      const LatentCode cand = out.latent - (step / gn) * current.grad;
      InversionEvaluation next;
      try {
        next = inversion_objective(x, cand, g, d, h, cfg);
      } catch (const NumericalError&) {
        step *= 0.5;
        continue;
      }
      if (next.terms.total < current.terms.total) {
        out.latent = cand;
        current = std::move(next);
        accepted = true;
        step *= 1.5;
      } else {
        step *= 0.5;
      }
    }
    if (!accepted) break;
    out.steps = it + 1;
  }
  out.final_loss = current.terms.total;
  return out;
}

LatentOptimization optimize_latent(const ImageTensor& x, const DifferentiableMap& e, const DifferentiableMap& g,
                                   const DifferentiableMap* d, const DifferentiableMap* h,
                                   const InversionConfig& cfg) {
  return optimize_latent(x, e.evaluate(x), g, d, h, cfg);
}

}  // namespace viewlab
