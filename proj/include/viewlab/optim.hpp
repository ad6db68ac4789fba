#pragma once

#include <cmath>

#include "viewlab/core.hpp"

namespace viewlab {

/// Momentum SGD with L2 weight decay folded into the gradient.
struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

class Sgd {
 public:
  explicit Sgd(SgdConfig cfg = {}) : cfg_(cfg) {}

  void step(Vector& params, const Vector& grad, double lr) {
    if (velocity_.size() != params.size()) velocity_ = Vector::Zero(params.size());
    velocity_ = cfg_.momentum * velocity_ + grad + cfg_.weight_decay * params;
    params -= lr * velocity_;
  }
  void step(Vector& params, const Vector& grad) { step(params, grad, cfg_.lr); }

  const SgdConfig& config() const { return cfg_; }
  const Vector& velocity() const { return velocity_; }

 private:
  SgdConfig cfg_;
  Vector velocity_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(Vector& params, const Vector& grad, double lr) {
    if (m_.size() != params.size()) {
      m_ = Vector::Zero(params.size());
      v_ = Vector::Zero(params.size());
    }
    ++t_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    params.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
  }
  void step(Vector& params, const Vector& grad) { step(params, grad, cfg_.lr); }

 private:
  AdamConfig cfg_;
  Vector m_, v_;
  long t_ = 0;
};

}  // namespace viewlab
