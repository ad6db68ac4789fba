#include "viewlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "viewlab/rng.hpp"

namespace viewlab {

void MineConfig::validate() const {
  if (hidden.empty()) throw ConfigError("mine: critic needs at least one hidden layer");
  if (steps < 1 || batch_size < 2) throw ConfigError("mine: steps >= 1 and batch size >= 2 required");
  if (!(lr > 0.0)) throw ConfigError("mine: lr must be positive");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("mine: ema decay must lie in [0, 1)");
  if (!(held_out_fraction > 0.0 && held_out_fraction < 1.0))
    throw ConfigError("mine: held-out fraction must lie in (0, 1)");
  if (eval_every < 1 || smoothing < 1) throw ConfigError("mine: eval cadence and smoothing must be positive");
}

void ProbeConfig::validate() const {
  if (epochs < 1) throw ConfigError("probe: epochs must be >= 1");
  if (k < 1) throw ConfigError("probe: k must be >= 1");
  if (batch_size < 1) throw ConfigError("probe: batch size must be positive");
  if (!(optimizer.lr > 0.0)) throw ConfigError("probe: lr must be positive");
}

Matrix embed(const DifferentiableMap& f, const std::vector<ImageTensor>& images) {
  Matrix z(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(f.output_size()));
  for (std::size_t i = 0; i < images.size(); ++i) z.row(static_cast<Eigen::Index>(i)) = encode(f, images[i]).transpose();
  return z;
}

Matrix backbone_features(const Network& f, const std::vector<ImageTensor>& images) {
  Matrix z(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(f.feature_size()));
  for (std::size_t i = 0; i < images.size(); ++i) z.row(static_cast<Eigen::Index>(i)) = f.features(images[i]).transpose();
  return z;
}

// ---------------------------------------------------------------------------
// Linear probe

double linear_probe(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& test_x,
                    const std::vector<int>& test_y, std::size_t classes, const ProbeConfig& cfg,
                    std::uint64_t seed) {
  cfg.validate();
  const auto n = train_x.rows(), d = train_x.cols();
  if (n == 0 || static_cast<std::size_t>(n) != train_y.size()) throw ConfigError("probe: bad training set");
  if (static_cast<std::size_t>(test_x.rows()) != test_y.size() || test_x.cols() != d)
    throw ConfigError("probe: bad test set");
  if (std::set<int>(train_y.begin(), train_y.end()).size() < 2)
    throw ConfigError("probe: training set has a single class");
  for (int y : train_y)
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw ConfigError("probe: label out of range");

  Vector mean = Vector::Zero(d), scale = Vector::Ones(d);
  if (cfg.standardize) {
    mean = train_x.colwise().mean().transpose();
    for (Eigen::Index j = 0; j < d; ++j) {
      const double sd = std::sqrt((train_x.col(j).array() - mean[j]).square().mean());
      scale[j] = sd > 1e-12 ? 1.0 / sd : 1.0;
    }
  }
  auto prepare = [&](const Matrix& x) {
    Matrix out = (x.rowwise() - mean.transpose());
    return Matrix(out * scale.asDiagonal());
  };
  const Matrix xtr = prepare(train_x), xte = prepare(test_x);

  const auto c = static_cast<Eigen::Index>(classes);
  Vector params = Vector::Zero(d * c + c);
  Sgd opt(cfg.optimizer);
  const std::size_t batches = (static_cast<std::size_t>(n) + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.epochs * batches;
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0u);
    Rng rng = make_stream(seed, {tag(StreamTag::probe), epoch});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < batches; ++b, ++step) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(order.size(), lo + cfg.batch_size);
      const auto bs = static_cast<Eigen::Index>(hi - lo);
      Matrix xb(bs, d), yb = Matrix::Zero(bs, c);
      for (std::size_t i = lo; i < hi; ++i) {
        xb.row(static_cast<Eigen::Index>(i - lo)) = xtr.row(static_cast<Eigen::Index>(order[i]));
        yb(static_cast<Eigen::Index>(i - lo), train_y[order[i]]) = 1.0;
      }
      Eigen::Map<const Matrix> w(params.data(), d, c);
      const Eigen::Map<const Vector> bias(params.data() + d * c, c);
      Matrix logits = (xb * w).rowwise() + bias.transpose();
      for (Eigen::Index r = 0; r < bs; ++r) {
        const double m = logits.row(r).maxCoeff();
        logits.row(r) = (logits.row(r).array() - m).exp();
        logits.row(r) /= logits.row(r).sum();
      }
      const Matrix delta = (logits - yb) / static_cast<double>(bs);
      Vector grad(params.size());
      Eigen::Map<Matrix>(grad.data(), d, c) = xb.transpose() * delta;
      grad.tail(c) = delta.colwise().sum().transpose();
      const double lr = cfg.cosine_decay
                            ? cfg.optimizer.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total)))
                            : cfg.optimizer.lr;
      opt.step(params, grad, lr);
    }
  }

  Eigen::Map<const Matrix> w(params.data(), d, c);
  const Eigen::Map<const Vector> bias(params.data() + d * c, c);
  const Matrix logits = (xte * w).rowwise() + bias.transpose();
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    logits.row(r).maxCoeff(&best);
    correct += best == test_y[static_cast<std::size_t>(r)];
  }
  return test_y.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test_y.size());
}

double linear_probe(const Network& f, const Dataset& train, const Dataset& test, const ProbeConfig& cfg,
                    std::uint64_t seed) {
  return linear_probe(backbone_features(f, train.images), train.labels, backbone_features(f, test.images),
                      test.labels, std::max(train.classes, test.classes), cfg, seed);
}

// ---------------------------------------------------------------------------
// k-NN

std::vector<int> knn_predict(const Matrix& train_z, const std::vector<int>& train_y, const Matrix& test_z,
                             std::size_t k) {
  const auto n = static_cast<std::size_t>(train_z.rows());
  if (n == 0) throw ConfigError("knn: empty training set");
  if (train_y.size() != n) throw ConfigError("knn: label count mismatch");
  if (k < 1 || k > n) throw ConfigError("knn: k must lie in [1, train size]");
  if (test_z.cols() != train_z.cols()) throw ConfigError("knn: embedding dimension mismatch");

  const Matrix sims = test_z * train_z.transpose();
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(test_z.rows()));
  std::vector<std::size_t> idx(n);
  for (Eigen::Index q = 0; q < sims.rows(); ++q) {
    std::iota(idx.begin(), idx.end(), 0u);
    const auto row = sims.row(q);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double sa = row[static_cast<Eigen::Index>(a)], sb = row[static_cast<Eigen::Index>(b)];
                        return sa > sb || (sa == sb && a < b);
                      });
    // Labels in order of first appearance, with vote counts.
    std::vector<std::pair<int, std::size_t>> votes;
    for (std::size_t r = 0; r < k; ++r) {
      const int y = train_y[idx[r]];
      auto it = std::find_if(votes.begin(), votes.end(), [&](const auto& v) { return v.first == y; });
      if (it == votes.end()) votes.emplace_back(y, 1);
      else ++it->second;
    }
    auto best = votes.begin();
    for (auto it = votes.begin(); it != votes.end(); ++it)
      if (it->second > best->second) best = it;
    out.push_back(best->first);
  }
  return out;
}

double knn_accuracy(const Matrix& train_z, const std::vector<int>& train_y, const Matrix& test_z,
                    const std::vector<int>& test_y, std::size_t k) {
  if (static_cast<std::size_t>(test_z.rows()) != test_y.size()) throw ConfigError("knn: test label count mismatch");
  if (test_y.empty()) throw ConfigError("knn: empty test set");
  const auto pred = knn_predict(train_z, train_y, test_z, k);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == test_y[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double knn_eval(const DifferentiableMap& f, const Dataset& train, const Dataset& test, std::size_t k) {
  return knn_accuracy(embed(f, train.images), train.labels, embed(f, test.images), test.labels, k);
}

// ---------------------------------------------------------------------------
// MINE

namespace {

/// Batched ReLU perceptron with a scalar output over a flat parameter vector.
class Critic {
 public:
  Critic(std::size_t in, const std::vector<std::size_t>& hidden, Rng& rng) {
    std::size_t prev = in;
    std::size_t offset = 0;
    for (std::size_t l = 0; l <= hidden.size(); ++l) {
      const std::size_t out = l < hidden.size() ? hidden[l] : 1;
      layers_.push_back({prev, out, offset});
      offset += prev * out + out;
      prev = out;
    }
    params_ = Vector::Zero(static_cast<Eigen::Index>(offset));
    for (const auto& ly : layers_) {
      std::uniform_real_distribution<double> u(-std::sqrt(6.0 / static_cast<double>(ly.in)),
                                               std::sqrt(6.0 / static_cast<double>(ly.in)));
      for (std::size_t i = 0; i < ly.in * ly.out; ++i) params_[static_cast<Eigen::Index>(ly.offset + i)] = u(rng);
    }
  }

  Vector& parameters() { return params_; }

  /// Output per row; keeps activations for backward().
  Vector forward(const Matrix& x) {
    acts_.assign(1, x);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Matrix z = (acts_.back() * weight(l)).rowwise() + bias(l).transpose();
      if (l + 1 < layers_.size()) z = z.cwiseMax(0.0);
      acts_.push_back(std::move(z));
    }
    return acts_.back().col(0);
  }

  /// Adds d(sum_i g_i T_i)/d(theta) into grad.
  void backward(const Vector& g, Vector& grad) const {
    Matrix delta = g;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& ly = layers_[l];
      Eigen::Map<Matrix>(grad.data() + ly.offset, static_cast<Eigen::Index>(ly.in), static_cast<Eigen::Index>(ly.out)) +=
          acts_[l].transpose() * delta;
      grad.segment(static_cast<Eigen::Index>(ly.offset + ly.in * ly.out), static_cast<Eigen::Index>(ly.out)) +=
          delta.colwise().sum().transpose();
      if (l == 0) break;
      delta = (delta * weight(l).transpose()).cwiseProduct((acts_[l].array() > 0.0).cast<double>().matrix());
    }
  }

 private:
  struct Layer {
    std::size_t in, out, offset;
  };
  Eigen::Map<const Matrix> weight(std::size_t l) const {
    const auto& ly = layers_[l];
    return {params_.data() + ly.offset, static_cast<Eigen::Index>(ly.in), static_cast<Eigen::Index>(ly.out)};
  }
  Eigen::Map<const Vector> bias(std::size_t l) const {
    const auto& ly = layers_[l];
    return {params_.data() + ly.offset + ly.in * ly.out, static_cast<Eigen::Index>(ly.out)};
  }

  std::vector<Layer> layers_;
  Vector params_;
  std::vector<Matrix> acts_;
};

Matrix pairs(const Matrix& u, const Matrix& v, const std::vector<std::size_t>& iu, const std::vector<std::size_t>& iv) {
  Matrix x(static_cast<Eigen::Index>(iu.size()), u.cols() + v.cols());
  for (std::size_t r = 0; r < iu.size(); ++r) {
    x.row(static_cast<Eigen::Index>(r)) << u.row(static_cast<Eigen::Index>(iu[r])), v.row(static_cast<Eigen::Index>(iv[r]));
  }
  return x;
}

double log_mean_exp(const Vector& t) {
  const double m = t.maxCoeff();
  return m + std::log((t.array() - m).exp().mean());
}

Matrix standardized(const Matrix& x, const std::vector<std::size_t>& fit_rows) {
  Vector mean = Vector::Zero(x.cols()), sd = Vector::Zero(x.cols());
  for (auto r : fit_rows) mean += x.row(static_cast<Eigen::Index>(r)).transpose();
  mean /= static_cast<double>(fit_rows.size());
  for (auto r : fit_rows) sd += (x.row(static_cast<Eigen::Index>(r)).transpose() - mean).cwiseAbs2();
  sd = (sd / static_cast<double>(fit_rows.size())).cwiseSqrt();
  for (auto& s : sd) s = s > 1e-12 ? s : 1.0;
  return (x.rowwise() - mean.transpose()) * sd.cwiseInverse().asDiagonal();
}

}  // namespace

MineResult mine_estimate(const Matrix& u_raw, const Matrix& v_raw, const MineConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(u_raw.rows());
  if (static_cast<std::size_t>(v_raw.rows()) != n) throw ConfigError("mine: u and v have different sample counts");
  if (n < 1000) throw ConfigError("mine: need at least 1000 pairs");

  Rng rng = make_stream(seed, {tag(StreamTag::mine)});
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_held = static_cast<std::size_t>(std::round(cfg.held_out_fraction * static_cast<double>(n)));
  const std::vector<std::size_t> held(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_held));
  const std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_held), perm.end());
  if (train.size() < cfg.batch_size) throw ConfigError("mine: training split smaller than one batch");

  const Matrix u = standardized(u_raw, train), v = standardized(v_raw, train);
  Critic critic(static_cast<std::size_t>(u.cols() + v.cols()), cfg.hidden, rng);
  Adam opt(AdamConfig{cfg.lr});

  // Fixed held-out marginals so successive evaluations are comparable.
  std::vector<std::vector<std::size_t>> held_shuffles(3, held);
  for (auto& s : held_shuffles) std::shuffle(s.begin(), s.end(), rng);
  const Matrix held_joint = pairs(u, v, held, held);
  auto held_out_bound = [&] {
    const double joint = critic.forward(held_joint).mean();
    double marg = 0.0;
    for (const auto& s : held_shuffles) marg += log_mean_exp(critic.forward(pairs(u, v, held, s)));
    return joint - marg / static_cast<double>(held_shuffles.size());
  };

  MineResult res;
  double ema = 0.0;
  std::vector<std::size_t> order = train;
  std::size_t cursor = order.size();
  std::vector<std::size_t> batch(cfg.batch_size), shuffled(cfg.batch_size);
  const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (cursor + cfg.batch_size > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    std::copy_n(order.begin() + static_cast<std::ptrdiff_t>(cursor), cfg.batch_size, batch.begin());
    cursor += cfg.batch_size;
    shuffled = batch;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);

    Vector grad = Vector::Zero(critic.parameters().size());
    critic.forward(pairs(u, v, batch, batch));
    critic.backward(Vector::Constant(static_cast<Eigen::Index>(cfg.batch_size), -inv_b), grad);
    const Vector tm = critic.forward(pairs(u, v, batch, shuffled));
    const Vector etm = tm.array().exp();
    const double mean_exp = etm.mean();
    if (!std::isfinite(mean_exp)) throw NumericalError("mine: critic diverged at step " + std::to_string(step));
    ema = step == 0 ? mean_exp : cfg.ema_decay * ema + (1.0 - cfg.ema_decay) * mean_exp;
    critic.backward(etm * (inv_b / ema), grad);
    opt.step(critic.parameters(), grad);

    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
      const double b = held_out_bound();
      if (!std::isfinite(b) || b > cfg.max_nats)
        throw NumericalError("mine: unstable critic (bound " + std::to_string(b) + " nats at step " +
                             std::to_string(step + 1) + ")");
      res.curve.push_back(b);
    }
  }
  const std::size_t tail = std::min(cfg.smoothing, res.curve.size());
  res.bound = std::accumulate(res.curve.end() - static_cast<std::ptrdiff_t>(tail), res.curve.end(), 0.0) /
              static_cast<double>(tail);
  res.estimate = std::max(0.0, res.bound);
  return res;
}

nlohmann::json metric_row(const std::string& metric, double value, const std::string& config_hash,
                          std::uint64_t seed) {
  return {{"metric", metric}, {"value", value}, {"config_hash", config_hash}, {"seed", seed}};
}

}  // namespace viewlab
