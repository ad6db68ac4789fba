#include "viewlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "viewlab/binary_io.hpp"
#include "viewlab/eval.hpp"

namespace viewlab {

std::string to_string(Assimilation a) {
  switch (a) {
    case Assimilation::baseline: return "baseline";
    case Assimilation::a1_replace: return "a1_replace";
    case Assimilation::a2_multiview: return "a2_multiview";
  }
  return "?";
}

Assimilation assimilation_from_string(const std::string& s) {
  for (auto a : {Assimilation::baseline, Assimilation::a1_replace, Assimilation::a2_multiview})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown assimilation mode: " + s);
}

std::string to_string(ViewSource s) {
  switch (s) {
    case ViewSource::expert: return "expert";
    case ViewSource::w_search_cache: return "w_search_cache";
    case ViewSource::w_perturb_cache: return "w_perturb_cache";
  }
  return "?";
}

ViewSource view_source_from_string(const std::string& s) {
  for (auto v : {ViewSource::expert, ViewSource::w_search_cache, ViewSource::w_perturb_cache})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown view source: " + s);
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("train: batch size must be >= 2");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (!(optimizer.lr >= 0.0) || !(optimizer.weight_decay >= 0.0) || !(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0))
    throw ConfigError("train: optimizer needs lr >= 0, weight decay >= 0 and momentum in [0, 1)");
  if (knn_every < 1 || knn_k < 1) throw ConfigError("train: knn cadence and k must be positive");
  if (embedding_dim < 1) throw ConfigError("train: embedding dim must be positive");
  loss.validate();
  expert.validate();
  weak.validate();
  const bool cached = view_source != ViewSource::expert;
  if ((assimilation == Assimilation::baseline) == cached)
    throw ConfigError("train: assimilation " + to_string(assimilation) + " does not fit view source " +
                      to_string(view_source));
  if ((assimilation == Assimilation::a2_multiview) != is_a2(loss.variant))
    throw ConfigError("train: loss " + to_string(loss.variant) + " does not fit assimilation " + to_string(assimilation));
  if (assimilation == Assimilation::a2_multiview && generated_views < 1)
    throw ConfigError("train: A2 needs at least one generated view per anchor");
  if (uses_predictor(loss.variant) && predictor_hidden < 1) throw ConfigError("train: predictor hidden width must be positive");
}

TrainConfig TrainConfig::preset(const std::string& name) {
  TrainConfig c;
  if (name == "desk") return c;
  c.optimizer.momentum = 0.9;
  c.cosine_decay = true;
  c.loss.temperature = 0.5;
  if (name == "cifar10") {
    c.optimizer.lr = 0.015;
    c.optimizer.weight_decay = 5e-5;
    c.batch_size = 128;
    c.epochs = 800;
    c.loss.variant = LossVariant::infonce;
  } else if (name == "cifar100") {
    c.optimizer.lr = 0.5;
    c.optimizer.weight_decay = 1e-4;
    c.batch_size = 512;
    c.epochs = 1200;
  } else if (name == "tinyimagenet") {
    c.optimizer.lr = 0.5;
    c.optimizer.weight_decay = 1e-4;
    c.batch_size = 512;
    c.epochs = 1000;
  } else {
    throw ConfigError("unknown train preset: " + name);
  }
  return c;
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (total_steps == 0) throw ConfigError("cosine_lr: total steps must be positive");
  if (step > total_steps) {
    spdlog::warn("cosine_lr: step {} past schedule end {}; using lr 0", step, total_steps);
    return 0.0;
  }
  if (step == total_steps) return 0.0;
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total_steps)));
}

MultiviewBatch assemble_views(const Dataset& ds, const std::vector<std::size_t>& anchors, const TrainConfig& cfg,
                              const ViewCache* cache, std::size_t epoch) {
  const std::size_t n = anchors.size();
  if (n < 2) throw ConfigError("assemble_views: need at least two anchors");
  const bool cached = cfg.assimilation != Assimilation::baseline;
  if (cached) {
    if (!cache) throw ConfigError("assemble_views: " + to_string(cfg.assimilation) + " needs a view cache");
    const CacheHeader& h = cache->header();
    if (!h.has_images) throw ConfigError("assemble_views: view cache holds no images");
    if (!(h.image == ds.shape)) throw ConfigError("assemble_views: view cache image shape does not match the dataset");
    if (h.dataset_id != ds.id)
      throw ConfigError("assemble_views: view cache was built for dataset '" + h.dataset_id + "', not '" + ds.id + "'");
  }
  const std::size_t m = cfg.assimilation == Assimilation::a2_multiview ? cfg.generated_views : 0;

  MultiviewBatch batch;
  batch.views.resize(2 * n + n * m);
  for (std::size_t a = 0; a < n; ++a) {
    const std::size_t id = anchors[a];
    if (id >= ds.size()) throw ConfigError("assemble_views: anchor " + std::to_string(id) + " out of range");
    Rng rng = make_stream(cfg.seed, {tag(StreamTag::expert_view), epoch, id});
    batch.views[a] = expert_transform(ds.images[id], ds.shape, cfg.expert, rng);
    if (!cached) {
      batch.views[n + a] = expert_transform(ds.images[id], ds.shape, cfg.expert, rng);
      continue;
    }
    const CacheRecord rec = cache->record(id);
    std::uniform_int_distribution<std::size_t> pick(0, rec.images.size() - 1);
    if (cfg.assimilation == Assimilation::a1_replace) {
      batch.views[n + a] = expert_transform(rec.images[pick(rng)], ds.shape, cfg.weak, rng);
      continue;
    }
    batch.views[n + a] = expert_transform(ds.images[id], ds.shape, cfg.expert, rng);
    for (std::size_t r = 0; r < m; ++r) {
      const ImageTensor& g = rec.images[pick(rng)];
      batch.views[2 * n + a * m + r] = cfg.weak_on_generated ? expert_transform(g, ds.shape, cfg.weak, rng) : g;
    }
  }
  batch.index_map = m > 0 ? append_generated(build_two_view(n), m) : build_two_view(n);
  batch.anchor_ids.resize(batch.views.size());
  for (std::size_t i = 0; i < batch.views.size(); ++i) batch.anchor_ids[i] = anchors[batch.index_map.anchor_of(i)];
  return batch;
}

TrainState TrainState::create(const ImageShape& image, const TrainConfig& cfg) {
  Rng init = make_stream(cfg.seed, {tag(StreamTag::init)});
  const std::uint64_t encoder_seed = init();
  const std::uint64_t predictor_seed = init();
  TrainState s{make_encoder(image, cfg.embedding_dim, encoder_seed), std::nullopt, Sgd(cfg.optimizer),
               Sgd(cfg.optimizer), 0};
  if (uses_predictor(cfg.loss.variant))
    s.predictor = make_predictor(cfg.embedding_dim, cfg.predictor_hidden, predictor_seed);
  return s;
}

namespace {

std::string step_diagnostics(const MultiviewBatch& batch, const TrainState& state, double lr) {
  std::ostringstream os;
  // The first N views carry one entry per anchor.
  const std::size_t n = std::min(batch.index_map.anchors(), batch.anchor_ids.size());
  os << "step " << state.step << ", " << batch.views.size() << " views, anchors [";
  for (std::size_t i = 0; i < std::min<std::size_t>(n, 8); ++i) os << (i ? " " : "") << batch.anchor_ids[i];
  if (n > 8) os << " ...";
  os << "], lr " << lr << ", encoder |theta| " << state.encoder.parameters().norm()
     << ", embeddings finite: " << (batch.embeddings.allFinite() ? "yes" : "no");
  return os.str();
}

}  // namespace

double train_step(MultiviewBatch& batch, TrainState& state, const TrainConfig& cfg, double lr) {
  const std::size_t v = batch.views.size();
  std::vector<EncodedView> encoded;
  encoded.reserve(v);
  batch.embeddings.resize(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(state.encoder.output_size()));
  for (std::size_t i = 0; i < v; ++i) {
    encoded.push_back(encode_linearized(state.encoder, batch.views[i]));
    batch.embeddings.row(static_cast<Eigen::Index>(i)) = encoded.back().z.transpose();
  }
  if (!batch.embeddings.allFinite())
    throw NumericalError("train_step: non-finite embeddings (" + step_diagnostics(batch, state, lr) + ")");
  const LossResult r = compute_loss(batch, cfg.loss, state.predictor ? &*state.predictor : nullptr);
  if (!std::isfinite(r.value) || !r.grad.allFinite())
    throw NumericalError("train_step: non-finite loss (" + step_diagnostics(batch, state, lr) + ")");

  Vector grad = Vector::Zero(static_cast<Eigen::Index>(state.encoder.parameter_count()));
  for (std::size_t i = 0; i < v; ++i) encoded[i].pullback(r.grad.row(static_cast<Eigen::Index>(i)).transpose(), &grad);
  Vector params = state.encoder.parameters();
  state.encoder_opt.step(params, grad, lr);
  state.encoder.set_parameters(params);
  if (state.predictor) {
    Vector p = state.predictor->parameters();
    state.predictor_opt.step(p, r.predictor_grad, lr);
    state.predictor->set_parameters(p);
  }
  ++state.step;
  return r.value;
}

PretrainReport pretrain(const TrainConfig& cfg, const Dataset& train, const Dataset& test, const ViewCache* cache,
                        const PretrainOutputs& out, TrainState* state_out) {
  cfg.validate();
  train.validate();
  test.validate();
  if (cfg.assimilation != Assimilation::baseline && !cache)
    throw ConfigError("pretrain: " + to_string(cfg.view_source) + " needs a view cache");
  const std::size_t batches = train.size() / cfg.batch_size;
  if (batches == 0)
    throw ConfigError("pretrain: " + std::to_string(train.size()) + " training images do not fill one batch of " +
                      std::to_string(cfg.batch_size));
  if (cfg.knn_k > train.size()) throw ConfigError("pretrain: knn k exceeds the training set size");
  const std::size_t total = cfg.epochs * batches;

  TrainState state = TrainState::create(train.shape, cfg);
  PretrainReport report;
  std::string csv;
  if (!out.provenance.empty()) csv += "# " + out.provenance.dump() + "\n";
  csv += "step,epoch,lr,loss,knn5_acc\n";
  char line[160];

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0u);
    Rng rng = make_stream(cfg.seed, {tag(StreamTag::shuffle), epoch});
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::vector<std::size_t> anchors(order.begin() + static_cast<std::ptrdiff_t>(b * cfg.batch_size),
                                             order.begin() + static_cast<std::ptrdiff_t>((b + 1) * cfg.batch_size));
      MultiviewBatch batch = assemble_views(train, anchors, cfg, cache, epoch);
      const double lr = cfg.cosine_decay ? cosine_lr(state.step, total, cfg.optimizer.lr) : cfg.optimizer.lr;
      const double loss = train_step(batch, state, cfg, lr);
      report.step_losses.push_back(loss);
      epoch_loss += loss;
      std::snprintf(line, sizeof line, "%zu,%zu,%.10g,%.10g,", state.step, epoch + 1, lr, loss);
      csv += line;
      if (b + 1 == batches && ((epoch + 1) % cfg.knn_every == 0 || epoch + 1 == cfg.epochs)) {
        const double acc = knn_eval(state.encoder, train, test, cfg.knn_k);
        report.knn_curve.emplace_back(epoch + 1, acc);
        std::snprintf(line, sizeof line, "%.10g", acc);
        csv += line;
        spdlog::info("epoch {}/{}: loss {:.4f}, {}-NN {:.4f}", epoch + 1, cfg.epochs,
                     epoch_loss / static_cast<double>(batches), cfg.knn_k, acc);
      } else if (b + 1 == batches) {
        spdlog::debug("epoch {}/{}: loss {:.4f}", epoch + 1, cfg.epochs, epoch_loss / static_cast<double>(batches));
      }
      csv += "\n";
    }
  }

  if (!out.metrics.empty()) {
    io::atomic_write(out.metrics, [&](std::ostream& os) { os << csv; });
    report.metrics = out.metrics;
  }
  if (!out.checkpoint.empty()) {
    nlohmann::json extra = {{"provenance", out.provenance},
                            {"assimilation", to_string(cfg.assimilation)},
                            {"loss", to_string(cfg.loss.variant)},
                            {"epochs", cfg.epochs},
                            {"steps", state.step}};
    save_checkpoint(out.checkpoint, state.encoder, cfg.seed, extra);
    report.checkpoint = out.checkpoint;
  }
  if (state_out) *state_out = std::move(state);
  return report;
}

}  // namespace viewlab
