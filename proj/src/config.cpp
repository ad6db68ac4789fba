#include "viewlab/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "viewlab/binary_io.hpp"

namespace viewlab {

using nlohmann::json;

#ifndef VIEWLAB_VERSION
#define VIEWLAB_VERSION "unknown"
#endif

const char* version() { return VIEWLAB_VERSION; }

std::string to_string(MiSpace s) { return s == MiSpace::embedding ? "embedding" : "pixels"; }

MiSpace mi_space_from_string(const std::string& s) {
  if (s == "embedding") return MiSpace::embedding;
  if (s == "pixels") return MiSpace::pixels;
  throw ConfigError("unknown MI space: " + s);
}

namespace {

std::string to_string(Reduction r) { return r == Reduction::mean ? "mean" : "sum"; }
Reduction reduction_from_string(const std::string& s) {
  if (s == "mean") return Reduction::mean;
  if (s == "sum") return Reduction::sum;
  throw ConfigError("unknown reduction: " + s);
}
std::string to_string(SimSiamSign s) { return s == SimSiamSign::negative_cosine ? "negative_cosine" : "cosine"; }
SimSiamSign simsiam_sign_from_string(const std::string& s) {
  if (s == "negative_cosine") return SimSiamSign::negative_cosine;
  if (s == "cosine") return SimSiamSign::cosine;
  throw ConfigError("unknown SimSiam sign: " + s);
}

/// Strict reader over one JSON object: every key must be consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(label() + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError(where(key) + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer() || (!it->is_number_unsigned() && it->template get<long long>() < 0))
        throw ConfigError(where(key) + ": expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError(where(key) + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ConfigError(where(key) + ": expected a string");
    }
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  template <class E, class Parse>
  void get_enum(const char* key, E& out, Parse parse) {
    if (!j_.contains(key)) return;
    std::string s;
    get(key, s);
    try {
      out = parse(s);
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  template <class F>
  void section(const char* key, F&& read) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    Section s(*it, where(key));
    read(s);
    s.finish();
  }

  bool has(const char* key) const { return j_.contains(key); }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key '" + where(k) + "'");
  }

 private:
  std::string label() const { return path_.empty() ? "config" : path_; }
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json transform_json(const TransformConfig& t) {
  return {{"crop_scale_low", t.crop_scale_low},   {"crop_scale_high", t.crop_scale_high},
          {"aspect_low", t.aspect_low},           {"aspect_high", t.aspect_high},
          {"flip_probability", t.flip_probability}, {"color_jitter_strength", t.color_jitter_strength},
          {"preset", to_string(t.preset)}};
}

void read_transform(Section& s, TransformConfig& t) {
  // A preset name resets every field first; explicit fields then override.
  if (s.has("preset")) {
    TransformPreset p = t.preset;
    s.get_enum("preset", p, transform_preset_from_string);
    t = p == TransformPreset::full ? TransformConfig::full()
        : p == TransformPreset::weak ? TransformConfig::weak()
                                     : TransformConfig::identity();
  }
  s.get("crop_scale_low", t.crop_scale_low);
  s.get("crop_scale_high", t.crop_scale_high);
  s.get("aspect_low", t.aspect_low);
  s.get("aspect_high", t.aspect_high);
  s.get("flip_probability", t.flip_probability);
  s.get("color_jitter_strength", t.color_jitter_strength);
}

json sgd_json(const SgdConfig& o) {
  return {{"lr", o.lr}, {"momentum", o.momentum}, {"weight_decay", o.weight_decay}};
}

void read_sgd(Section& s, SgdConfig& o) {
  s.get("lr", o.lr);
  s.get("momentum", o.momentum);
  s.get("weight_decay", o.weight_decay);
}

json mine_json(const MineConfig& m) {
  return {{"hidden", m.hidden},
          {"steps", m.steps},
          {"batch_size", m.batch_size},
          {"lr", m.lr},
          {"ema_decay", m.ema_decay},
          {"held_out_fraction", m.held_out_fraction},
          {"eval_every", m.eval_every},
          {"smoothing", m.smoothing},
          {"max_nats", m.max_nats}};
}

void read_mine(Section& s, MineConfig& m) {
  s.get("hidden", m.hidden);
  s.get("steps", m.steps);
  s.get("batch_size", m.batch_size);
  s.get("lr", m.lr);
  s.get("ema_decay", m.ema_decay);
  s.get("held_out_fraction", m.held_out_fraction);
  s.get("eval_every", m.eval_every);
  s.get("smoothing", m.smoothing);
  s.get("max_nats", m.max_nats);
}

json search_json(const WSearchConfig& w) {
  return {{"epsilon1", w.epsilon1},
          {"epsilon2", w.epsilon2},
          {"lambda", w.lambda},
          {"views", w.views},
          {"steps", w.steps},
          {"step_size", w.step_size},
          {"init_policy", to_string(w.init_policy)},
          {"tol", w.tol},
          {"init_noise", w.init_noise},
          {"random_init_std", w.random_init_std},
          {"diversity", to_string(w.diversity)},
          {"penalty", to_string(w.penalty)},
          {"huber_delta", w.huber_delta},
          {"normalize", w.normalize}};
}

void read_search(Section& s, WSearchConfig& w) {
  s.get("epsilon1", w.epsilon1);
  s.get("epsilon2", w.epsilon2);
  s.get("lambda", w.lambda);
  s.get("views", w.views);
  s.get("steps", w.steps);
  s.get("step_size", w.step_size);
  s.get_enum("init_policy", w.init_policy, init_policy_from_string);
  s.get("tol", w.tol);
  s.get("init_noise", w.init_noise);
  s.get("random_init_std", w.random_init_std);
  s.get_enum("diversity", w.diversity, diversity_space_from_string);
  s.get_enum("penalty", w.penalty, boundary_penalty_from_string);
  s.get("huber_delta", w.huber_delta);
  s.get("normalize", w.normalize);
}

json train_json(const TrainConfig& t) {
  return {{"assimilation", to_string(t.assimilation)},
          {"view_source", to_string(t.view_source)},
          {"optimizer", sgd_json(t.optimizer)},
          {"cosine_decay", t.cosine_decay},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"loss",
           {{"temperature", t.loss.temperature},
            {"alpha", t.loss.alpha},
            {"variant", to_string(t.loss.variant)},
            {"include_generated_negatives", t.loss.include_generated_negatives},
            {"reduction", to_string(t.loss.reduction)},
            {"a2_simsiam_sign", to_string(t.loss.a2_simsiam_sign)}}},
          {"generated_views", t.generated_views},
          {"expert", transform_json(t.expert)},
          {"weak", transform_json(t.weak)},
          {"weak_on_generated", t.weak_on_generated},
          {"knn_every", t.knn_every},
          {"knn_k", t.knn_k}};
}

void read_train(Section& s, TrainConfig& t) {
  if (s.has("preset")) {
    std::string name;
    s.get("preset", name);
    try {
      t = TrainConfig::preset(name);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("train.preset: ") + e.what());
    }
  }
  s.get_enum("assimilation", t.assimilation, assimilation_from_string);
  s.get_enum("view_source", t.view_source, view_source_from_string);
  s.section("optimizer", [&](Section& o) { read_sgd(o, t.optimizer); });
  s.get("cosine_decay", t.cosine_decay);
  s.get("batch_size", t.batch_size);
  s.get("epochs", t.epochs);
  s.section("loss", [&](Section& l) {
    l.get("temperature", t.loss.temperature);
    l.get("alpha", t.loss.alpha);
    l.get_enum("variant", t.loss.variant, loss_variant_from_string);
    l.get("include_generated_negatives", t.loss.include_generated_negatives);
    l.get_enum("reduction", t.loss.reduction, reduction_from_string);
    l.get_enum("a2_simsiam_sign", t.loss.a2_simsiam_sign, simsiam_sign_from_string);
  });
  s.get("generated_views", t.generated_views);
  s.section("expert", [&](Section& x) { read_transform(x, t.expert); });
  s.section("weak", [&](Section& x) { read_transform(x, t.weak); });
  s.get("weak_on_generated", t.weak_on_generated);
  s.get("knn_every", t.knn_every);
  s.get("knn_k", t.knn_k);
}

}  // namespace

void ExperimentConfig::validate() const {
  dataset_config().validate();
  inversion.validate();
  if (viewgen.op == GeneratorOp::w_search) viewgen.search.validate();
  viewgen.perturb.validate();
  if (!(viewgen.max_skip_fraction >= 0.0 && viewgen.max_skip_fraction <= 1.0))
    throw ConfigError("viewgen.max_skip_fraction must lie in [0, 1]");
  train_config().validate();
  eval.probe.validate();
  eval.probe.mine.validate();
  if (eval.mi_pixel_pool < 1) throw ConfigError("eval.mi_pixel_pool must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

json ExperimentConfig::to_json() const {
  json ds = dataset.to_json();
  ds.erase("seed");
  json ev = {{"epochs", eval.probe.epochs},
             {"optimizer", sgd_json(eval.probe.optimizer)},
             {"batch_size", eval.probe.batch_size},
             {"cosine_decay", eval.probe.cosine_decay},
             {"standardize", eval.probe.standardize},
             {"k", eval.probe.k},
             {"mine", mine_json(eval.probe.mine)},
             {"mi_space", to_string(eval.mi_space)},
             {"mi_pixel_pool", eval.mi_pixel_pool}};
  return {{"dataset", ds},
          {"model", {{"embedding_dim", model.embedding_dim}, {"predictor_hidden", model.predictor_hidden}}},
          {"viewgen",
           {{"op", to_string(viewgen.op)},
            {"search", search_json(viewgen.search)},
            {"perturb", {{"sigma", viewgen.perturb.sigma}, {"count", viewgen.perturb.count}}},
            {"max_skip_fraction", viewgen.max_skip_fraction}}},
          {"inversion", inversion.to_json()},
          {"train", train_json(train)},
          {"eval", ev},
          {"seed", seed},
          {"output_dir", output_dir}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  Section root(j, "");
  root.section("dataset", [&](Section& s) {
    s.get("classes", c.dataset.classes);
    s.get("train_per_class", c.dataset.train_per_class);
    s.get("test_per_class", c.dataset.test_per_class);
    if (s.has("image")) {
      std::vector<std::size_t> dims;
      s.get("image", dims);
      if (dims.size() != 3) throw ConfigError("dataset.image: expected [channels, height, width]");
      c.dataset.image = {dims[0], dims[1], dims[2]};
    }
    s.get("blobs", c.dataset.blobs);
    s.get("within_class_std", c.dataset.within_class_std);
  });
  root.section("model", [&](Section& s) {
    s.get("embedding_dim", c.model.embedding_dim);
    s.get("predictor_hidden", c.model.predictor_hidden);
  });
  root.section("viewgen", [&](Section& s) {
    s.get_enum("op", c.viewgen.op, generator_op_from_string);
    s.section("search", [&](Section& w) { read_search(w, c.viewgen.search); });
    s.section("perturb", [&](Section& p) {
      p.get("sigma", c.viewgen.perturb.sigma);
      p.get("count", c.viewgen.perturb.count);
    });
    s.get("max_skip_fraction", c.viewgen.max_skip_fraction);
  });
  root.section("inversion", [&](Section& s) {
    auto& v = c.inversion;
    s.get("lambda_vgg", v.lambda_vgg);
    s.get("lambda_adv", v.lambda_adv);
    s.get("encoder_steps", v.encoder_steps);
    s.get("batch_size", v.batch_size);
    s.get("encoder_lr", v.encoder_lr);
    s.get("eval_every", v.eval_every);
    s.get("latent_opt_steps", v.latent_opt_steps);
    s.get("latent_step_size", v.latent_step_size);
    s.section("discriminator", [&](Section& d) {
      d.get("steps", v.discriminator.steps);
      d.get("batch_size", v.discriminator.batch_size);
      d.get("lr", v.discriminator.lr);
      d.get("fake_latent_std", v.discriminator.fake_latent_std);
    });
  });
  root.section("train", [&](Section& s) { read_train(s, c.train); });
  root.section("eval", [&](Section& s) {
    auto& p = c.eval.probe;
    s.get("epochs", p.epochs);
    s.section("optimizer", [&](Section& o) { read_sgd(o, p.optimizer); });
    s.get("batch_size", p.batch_size);
    s.get("cosine_decay", p.cosine_decay);
    s.get("standardize", p.standardize);
    s.get("k", p.k);
    s.section("mine", [&](Section& m) { read_mine(m, p.mine); });
    s.get_enum("mi_space", c.eval.mi_space, mi_space_from_string);
    s.get("mi_pixel_pool", c.eval.mi_pixel_pool);
  });
  root.get("seed", c.seed);
  root.get("output_dir", c.output_dir);
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return from_json(j);
}

std::string ExperimentConfig::hash() const {
  json j = to_json();
  j.erase("output_dir");
  const std::string canonical = j.dump();
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", io::crc32(0, canonical.data(), canonical.size()));
  return buf;
}

BlobDatasetConfig ExperimentConfig::dataset_config() const {
  BlobDatasetConfig d = dataset;
  d.seed = seed;
  return d;
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  t.embedding_dim = model.embedding_dim;
  t.predictor_hidden = model.predictor_hidden;
  return t;
}

void set_config_path(json& doc, const std::string& path, const json& value) {
  json* node = &doc;
  std::stringstream ss(path);
  std::string part;
  std::string walked;
  while (std::getline(ss, part, '.')) {
    walked += (walked.empty() ? "" : ".") + part;
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config path '" + walked + "'");
    node = &(*node)[part];
  }
  if (walked.empty()) throw ConfigError("empty config path");
  *node = value;
}

}  // namespace viewlab
