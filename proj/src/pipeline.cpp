#include "viewlab/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "viewlab/binary_io.hpp"

namespace viewlab {

namespace fs = std::filesystem;
using nlohmann::json;

MissingArtifact::MissingArtifact(const fs::path& path, const std::string& command, const std::string& hint)
    : ConfigError("missing " + path.string() + ": run '" + command + "' first" + (hint.empty() ? "" : " (" + hint + ")")),
      command_(command) {}

std::string run_name(const TrainConfig& t) {
  std::string name;
  switch (t.assimilation) {
    case Assimilation::baseline: name = "baseline"; break;
    case Assimilation::a1_replace: name = "a1"; break;
    case Assimilation::a2_multiview: name = "a2"; break;
  }
  if (t.view_source == ViewSource::w_search_cache) name += "-w_search";
  if (t.view_source == ViewSource::w_perturb_cache) name += "-w_perturb";
  std::string loss = to_string(t.loss.variant);
  for (auto& c : loss) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return name + "-" + loss;
}

TrainConfig baseline_of(const TrainConfig& t) {
  TrainConfig b = t;
  b.assimilation = Assimilation::baseline;
  b.view_source = ViewSource::expert;
  switch (t.loss.variant) {
    case LossVariant::a2_simclr:
    case LossVariant::a2_full: b.loss.variant = LossVariant::simclr; break;
    case LossVariant::a2_infonce: b.loss.variant = LossVariant::infonce; break;
    case LossVariant::a2_simsiam: b.loss.variant = LossVariant::simsiam; break;
    default: break;
  }
  return b;
}

json provenance(const ExperimentConfig& cfg) {
  return {{"config_hash", cfg.hash()}, {"seed", cfg.seed}, {"version", version()}};
}

namespace {

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  io::atomic_write(path, [&](std::ostream& os) { os << j.dump(2) << "\n"; });
}

json with_provenance(const ExperimentConfig& cfg, json j) {
  j["provenance"] = provenance(cfg);
  return j;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// The dataset on disk, checked against the config that should have made it.
DatasetSplit require_dataset(const ExperimentConfig& cfg) {
  const Workspace ws(cfg.output_dir);
  const fs::path meta = ws.dataset_dir() / "dataset.json";
  if (!fs::exists(meta)) throw MissingArtifact(ws.dataset_dir(), "make-dataset");
  std::ifstream is(meta);
  const json stored = json::parse(is);
  if (stored.at("dataset") != cfg.dataset_config().to_json())
    throw ConfigError("dataset in " + ws.dataset_dir().string() +
                      " was made with different settings; rerun 'make-dataset --force'");
  return FileDatasetSource(ws.dataset_dir()).load();
}

GeneratorOp op_of(ViewSource s) {
  return s == ViewSource::w_search_cache ? GeneratorOp::w_search : GeneratorOp::w_perturb;
}

Network require_encoder(const ExperimentConfig& cfg, const std::string& run) {
  const Workspace ws(cfg.output_dir);
  const fs::path p = ws.encoder(run);
  if (!fs::exists(p)) throw MissingArtifact(p, "pretrain", "run " + run);
  return load_network(p);
}

std::uint64_t derived_seed(std::uint64_t seed, StreamTag t, std::uint64_t key) {
  Rng rng = make_stream(seed, {tag(t), key});
  return rng();
}

}  // namespace

json make_dataset(const ExperimentConfig& cfg, bool force) {
  const Workspace ws(cfg.output_dir);
  const fs::path dir = ws.dataset_dir();
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw ConfigError(dir.string() + " is not empty; pass --force to overwrite");
    fs::remove_all(dir);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const BlobDatasetConfig dc = cfg.dataset_config();
  const DatasetSplit split = make_blob_dataset(dc);
  save_split(dir, split);
  auto counts = [](const Dataset& d) {
    json c = json::array();
    for (auto n : d.class_counts()) c.push_back(n);
    return c;
  };
  json summary = with_provenance(cfg, {{"dataset", dc.to_json()},
                                       {"train_id", split.train.id},
                                       {"test_id", split.test.id},
                                       {"train_records", split.train.size()},
                                       {"test_records", split.test.size()},
                                       {"train_class_counts", counts(split.train)},
                                       {"test_class_counts", counts(split.test)}});
  write_json(dir / "dataset.json", summary);
  summary["wall_clock_seconds"] = seconds_since(t0);
  return summary;
}

json invert(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const Workspace ws(cfg.output_dir);
  const DatasetSplit split = require_dataset(cfg);
  const ImageShape shape = split.train.shape;
  const InversionConfig& ic = cfg.inversion;
  const BlobGenerator g(shape, cfg.dataset.blobs);
  Network h = make_perceptual(shape, derived_seed(cfg.seed, StreamTag::inversion, 0));
  Network d = make_discriminator(shape, derived_seed(cfg.seed, StreamTag::discriminator, 0));
  Network e = make_inverter(shape, g.latent_dim(), derived_seed(cfg.seed, StreamTag::inversion, 1));
  const DifferentiableMap* dp = ic.lambda_adv > 0.0 ? &d : nullptr;
  const DifferentiableMap* hp = ic.lambda_vgg > 0.0 ? &h : nullptr;

  json report = json::object();
  if (dp) {
    const auto dr = pretrain_discriminator(d, split.train.images, g, ic.discriminator, cfg.seed);
    report["discriminator"] = {{"final_loss", dr.final_loss}, {"accuracy", dr.accuracy}};
  }
  const auto ir = train_inverter(split.train.images, split.test.images, e, g, dp, hp, ic, cfg.seed);
  report["inverter"] = {{"initial_held_out", ir.initial_held_out},
                        {"final_held_out", ir.final_held_out},
                        {"steps", ir.steps},
                        {"curve", ir.curve}};
  spdlog::info("invert: inverter held-out loss {:.4f} -> {:.4f}", ir.initial_held_out, ir.final_held_out);

  std::vector<LatentCode> latents;
  latents.reserve(split.train.size());
  double mse = 0.0, latent_rmse = 0.0, loss_before = 0.0, loss_after = 0.0;
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    const ImageTensor& x = split.train.images[i];
    if (ic.latent_opt_steps > 0) {
      auto opt = optimize_latent(x, e, g, dp, hp, ic);
      loss_before += opt.initial_loss;
      loss_after += opt.final_loss;
      latents.push_back(std::move(opt.latent));
    } else {
      latents.push_back(e.evaluate(x));
    }
    mse += (g.evaluate(latents.back()) - x).squaredNorm() / static_cast<double>(x.size());
    if (!split.train.latents.empty())
      latent_rmse += (latents.back() - split.train.latents[i]).squaredNorm() / static_cast<double>(latents.back().size());
  }
  const double n = static_cast<double>(split.train.size());
  report["reconstruction_mse"] = mse / n;
  if (!split.train.latents.empty()) report["planted_latent_rmse"] = std::sqrt(latent_rmse / n);
  if (ic.latent_opt_steps > 0) report["latent_optimization"] = {{"mean_initial_loss", loss_before / n},
                                                                {"mean_final_loss", loss_after / n}};

  fs::create_directories(ws.inversion_dir());
  write_inversion_cache(ws.latents(), split.train.id, map_fingerprint(g), latents);
  save_checkpoint(ws.inverter(), e, cfg.seed, {{"provenance", provenance(cfg)}});
  report = with_provenance(cfg, report);
  report["wall_clock_seconds"] = seconds_since(t0);
  write_json(ws.inversion_dir() / "inversion.json", report);
  return report;
}

json gen_views(const ExperimentConfig& cfg) {
  const Workspace ws(cfg.output_dir);
  const DatasetSplit split = require_dataset(cfg);
  if (!fs::exists(ws.latents())) throw MissingArtifact(ws.latents(), "invert");
  const BlobGenerator g(split.train.shape, cfg.dataset.blobs);
  const ViewCache inv = ViewCache::open(ws.latents());
  if (inv.header().generator_hash != map_fingerprint(g) || inv.header().dataset_id != split.train.id)
    throw ConfigError(ws.latents().string() + " was inverted for another generator or dataset; rerun 'invert'");
  const std::vector<LatentCode> latents = read_inversion_cache(ws.latents());

  CacheJob job;
  job.op = cfg.viewgen.op;
  job.search = cfg.viewgen.search;
  job.perturb = cfg.viewgen.perturb;
  job.seed = cfg.seed;
  job.max_skip_fraction = cfg.viewgen.max_skip_fraction;
  std::optional<Network> f;
  std::string encoder_run;
  if (job.op == GeneratorOp::w_search) {
    encoder_run = run_name(baseline_of(cfg.train_config()));
    f = require_encoder(cfg, encoder_run);
  }
  const fs::path path = ws.view_cache(job.op);
  fs::create_directories(path.parent_path());
  const CacheSummary s = generate_and_cache(split.train, g, f ? &*f : nullptr, latents, job, path);
  json summary = with_provenance(cfg, s.to_json());
  summary["op"] = to_string(job.op);
  summary["cache"] = path.string();
  if (!encoder_run.empty()) summary["encoder_run"] = encoder_run;
  write_json(fs::path(path).replace_extension(".json"), summary);
  spdlog::info("gen-views: {} anchors x {} views ({} skipped) in {:.1f}s", s.records, s.views_per_anchor, s.skipped,
               s.wall_clock_seconds);
  return summary;
}

json pretrain_run(const ExperimentConfig& cfg, bool baseline) {
  const auto t0 = std::chrono::steady_clock::now();
  const Workspace ws(cfg.output_dir);
  const DatasetSplit split = require_dataset(cfg);
  const TrainConfig tc = baseline ? baseline_of(cfg.train_config()) : cfg.train_config();
  std::optional<ViewCache> cache;
  if (tc.view_source != ViewSource::expert) {
    const fs::path p = ws.view_cache(op_of(tc.view_source));
    if (!fs::exists(p))
      throw MissingArtifact(p, "gen-views", "with viewgen.op = " + to_string(op_of(tc.view_source)));
    cache = ViewCache::open(p);
  }
  const std::string run = run_name(tc);
  fs::create_directories(ws.run_dir(run));
  const PretrainOutputs out{ws.encoder(run), ws.metrics(run), provenance(cfg)};
  const PretrainReport r = pretrain(tc, split.train, split.test, cache ? &*cache : nullptr, out);
  json curve = json::array();
  for (const auto& [epoch, acc] : r.knn_curve) curve.push_back({{"epoch", epoch}, {"knn5_acc", acc}});
  json summary = with_provenance(cfg, {{"run", run},
                                       {"steps", r.step_losses.size()},
                                       {"final_loss", r.step_losses.empty() ? 0.0 : r.step_losses.back()},
                                       {"knn_curve", curve},
                                       {"checkpoint", out.checkpoint.string()},
                                       {"metrics", out.metrics.string()}});
  summary["wall_clock_seconds"] = seconds_since(t0);
  write_json(ws.run_dir(run) / "pretrain.json", summary);
  return summary;
}

json probe(const ExperimentConfig& cfg, const std::string& run_in) {
  const Workspace ws(cfg.output_dir);
  const std::string run = run_in.empty() ? run_name(cfg.train_config()) : run_in;
  const DatasetSplit split = require_dataset(cfg);
  const Network f = require_encoder(cfg, run);
  const double acc = linear_probe(f, split.train, split.test, cfg.eval.probe, cfg.seed);
  json row = metric_row("linear_probe_acc1", acc, cfg.hash(), cfg.seed);
  row["run"] = run;
  row["version"] = version();
  write_json(ws.run_dir(run) / "probe.json", row);
  return row;
}

json knn(const ExperimentConfig& cfg, const std::string& run_in) {
  const Workspace ws(cfg.output_dir);
  const std::string run = run_in.empty() ? run_name(cfg.train_config()) : run_in;
  const DatasetSplit split = require_dataset(cfg);
  const Network f = require_encoder(cfg, run);
  const std::size_t k = cfg.eval.probe.k;
  const double acc = knn_eval(f, split.train, split.test, k);
  json row = metric_row("knn" + std::to_string(k) + "_acc", acc, cfg.hash(), cfg.seed);
  row["run"] = run;
  row["version"] = version();
  write_json(ws.run_dir(run) / "knn.json", row);
  return row;
}

namespace {

Vector pooled(const ImageTensor& x, const ImageShape& s, std::size_t p) {
  const std::size_t h = s.height / p, w = s.width / p;
  Vector out = Vector::Zero(static_cast<Eigen::Index>(s.channels * h * w));
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t i = 0; i < h * p; ++i)
      for (std::size_t j = 0; j < w * p; ++j)
        out[static_cast<Eigen::Index>((c * h + i / p) * w + j / p)] +=
            x[static_cast<Eigen::Index>((c * s.height + i) * s.width + j)] / static_cast<double>(p * p);
  return out;
}

}  // namespace

json mutual_information(const ExperimentConfig& cfg, const std::string& run_in) {
  const auto t0 = std::chrono::steady_clock::now();
  const Workspace ws(cfg.output_dir);
  const DatasetSplit split = require_dataset(cfg);
  const Dataset& ds = split.train;
  const bool pixels = cfg.eval.mi_space == MiSpace::pixels;
  std::optional<Network> f;
  std::string run;
  if (!pixels) {
    run = run_in.empty() ? run_name(cfg.train_config()) : run_in;
    f = require_encoder(cfg, run);
  }
  if (pixels && (ds.shape.height < cfg.eval.mi_pixel_pool || ds.shape.width < cfg.eval.mi_pixel_pool))
    throw ConfigError("eval.mi_pixel_pool exceeds the image size");
  auto represent = [&](const std::vector<ImageTensor>& images) {
    if (!pixels) return embed(*f, images);
    const Vector first = pooled(images.front(), ds.shape, cfg.eval.mi_pixel_pool);
    Matrix m(static_cast<Eigen::Index>(images.size()), first.size());
    for (std::size_t i = 0; i < images.size(); ++i)
      m.row(static_cast<Eigen::Index>(i)) = pooled(images[i], ds.shape, cfg.eval.mi_pixel_pool).transpose();
    return m;
  };

  const Matrix anchors = represent(ds.images);
  std::vector<ImageTensor> expert(ds.size());
  const TrainConfig tc = cfg.train_config();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Rng rng = make_stream(cfg.seed, {tag(StreamTag::mine), 1, i});
    expert[i] = expert_transform(ds.images[i], ds.shape, tc.expert, rng);
  }
  json rows = json::array();
  auto estimate = [&](const std::string& name, const Matrix& v) {
    const MineResult r = mine_estimate(anchors, v, cfg.eval.probe.mine, cfg.seed);
    json row = metric_row(name, r.estimate, cfg.hash(), cfg.seed);
    row["bound"] = r.bound;
    row["curve"] = r.curve;
    rows.push_back(row);
    spdlog::info("mi: {} = {:.4f} nats", name, r.estimate);
  };
  estimate("mi_original_expert", represent(expert));

  const fs::path cache_path = ws.view_cache(cfg.viewgen.op);
  if (fs::exists(cache_path)) {
    const ViewCache cache = ViewCache::open(cache_path);
    std::vector<ImageTensor> generated(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) generated[i] = cache.record(i).images.front();
    estimate("mi_original_" + to_string(cfg.viewgen.op), represent(generated));
  } else {
    spdlog::info("mi: no {} cache; skipping the generated-view estimate", to_string(cfg.viewgen.op));
  }
  json summary = with_provenance(cfg, {{"space", to_string(cfg.eval.mi_space)}, {"rows", rows}});
  if (!run.empty()) summary["run"] = run;
  summary["wall_clock_seconds"] = seconds_since(t0);
  write_json(ws.root / "mi.json", summary);
  return summary;
}

Curve read_knn_curve(const fs::path& csv, const std::string& label) {
  std::ifstream is(csv);
  if (!is) throw MissingArtifact(csv, "pretrain");
  Curve c{label, {}};
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line.rfind("step,epoch,lr,loss,knn5_acc", 0) != 0) throw FormatError(csv.string() + ": unexpected header");
      header = true;
      continue;
    }
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    if (cols.size() == 5 && !cols[4].empty()) c.points.emplace_back(std::stod(cols[1]), std::stod(cols[4]));
  }
  if (!header) throw FormatError(csv.string() + ": empty metric log");
  return c;
}

std::string render_svg(const std::vector<Curve>& curves, const std::string& title, const std::string& x_label,
                       const std::string& y_label) {
  constexpr double W = 640, H = 420, L = 70, R = 170, T = 40, B = 55;
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool any = false;
  for (const auto& c : curves)
    for (const auto& [x, y] : c.points) {
      if (!any) x0 = x1 = x, y0 = y1 = y;
      any = true;
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  if (x1 == x0) x1 = x0 + 1;
  y0 = std::max(0.0, std::floor(y0 * 10 - 0.5) / 10);
  y1 = std::min(1.0, std::ceil(y1 * 10 + 0.5) / 10);
  if (y1 <= y0) y1 = y0 + 0.1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream os;
  char buf[256];
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << (L + (W - L - R) / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << title
     << "</text>\n";
  for (int i = 0; i <= 5; ++i) {
    const double y = y0 + (y1 - y0) * i / 5.0, x = x0 + (x1 - x0) * i / 5.0;
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#ddd\"/>"
                  "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.2f</text>\n",
                  L, py(y), W - R, py(y), L - 6, py(y) + 4, y);
    os << buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%g</text>\n", px(x),
                  H - B + 18, std::round(x * 10) / 10);
    os << buf;
  }
  std::snprintf(buf, sizeof buf,
                "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" stroke=\"black\"/>\n", L, T,
                W - L - R, H - T - B);
  os << buf;
  os << "<text x=\"" << (L + (W - L - R) / 2) << "\" y=\"" << (H - 12) << "\" text-anchor=\"middle\">" << x_label
     << "</text>\n";
  os << "<text transform=\"translate(18," << (T + (H - T - B) / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
     << y_label << "</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const char* colour = palette[i % (sizeof palette / sizeof *palette)];
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : curves[i].points) {
      std::snprintf(buf, sizeof buf, "%.1f,%.1f ", px(x), py(y));
      os << buf;
    }
    os << "\"/>\n";
    for (const auto& [x, y] : curves[i].points) {
      std::snprintf(buf, sizeof buf, "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"2.5\" fill=\"%s\"/>\n", px(x), py(y), colour);
      os << buf;
    }
    const double ly = T + 14 + 18.0 * static_cast<double>(i);
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"%s\" stroke-width=\"2\"/>"
                  "<text x=\"%.1f\" y=\"%.1f\">",
                  W - R + 12, ly, W - R + 32, ly, colour, W - R + 38, ly + 4);
    os << buf << curves[i].label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

json plot(const ExperimentConfig& cfg, const std::vector<std::string>& runs_in) {
  const Workspace ws(cfg.output_dir);
  std::vector<std::string> runs = runs_in;
  if (runs.empty() && fs::exists(ws.root / "runs")) {
    for (const auto& entry : fs::directory_iterator(ws.root / "runs"))
      if (fs::exists(entry.path() / "metrics.csv")) runs.push_back(entry.path().filename().string());
    std::sort(runs.begin(), runs.end());
  }
  if (runs.empty()) throw MissingArtifact(ws.root / "runs", "pretrain");
  std::vector<Curve> curves;
  for (const auto& r : runs) curves.push_back(read_knn_curve(ws.metrics(r), r));
  const fs::path out = ws.root / "plots" / "knn_curves.svg";
  fs::create_directories(out.parent_path());
  const std::string svg = render_svg(curves, "5-NN accuracy during training", "epoch", "5-NN accuracy");
  io::atomic_write(out, [&](std::ostream& os) {
    os << "<!-- " << provenance(cfg).dump() << " -->\n" << svg;
  });
  return with_provenance(cfg, {{"plot", out.string()}, {"runs", runs}});
}

namespace {

using Override = std::vector<std::pair<std::string, json>>;

std::vector<Override> grid_cells(const json& grid) {
  std::vector<json> axes;
  if (grid.contains("axes")) {
    if (!grid["axes"].is_array()) throw ConfigError("sweep grid: 'axes' must be a list");
    for (const auto& a : grid["axes"]) axes.push_back(a);
  }
  if (grid.contains("parameters")) {
    if (!grid["parameters"].is_object()) throw ConfigError("sweep grid: 'parameters' must be an object");
    for (const auto& [path, values] : grid["parameters"].items()) axes.push_back(json{{path, values}});
  }
  for (const auto& [key, v] : grid.items())
    if (key != "axes" && key != "parameters" && key != "steps") throw ConfigError("sweep grid: unknown key '" + key + "'");
  if (axes.empty()) throw ConfigError("sweep grid lists no parameters");

  // Each axis becomes a list of simultaneous assignments.
  std::vector<std::vector<Override>> levels;
  for (const auto& axis : axes) {
    if (!axis.is_object() || axis.empty()) throw ConfigError("sweep grid: each axis must map paths to value lists");
    std::size_t len = 0;
    for (const auto& [path, values] : axis.items()) {
      if (!values.is_array() || values.empty()) throw ConfigError("sweep grid: '" + path + "' needs a non-empty list");
      if (len && values.size() != len) throw ConfigError("sweep grid: paths within one axis need equal-length lists");
      len = values.size();
    }
    std::vector<Override> level(len);
    for (const auto& [path, values] : axis.items())
      for (std::size_t i = 0; i < len; ++i) level[i].emplace_back(path, values[i]);
    levels.push_back(std::move(level));
  }
  std::vector<Override> cells{{}};
  for (const auto& level : levels) {
    std::vector<Override> next;
    for (const auto& c : cells)
      for (const auto& o : level) {
        Override merged = c;
        merged.insert(merged.end(), o.begin(), o.end());
        next.push_back(std::move(merged));
      }
    cells = std::move(next);
  }
  return cells;
}

}  // namespace

json sweep(const ExperimentConfig& cfg, const json& grid) {
  static const std::vector<std::string> known{"make-dataset", "invert", "gen-views", "pretrain-baseline",
                                              "pretrain",     "probe",  "knn",       "mi"};
  std::vector<std::string> steps{"make-dataset", "invert", "gen-views", "pretrain", "probe", "knn"};
  if (grid.contains("steps")) steps = grid.at("steps").get<std::vector<std::string>>();
  for (const auto& s : steps)
    if (std::find(known.begin(), known.end(), s) == known.end()) throw ConfigError("sweep grid: unknown step '" + s + "'");
  const std::vector<Override> cells = grid_cells(grid);
  const Workspace ws(cfg.output_dir);
  const fs::path results = ws.root / "sweep" / "results.jsonl";
  fs::create_directories(results.parent_path());

  std::string lines;
  std::size_t failed = 0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "cell-%03zu", i);
    json row = {{"cell", i}, {"overrides", json::object()}, {"seed", cfg.seed}};
    for (const auto& [path, value] : cells[i]) row["overrides"][path] = value;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      json doc = cfg.to_json();
      for (const auto& [path, value] : cells[i]) set_config_path(doc, path, value);
      doc["output_dir"] = (ws.root / "sweep" / name).string();
      const ExperimentConfig cell = ExperimentConfig::from_json(doc);
      row["config_hash"] = cell.hash();
      row["seed"] = cell.seed;
      row["output_dir"] = cell.output_dir;
      json metrics = json::object();
      for (const auto& step : steps) {
        spdlog::info("sweep {}: {}", name, step);
        if (step == "make-dataset") make_dataset(cell, true);
        else if (step == "invert") metrics["reconstruction_mse"] = invert(cell).at("reconstruction_mse");
        else if (step == "gen-views") gen_views(cell);
        else if (step == "pretrain-baseline") pretrain_run(cell, true);
        else if (step == "pretrain") metrics["final_loss"] = pretrain_run(cell).at("final_loss");
        else if (step == "probe") metrics["linear_probe_acc1"] = probe(cell).at("value");
        else if (step == "knn") metrics["knn_acc"] = knn(cell).at("value");
        else if (step == "mi") metrics["mi"] = mutual_information(cell).at("rows");
      }
      row["status"] = "ok";
      row["metrics"] = metrics;
    } catch (const std::exception& e) {
      ++failed;
      row["status"] = "failed";
      row["error"] = e.what();
      spdlog::warn("sweep {} failed: {}", name, e.what());
    }
    row["wall_clock_seconds"] = seconds_since(t0);
    row["version"] = version();
    lines += row.dump() + "\n";
    io::atomic_write(results, [&](std::ostream& os) { os << lines; });
  }
  return with_provenance(cfg, {{"cells", cells.size()}, {"failed", failed}, {"results", results.string()}});
}

}  // namespace viewlab
