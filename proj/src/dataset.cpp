#include "viewlab/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "viewlab/binary_io.hpp"
#include "viewlab/modelzoo.hpp"
#include "viewlab/rng.hpp"

namespace viewlab {

using nlohmann::json;

void Dataset::validate() const {
  if (labels.size() != images.size()) throw ConfigError("dataset: label count does not match image count");
  if (!latents.empty() && latents.size() != images.size())
    throw ConfigError("dataset: latent count does not match image count");
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (static_cast<std::size_t>(images[i].size()) != shape.size())
      throw ConfigError("dataset: image " + std::to_string(i) + " has the wrong size");
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw ConfigError("dataset: label out of range at record " + std::to_string(i));
  }
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> c(classes, 0);
  for (int l : labels) ++c.at(static_cast<std::size_t>(l));
  return c;
}

void BlobDatasetConfig::validate() const {
  if (classes < 2) throw ConfigError("dataset: need at least two classes");
  if (train_per_class < 1 || test_per_class < 1) throw ConfigError("dataset: empty split");
  if (blobs < 1) throw ConfigError("dataset: need at least one blob");
  if (!(within_class_std >= 0.0)) throw ConfigError("dataset: within-class std must be >= 0");
  if (image.channels != 3) throw ConfigError("dataset: blob images are RGB");
}

json BlobDatasetConfig::to_json() const {
  return {{"classes", classes},
          {"train_per_class", train_per_class},
          {"test_per_class", test_per_class},
          {"image", {image.channels, image.height, image.width}},
          {"blobs", blobs},
          {"within_class_std", within_class_std},
          {"seed", seed}};
}

namespace {

Dataset render_split(const BlobDatasetConfig& cfg, const BlobGenerator& g, const std::vector<LatentCode>& protos,
                     std::size_t per_class, std::uint64_t split_key, const std::string& id) {
  Dataset ds;
  ds.id = id;
  ds.shape = cfg.image;
  ds.classes = cfg.classes;
  const std::size_t n = per_class * cfg.classes;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % cfg.classes);
  Rng order = make_stream(cfg.seed, {tag(StreamTag::dataset), split_key, 0});
  std::shuffle(labels.begin(), labels.end(), order);

  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_stream(cfg.seed, {tag(StreamTag::dataset), split_key, i + 1});
    LatentCode w = protos[static_cast<std::size_t>(labels[i])];
    for (auto& v : w) v += cfg.within_class_std * normal(rng);
    // Stored as float32, so keep in-memory copies identical to loaded ones.
    ImageTensor x = generate(g, w);
    for (auto& v : x) v = static_cast<float>(v);
    for (auto& v : w) v = static_cast<float>(v);
    ds.images.push_back(std::move(x));
    ds.latents.push_back(std::move(w));
  }
  ds.labels = std::move(labels);
  return ds;
}

}  // namespace

DatasetSplit make_blob_dataset(const BlobDatasetConfig& cfg) {
  cfg.validate();
  BlobGenerator g(cfg.image, cfg.blobs);
  Rng proto_rng = make_stream(cfg.seed, {tag(StreamTag::dataset), 0});
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<LatentCode> protos(cfg.classes, LatentCode(static_cast<Eigen::Index>(g.latent_dim())));
  for (auto& p : protos)
    for (auto& v : p) v = normal(proto_rng);

  std::ostringstream base;
  base << "blobs-c" << cfg.classes << "-n" << cfg.train_per_class << "x" << cfg.test_per_class << "-"
       << cfg.image.height << "px-s" << cfg.seed;
  DatasetSplit split;
  split.train = render_split(cfg, g, protos, cfg.train_per_class, 1, base.str() + "/train");
  split.test = render_split(cfg, g, protos, cfg.test_per_class, 2, base.str() + "/test");
  return split;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  ds.validate();
  const json header = {{"id", ds.id},
                       {"shape", {ds.shape.channels, ds.shape.height, ds.shape.width}},
                       {"classes", ds.classes},
                       {"count", ds.size()},
                       {"has_latents", !ds.latents.empty()},
                       {"latent_dim", ds.latents.empty() ? 0 : ds.latents.front().size()}};
  std::string payload;
  for (int l : ds.labels) {
    const auto u = static_cast<std::uint32_t>(l);
    const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                       static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
    payload.append(b, 4);
  }
  for (const auto& x : ds.images) io::append_f32(payload, std::span<const double>(x.data(), static_cast<std::size_t>(x.size())));
  for (const auto& w : ds.latents) io::append_f32(payload, std::span<const double>(w.data(), static_cast<std::size_t>(w.size())));
  const std::uint32_t crc = io::crc32(0, payload.data(), payload.size());
  io::atomic_write(path, [&](std::ostream& os) {
    os.write("VLDS", 4);
    io::write_u32(os, kDatasetVersion);
    io::write_string(os, header.dump());
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    io::write_u32(os, crc);
  });
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "VLDS")
    throw FormatError(path.string() + ": not a dataset file (bad magic)");
  const auto version = io::read_u32(is);
  if (version != kDatasetVersion)
    throw FormatError(path.string() + ": unsupported dataset version " + std::to_string(version));
  const json header = json::parse(io::read_string(is));
  Dataset ds;
  ds.id = header.at("id").get<std::string>();
  const auto shape = header.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 3) throw FormatError(path.string() + ": bad image shape");
  ds.shape = {shape[0], shape[1], shape[2]};
  ds.classes = header.at("classes").get<std::size_t>();
  const auto count = header.at("count").get<std::size_t>();
  const bool has_latents = header.at("has_latents").get<bool>();
  const auto latent_dim = header.at("latent_dim").get<std::size_t>();

  const std::size_t bytes = 4 * (count + count * ds.shape.size() + (has_latents ? count * latent_dim : 0));
  std::string payload(bytes, '\0');
  if (!is.read(payload.data(), static_cast<std::streamsize>(bytes))) throw FormatError(path.string() + ": truncated");
  const auto crc = io::read_u32(is);
  if (crc != io::crc32(0, payload.data(), payload.size()))
    throw FormatError(path.string() + ": checksum mismatch");

  const char* p = payload.data();
  for (std::size_t i = 0; i < count; ++i, p += 4) {
    std::uint32_t u = 0;
    for (int b = 3; b >= 0; --b) u = (u << 8) | static_cast<unsigned char>(p[b]);
    ds.labels.push_back(static_cast<int>(u));
  }
  auto take = [&](std::size_t n) {
    Vector v(static_cast<Eigen::Index>(n));
    io::decode_f32(p, std::span<double>(v.data(), n));
    p += 4 * n;
    return v;
  };
  for (std::size_t i = 0; i < count; ++i) ds.images.push_back(take(ds.shape.size()));
  if (has_latents)
    for (std::size_t i = 0; i < count; ++i) ds.latents.push_back(take(latent_dim));
  ds.validate();
  return ds;
}

void save_split(const std::filesystem::path& dir, const DatasetSplit& split) {
  std::filesystem::create_directories(dir);
  save_dataset(dir / "train.vlds", split.train);
  save_dataset(dir / "test.vlds", split.test);
}

DatasetSplit load_split(const std::filesystem::path& dir) {
  return {load_dataset(dir / "train.vlds"), load_dataset(dir / "test.vlds")};
}

DatasetSplit FileDatasetSource::load() const { return load_split(dir_); }

}  // namespace viewlab
