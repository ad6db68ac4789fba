#include "viewlab/viewcache.hpp"

#include <chrono>
#include <cstdio>

#include <spdlog/spdlog.h>

#include "viewlab/binary_io.hpp"

namespace viewlab {

std::size_t CacheHeader::record_bytes() const {
  return 8 + 4 * views_per_anchor * (latent_dim + (has_images ? image.size() : 0));
}

namespace {

void append_u64(std::string& buf, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) buf.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

std::uint64_t decode_u64(const char* p) {
  std::uint64_t v = 0;
  for (int b = 7; b >= 0; --b) v = (v << 8) | static_cast<unsigned char>(p[b]);
  return v;
}

void check_record(const CacheHeader& h, const CacheRecord& r) {
  const std::string who = "cache record for anchor " + std::to_string(r.anchor_id);
  if (r.latents.size() != h.views_per_anchor) throw ConfigError(who + ": wrong number of latents");
  for (const auto& w : r.latents)
    if (static_cast<std::size_t>(w.size()) != h.latent_dim) throw ConfigError(who + ": latent size mismatch");
  if (h.has_images) {
    if (r.images.size() != h.views_per_anchor) throw ConfigError(who + ": wrong number of images");
    for (const auto& x : r.images)
      if (static_cast<std::size_t>(x.size()) != h.image.size()) throw ConfigError(who + ": image size mismatch");
  }
}

}  // namespace

std::uint32_t write_cache(const std::filesystem::path& path, const CacheHeader& header,
                          const std::vector<CacheRecord>& records) {
  if (records.empty()) throw ConfigError("write_cache: no records");
  if (header.views_per_anchor < 1) throw ConfigError("write_cache: views per anchor must be positive");
  std::string payload;
  payload.reserve(records.size() * header.record_bytes());
  std::unordered_map<std::uint64_t, bool> seen;
  for (const auto& r : records) {
    check_record(header, r);
    if (!seen.emplace(r.anchor_id, true).second)
      throw ConfigError("write_cache: duplicate anchor id " + std::to_string(r.anchor_id));
    append_u64(payload, r.anchor_id);
    for (const auto& w : r.latents) io::append_f32(payload, std::span<const double>(w.data(), static_cast<std::size_t>(w.size())));
    if (header.has_images)
      for (const auto& x : r.images) io::append_f32(payload, std::span<const double>(x.data(), static_cast<std::size_t>(x.size())));
  }
  const std::uint32_t crc = io::crc32(0, payload.data(), payload.size());
  io::atomic_write(path, [&](std::ostream& os) {
    os.write("VLVC", 4);
    io::write_u32(os, kCacheVersion);
    io::write_string(os, header.dataset_id);
    io::write_string(os, header.generator_hash);
    io::write_u32(os, static_cast<std::uint32_t>(header.views_per_anchor));
    io::write_u32(os, static_cast<std::uint32_t>(header.image.channels));
    io::write_u32(os, static_cast<std::uint32_t>(header.image.height));
    io::write_u32(os, static_cast<std::uint32_t>(header.image.width));
    io::write_u32(os, static_cast<std::uint32_t>(header.latent_dim));
    io::write_u64(os, records.size());
    io::write_u32(os, header.has_images ? kCacheHasImages : 0u);
    io::write_u32(os, crc);
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  });
  return crc;
}

ViewCache ViewCache::open(const std::filesystem::path& path, bool preload) {
  auto file = std::make_shared<std::ifstream>(path, std::ios::binary);
  if (!*file) throw FormatError("cannot open view cache " + path.string());
  std::istream& is = *file;
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "VLVC")
    throw FormatError(path.string() + ": not a view cache (bad magic)");
  const auto version = io::read_u32(is);
  if (version != kCacheVersion)
    throw FormatError(path.string() + ": unsupported view cache version " + std::to_string(version) +
                      " (expected " + std::to_string(kCacheVersion) + ")");
  ViewCache c;
  c.path_ = path;
  CacheHeader& h = c.header_;
  h.dataset_id = io::read_string(is, 4096);
  h.generator_hash = io::read_string(is, 4096);
  h.views_per_anchor = io::read_u32(is);
  h.image.channels = io::read_u32(is);
  h.image.height = io::read_u32(is);
  h.image.width = io::read_u32(is);
  h.latent_dim = io::read_u32(is);
  h.record_count = io::read_u64(is);
  const auto flags = io::read_u32(is);
  h.has_images = (flags & kCacheHasImages) != 0;
  h.checksum = io::read_u32(is);
  c.payload_offset_ = is.tellg();

  // Stream the payload once: checksum plus the anchor index.
  const std::size_t rb = h.record_bytes();
  std::string record(rb, '\0');
  std::uint32_t crc = 0;
  for (std::size_t i = 0; i < h.record_count; ++i) {
    if (!is.read(record.data(), static_cast<std::streamsize>(rb)))
      throw FormatError(path.string() + ": truncated at record " + std::to_string(i));
    crc = io::crc32(crc, record.data(), rb);
    const std::uint64_t id = decode_u64(record.data());
    if (!c.index_.emplace(id, i).second) throw FormatError(path.string() + ": duplicate anchor id " + std::to_string(id));
    c.ids_.push_back(id);
    if (preload) c.payload_ += record;
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes after payload");
  if (crc != h.checksum) throw FormatError(path.string() + ": checksum mismatch (payload corrupted)");
  c.preloaded_ = preload;
  if (!preload) {
    is.clear();
    c.file_ = std::move(file);
  }
  return c;
}

CacheRecord ViewCache::decode(std::size_t i) const {
  const std::size_t rb = header_.record_bytes();
  std::string local;
  const char* p = nullptr;
  if (preloaded_) {
    p = payload_.data() + i * rb;
  } else {
    local.resize(rb);
    file_->seekg(payload_offset_ + static_cast<std::streamoff>(i * rb));
    if (!file_->read(local.data(), static_cast<std::streamsize>(rb)))
      throw FormatError(path_.string() + ": read failed at record " + std::to_string(i));
    p = local.data();
  }
  CacheRecord r;
  r.anchor_id = decode_u64(p);
  p += 8;
  auto take = [&](std::size_t n) {
    Vector v(static_cast<Eigen::Index>(n));
    io::decode_f32(p, std::span<double>(v.data(), n));
    p += 4 * n;
    return v;
  };
  for (std::size_t k = 0; k < header_.views_per_anchor; ++k) r.latents.push_back(take(header_.latent_dim));
  if (header_.has_images)
    for (std::size_t k = 0; k < header_.views_per_anchor; ++k) r.images.push_back(take(header_.image.size()));
  return r;
}

CacheRecord ViewCache::record(std::uint64_t anchor_id) const {
  const auto it = index_.find(anchor_id);
  if (it == index_.end())
    throw FormatError(path_.string() + ": no cached views for anchor " + std::to_string(anchor_id));
  return decode(it->second);
}

CacheRecord ViewCache::at(std::size_t i) const {
  if (i >= ids_.size()) throw FormatError("view cache: record index out of range");
  return decode(i);
}

std::vector<CacheRecord> ViewCache::read_all() const {
  std::vector<CacheRecord> out;
  out.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) out.push_back(decode(i));
  return out;
}

std::string map_fingerprint(const DifferentiableMap& map) {
  const std::string arch = map.describe().dump();
  std::uint32_t crc = io::crc32(0, arch.data(), arch.size());
  std::string params;
  const Vector& p = map.parameters();
  io::append_f32(params, std::span<const double>(p.data(), static_cast<std::size_t>(p.size())));
  crc = io::crc32(crc, params.data(), params.size());
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", crc);
  return map.architecture_id() + ":" + buf;
}

std::string to_string(GeneratorOp op) { return op == GeneratorOp::w_search ? "w_search" : "w_perturb"; }

GeneratorOp generator_op_from_string(const std::string& s) {
  if (s == "w_search") return GeneratorOp::w_search;
  if (s == "w_perturb") return GeneratorOp::w_perturb;
  throw ConfigError("unknown generator op: " + s);
}

nlohmann::json CacheSummary::to_json() const {
  nlohmann::json j = {{"records", records},
                      {"skipped", skipped},
                      {"views_per_anchor", views_per_anchor},
                      {"wall_clock_seconds", wall_clock_seconds},
                      {"checksum", checksum}};
  j["mean_abs_residual"] = mean_abs_residual;
  j["mean_pairwise"] = mean_pairwise;
  j["sigma"] = sigma;
  return j;
}

CacheSummary generate_and_cache(const Dataset& ds, const DifferentiableMap& g, const DifferentiableMap* f,
                                const std::vector<LatentCode>& anchor_latents, const CacheJob& job,
                                const std::filesystem::path& path) {
  const auto start = std::chrono::steady_clock::now();
  if (ds.size() == 0) throw ConfigError("generate_and_cache: empty dataset");
  if (anchor_latents.size() != ds.size())
    throw ConfigError("generate_and_cache: inversion cache has " + std::to_string(anchor_latents.size()) +
                      " latents for " + std::to_string(ds.size()) + " anchors");
  if (job.op == GeneratorOp::w_search) {
    if (!f) throw ConfigError("generate_and_cache: w_search needs an encoder");
    job.search.validate();
  } else {
    job.perturb.validate();
  }

  CacheHeader header;
  header.dataset_id = ds.id;
  header.generator_hash = map_fingerprint(g);
  header.views_per_anchor = job.views();
  header.image = ds.shape;
  header.latent_dim = g.input_size();
  header.has_images = true;

  CacheSummary summary;
  summary.views_per_anchor = header.views_per_anchor;
  std::vector<CacheRecord> records;
  records.reserve(ds.size());
  double residual_sum = 0.0, pairwise_sum = 0.0;
  for (std::size_t a = 0; a < ds.size(); ++a) {
    Rng rng = make_stream(job.seed, {tag(StreamTag::generated_view), a});
    try {
      CacheRecord r;
      r.anchor_id = a;
      if (job.op == GeneratorOp::w_search) {
        auto res = w_search(ds.images[a], *f, g, &anchor_latents[a], job.search, rng);
        residual_sum += res.mean_abs_residual();
        pairwise_sum += res.mean_pairwise;
        r.latents = std::move(res.latents);
        r.images = std::move(res.images);
      } else {
        auto res = w_perturb(anchor_latents[a], g, job.perturb, rng);
        r.latents = std::move(res.latents);
        r.images = std::move(res.images);
      }
      records.push_back(std::move(r));
    } catch (const NumericalError& e) {
      ++summary.skipped;
      spdlog::warn("generate_and_cache: skipping anchor {}: {}", a, e.what());
    }
  }
  if (static_cast<double>(summary.skipped) > job.max_skip_fraction * static_cast<double>(ds.size()))
    throw NumericalError("generate_and_cache: " + std::to_string(summary.skipped) + " of " +
                         std::to_string(ds.size()) + " anchors failed");

  summary.records = records.size();
  if (job.op == GeneratorOp::w_search && !records.empty()) {
    summary.mean_abs_residual = residual_sum / static_cast<double>(records.size());
    summary.mean_pairwise = pairwise_sum / static_cast<double>(records.size());
  }
  if (job.op == GeneratorOp::w_perturb) summary.sigma = job.perturb.sigma;
  summary.checksum = write_cache(path, header, records);
  summary.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return summary;
}

std::uint32_t write_inversion_cache(const std::filesystem::path& path, const std::string& dataset_id,
                                    const std::string& generator_hash, const std::vector<LatentCode>& latents) {
  if (latents.empty()) throw ConfigError("inversion cache: no latents");
  CacheHeader h;
  h.dataset_id = dataset_id;
  h.generator_hash = generator_hash;
  h.views_per_anchor = 1;
  h.latent_dim = static_cast<std::size_t>(latents.front().size());
  h.has_images = false;
  std::vector<CacheRecord> records(latents.size());
  for (std::size_t i = 0; i < latents.size(); ++i) {
    records[i].anchor_id = i;
    records[i].latents = {latents[i]};
  }
  return write_cache(path, h, records);
}

std::vector<LatentCode> read_inversion_cache(const std::filesystem::path& path) {
  const ViewCache c = ViewCache::open(path);
  if (c.header().views_per_anchor != 1 || c.header().has_images)
    throw FormatError(path.string() + ": not an inversion cache");
  std::vector<LatentCode> out(c.size());
  std::vector<bool> seen(c.size(), false);
  for (std::size_t i = 0; i < c.size(); ++i) {
    CacheRecord r = c.at(i);
    if (r.anchor_id >= out.size() || seen[r.anchor_id])
      throw FormatError(path.string() + ": inversion cache anchors are not 0..n-1");
    seen[r.anchor_id] = true;
    out[r.anchor_id] = std::move(r.latents.front());
  }
  return out;
}

}  // namespace viewlab
