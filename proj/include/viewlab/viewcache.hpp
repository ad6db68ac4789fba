#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "viewlab/dataset.hpp"
#include "viewlab/modelzoo.hpp"
#include "viewlab/viewgen.hpp"

namespace viewlab {

// Cache file layout (all integers little-endian):
//   "VLVC"  u32 version
//   string dataset_id   string generator_hash
//   u32 views_per_anchor   u32 channels  u32 height  u32 width
//   u32 latent_dim   u64 record_count   u32 flags   u32 payload CRC-32
//   payload: per record  u64 anchor_id, views x latent_dim float32,
//            then views x image float32 when flags & kCacheHasImages.

inline constexpr std::uint32_t kCacheVersion = 1;
inline constexpr std::uint32_t kCacheHasImages = 1u;

struct CacheHeader {
  std::string dataset_id;
  std::string generator_hash;
  std::size_t views_per_anchor = 0;
  ImageShape image;
  std::size_t latent_dim = 0;
  std::size_t record_count = 0;
  bool has_images = true;
  std::uint32_t checksum = 0;

  std::size_t record_bytes() const;
};

struct CacheRecord {
  std::uint64_t anchor_id = 0;
  std::vector<LatentCode> latents;
  std::vector<ImageTensor> images;
};

/// Writes atomically and returns the payload checksum. record_count and
/// checksum in the header are filled in from the records.
std::uint32_t write_cache(const std::filesystem::path& path, const CacheHeader& header,
                          const std::vector<CacheRecord>& records);

/// Validated read access. open() checks magic, version and checksum; records
/// are decoded on demand, from memory when preloaded and from the file
/// otherwise. A lazily-read cache is not safe for concurrent readers; open one
/// instance per reader.
class ViewCache {
 public:
  static ViewCache open(const std::filesystem::path& path, bool preload = true);

  const CacheHeader& header() const { return header_; }
  std::size_t size() const { return ids_.size(); }
  bool contains(std::uint64_t anchor_id) const { return index_.count(anchor_id) > 0; }
  const std::vector<std::uint64_t>& anchor_ids() const { return ids_; }

  /// Throws FormatError naming the anchor when it has no record.
  CacheRecord record(std::uint64_t anchor_id) const;
  /// Record at file position i.
  CacheRecord at(std::size_t i) const;
  std::vector<CacheRecord> read_all() const;

 private:
  CacheRecord decode(std::size_t i) const;

  std::filesystem::path path_;
  CacheHeader header_;
  std::streamoff payload_offset_ = 0;
  std::string payload_;
  bool preloaded_ = false;
  std::shared_ptr<std::ifstream> file_;
  std::vector<std::uint64_t> ids_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
};

/// Stable fingerprint of a map's architecture and parameters.
std::string map_fingerprint(const DifferentiableMap& map);

enum class GeneratorOp { w_search, w_perturb };

std::string to_string(GeneratorOp op);
GeneratorOp generator_op_from_string(const std::string& s);

struct CacheJob {
  GeneratorOp op = GeneratorOp::w_perturb;
  WSearchConfig search;
  PerturbConfig perturb;
  std::uint64_t seed = 0;
  /// Fraction of anchors allowed to fail before the run is abandoned.
  double max_skip_fraction = 0.01;

  std::size_t views() const { return op == GeneratorOp::w_search ? search.views : perturb.count; }
};

struct CacheSummary {
  std::size_t records = 0;
  std::size_t skipped = 0;
  std::size_t views_per_anchor = 0;
  /// w_search only.
  double mean_abs_residual = 0.0;
  double mean_pairwise = 0.0;
  /// w_perturb only.
  double sigma = 0.0;
  double wall_clock_seconds = 0.0;
  std::uint32_t checksum = 0;

  nlohmann::json to_json() const;
};

/// Generates views for every anchor of ds and writes the cache. Anchor latents
/// come from anchor_latents (an inversion cache), indexed by anchor id; f is
/// needed for w_search only. An anchor whose generation throws is skipped and
/// logged; more than max_skip_fraction skips fails the run without writing.
CacheSummary generate_and_cache(const Dataset& ds, const DifferentiableMap& g, const DifferentiableMap* f,
                                const std::vector<LatentCode>& anchor_latents, const CacheJob& job,
                                const std::filesystem::path& path);

/// Latent-only cache with one view per anchor, as written after inversion.
std::uint32_t write_inversion_cache(const std::filesystem::path& path, const std::string& dataset_id,
                                    const std::string& generator_hash, const std::vector<LatentCode>& latents);
std::vector<LatentCode> read_inversion_cache(const std::filesystem::path& path);

}  // namespace viewlab
