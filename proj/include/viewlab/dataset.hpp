#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "viewlab/core.hpp"

namespace viewlab {

/// Labelled images. latents holds the generating latent of each image when
/// known (synthetic data) and is empty otherwise.
struct Dataset {
  std::string id;
  ImageShape shape;
  std::size_t classes = 0;
  std::vector<ImageTensor> images;
  std::vector<int> labels;
  std::vector<LatentCode> latents;

  std::size_t size() const { return images.size(); }
  /// Throws ConfigError on inconsistent sizes, shapes or labels.
  void validate() const;
  std::vector<std::size_t> class_counts() const;
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

/// Procedural blob classes: every class has a prototype latent drawn from
/// N(0, I); an image renders the prototype plus N(0, within_class_std^2 I).
struct BlobDatasetConfig {
  std::size_t classes = 4;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  ImageShape image{3, 32, 32};
  std::size_t blobs = 3;
  double within_class_std = 0.6;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

DatasetSplit make_blob_dataset(const BlobDatasetConfig& cfg);

/// Source of a train/test split. File-backed and procedural sources ship
/// here; other image formats plug in behind the same interface.
class DatasetSource {
 public:
  virtual ~DatasetSource() = default;
  virtual DatasetSplit load() const = 0;
};

class BlobDatasetSource final : public DatasetSource {
 public:
  explicit BlobDatasetSource(BlobDatasetConfig cfg) : cfg_(cfg) {}
  DatasetSplit load() const override { return make_blob_dataset(cfg_); }

 private:
  BlobDatasetConfig cfg_;
};

class FileDatasetSource final : public DatasetSource {
 public:
  explicit FileDatasetSource(std::filesystem::path dir) : dir_(std::move(dir)) {}
  DatasetSplit load() const override;

 private:
  std::filesystem::path dir_;
};

// Dataset file: "VLDS", u32 version, JSON header, i32 labels, float32 images,
// float32 latents (if present), u32 CRC-32 of everything after the header.

inline constexpr std::uint32_t kDatasetVersion = 1;

void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

/// train.vlds and test.vlds inside dir.
void save_split(const std::filesystem::path& dir, const DatasetSplit& split);
DatasetSplit load_split(const std::filesystem::path& dir);

}  // namespace viewlab
