#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "viewlab/core.hpp"
#include "viewlab/rng.hpp"

namespace viewlab {

/// A map with reverse-mode derivatives. Evaluation and pullbacks are pure;
/// parameters change only through set_parameters.
class DifferentiableMap {
 public:
  /// Output at a point plus a closure computing vector-Jacobian products
  /// there. The closure returns dL/dx and, when param_grad is non-null, adds
  /// dL/dθ into it.
  struct Linearization {
    Vector value;
    std::function<Vector(const Vector& grad_out, Vector* param_grad)> pullback;
  };

  virtual ~DifferentiableMap() = default;

  virtual const Shape& input_shape() const = 0;
  virtual const Shape& output_shape() const = 0;
  std::size_t input_size() const { return shape_size(input_shape()); }
  std::size_t output_size() const { return shape_size(output_shape()); }

  virtual Vector evaluate(const Vector& x) const = 0;
  virtual Vector pullback(const Vector& x, const Vector& grad_out,
                          Vector* param_grad = nullptr) const = 0;
  virtual Linearization linearize(const Vector& x) const;

  virtual std::size_t parameter_count() const { return 0; }
  virtual const Vector& parameters() const;
  virtual void set_parameters(const Vector& p);

  bool trainable() const { return trainable_ && parameter_count() > 0; }
  void set_trainable(bool t) { trainable_ = t; }

  virtual std::string architecture_id() const = 0;
  /// Everything needed to rebuild the architecture (not the parameters).
  virtual nlohmann::json describe() const = 0;

 protected:
  void check_input(const Vector& x) const;

 private:
  bool trainable_ = true;
};

enum class Activation { identity, silu, tanh, softplus, sigmoid, leaky_relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

namespace detail {
class Layer;
}

/// Feed-forward stack of dense, 3x3 convolution, 2x2 average pooling and
/// elementwise activation layers over a flat parameter vector.
class Network final : public DifferentiableMap {
 public:
  Network(std::string architecture_id, Shape input_shape);

  Network& dense(std::size_t out);
  Network& conv(std::size_t out_channels, std::size_t kernel = 3);
  Network& avg_pool();
  Network& activation(Activation a);
  /// Marks the current depth as the end of the backbone (see features()).
  Network& mark_backbone();

  /// Glorot-uniform weights, zero biases.
  void initialize(std::uint64_t seed);

  const Shape& input_shape() const override { return input_shape_; }
  const Shape& output_shape() const override;
  Vector evaluate(const Vector& x) const override;
  Vector pullback(const Vector& x, const Vector& grad_out,
                  Vector* param_grad = nullptr) const override;
  Linearization linearize(const Vector& x) const override;

  std::size_t parameter_count() const override { return static_cast<std::size_t>(params_.size()); }
  const Vector& parameters() const override { return params_; }
  void set_parameters(const Vector& p) override;

  std::string architecture_id() const override { return arch_id_; }
  nlohmann::json describe() const override;
  static Network from_description(const nlohmann::json& j);

  std::size_t layer_count() const { return layers_.size(); }
  std::size_t backbone_depth() const { return backbone_depth_; }
  /// Output of the first backbone_depth() layers.
  Vector features(const Vector& x) const;
  std::size_t feature_size() const;

 private:
  std::vector<Vector> forward_all(const Vector& x) const;
  Vector backward_all(const std::vector<Vector>& acts, const Vector& grad_out,
                      Vector* param_grad) const;
  void push(std::shared_ptr<const detail::Layer> layer);
  const Shape& current_shape() const;

  std::string arch_id_;
  Shape input_shape_;
  std::vector<std::shared_ptr<const detail::Layer>> layers_;
  Vector params_;
  std::size_t backbone_depth_ = 0;
};

/// y = A x (+ b).
class LinearMap final : public DifferentiableMap {
 public:
  LinearMap(std::size_t in, std::size_t out, bool bias = false);
  explicit LinearMap(const Matrix& a);

  const Shape& input_shape() const override { return in_; }
  const Shape& output_shape() const override { return out_; }
  Vector evaluate(const Vector& x) const override;
  Vector pullback(const Vector& x, const Vector& grad_out,
                  Vector* param_grad = nullptr) const override;
  std::size_t parameter_count() const override { return static_cast<std::size_t>(params_.size()); }
  const Vector& parameters() const override { return params_; }
  void set_parameters(const Vector& p) override;
  std::string architecture_id() const override { return "linear"; }
  nlohmann::json describe() const override;

  Matrix matrix() const;
  bool has_bias() const { return bias_; }

 private:
  Shape in_, out_;
  bool bias_;
  Vector params_;
};

class IdentityMap final : public DifferentiableMap {
 public:
  explicit IdentityMap(std::size_t dim) : shape_{dim} {}
  const Shape& input_shape() const override { return shape_; }
  const Shape& output_shape() const override { return shape_; }
  Vector evaluate(const Vector& x) const override;
  Vector pullback(const Vector& x, const Vector& grad_out,
                  Vector* param_grad = nullptr) const override;
  std::string architecture_id() const override { return "identity"; }
  nlohmann::json describe() const override;

 private:
  Shape shape_;
};

/// Fixed analytic renderer standing in for the generator g: W -> X.
///
/// The latent holds a background colour (3 values) followed by 6 values per
/// blob: centre x, centre y, log-scale, and an RGB colour. Each pixel is the
/// convex combination
///   (bg + sum_b a_b * colour_b) / (1 + sum_b a_b),
///   a_b = gain * exp(-|p - centre_b|^2 / (2 scale_b^2)),
/// so outputs are smooth in the latent and stay inside (0, 1).
/// At w = 0 all blobs sit at the image centre.
class BlobGenerator final : public DifferentiableMap {
 public:
  explicit BlobGenerator(ImageShape image, std::size_t blobs = 3);

  static std::size_t latent_dim_for(std::size_t blobs) { return 3 + 6 * blobs; }

  const Shape& input_shape() const override { return in_; }
  const Shape& output_shape() const override { return out_; }
  Vector evaluate(const Vector& w) const override;
  Vector pullback(const Vector& w, const Vector& grad_out,
                  Vector* param_grad = nullptr) const override;
  std::string architecture_id() const override { return "blob_generator"; }
  nlohmann::json describe() const override;

  const ImageShape& image_shape() const { return image_; }
  std::size_t blobs() const { return blobs_; }
  std::size_t latent_dim() const { return latent_dim_for(blobs_); }

 private:
  struct Decoded;
  Decoded decode(const Vector& w) const;

  ImageShape image_;
  std::size_t blobs_;
  Shape in_, out_;
};

// Toy architectures. All take the image shape they operate on.

/// Conv encoder f: two conv blocks with pooling, a dense backbone layer and a
/// two-layer projection head. Inputs taller than 16 pixels are average-pooled
/// down first.
Network make_encoder(const ImageShape& image, std::size_t embedding_dim, std::uint64_t seed);
Network make_inverter(const ImageShape& image, std::size_t latent_dim, std::uint64_t seed);
Network make_discriminator(const ImageShape& image, std::uint64_t seed);
/// Frozen random conv feature extractor used as perceptual distance h.
Network make_perceptual(const ImageShape& image, std::uint64_t seed);
Network make_predictor(std::size_t embedding_dim, std::size_t hidden, std::uint64_t seed);
/// Frozen style mapping g1: S -> W.
Network make_style_mapping(std::size_t latent_dim, std::uint64_t seed);
Network make_mlp(std::string arch_id, std::size_t in, const std::vector<std::size_t>& hidden,
                 std::size_t out, Activation act, std::uint64_t seed);

/// z = normalize(f(x)).
UnitEmbedding encode(const DifferentiableMap& f, const ImageTensor& x);

/// Encoder evaluation plus pullback of the normalized embedding.
struct EncodedView {
  UnitEmbedding z;
  std::function<Vector(const Vector& grad_z, Vector* param_grad)> pullback;
};
EncodedView encode_linearized(const DifferentiableMap& f, const ImageTensor& x);

ImageTensor generate(const DifferentiableMap& g, const LatentCode& w);

// Finite-difference verification.

struct GradCheckOptions {
  /// Step of the five-point central stencil.
  double step = 1e-3;
  /// Check a random subset of this many coordinates (0 = all).
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  /// max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
  std::size_t coordinates_checked = 0;
};

GradCheckReport grad_check(const std::function<double(const Vector&)>& objective,
                           const Vector& point, const Vector& analytic,
                           const GradCheckOptions& opt = {});

/// Probe objective c . map(x), checked with respect to x.
GradCheckReport grad_check(const DifferentiableMap& map, const Vector& x, const Vector& probe,
                           const GradCheckOptions& opt = {});

/// Probe objective c . map(x), checked with respect to the parameters.
GradCheckReport grad_check_parameters(DifferentiableMap& map, const Vector& x,
                                      const Vector& probe, const GradCheckOptions& opt = {});

// Checkpoints: "VLCK", u32 version, u64 header length, JSON header,
// u64 parameter count, float32 little-endian parameters.

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const DifferentiableMap& map,
                     std::uint64_t seed, const nlohmann::json& extra = {});

struct Checkpoint {
  nlohmann::json header;
  Vector parameters;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Rebuilds a map from a checkpoint header and loads its parameters.
std::unique_ptr<DifferentiableMap> load_map(const std::filesystem::path& path);
Network load_network(const std::filesystem::path& path);

}  // namespace viewlab
