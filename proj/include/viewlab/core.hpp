#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace viewlab {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Shape = std::vector<std::size_t>;

/// Flat CHW image with values in [0, 1].
using ImageTensor = Vector;
/// Generator latent (W-space).
using LatentCode = Vector;
/// Point on the encoder hypersphere (Z-space).
using UnitEmbedding = Vector;

struct ImageShape {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;

  std::size_t size() const { return channels * height * width; }
  Shape as_shape() const { return {channels, height, width}; }
  bool operator==(const ImageShape&) const = default;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_to_string(const Shape& s);

bool all_finite(const Vector& v);

/// L2-normalizes y. A zero vector maps to the first basis vector (a warning is
/// logged); its pullback is then zero.
UnitEmbedding normalize(const Vector& y);

/// Pullback of normalize at y for upstream gradient g on the normalized output.
Vector normalize_pullback(const Vector& y, const Vector& g);

}  // namespace viewlab
