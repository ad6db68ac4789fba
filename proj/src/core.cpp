#include "viewlab/core.hpp"

#include <spdlog/spdlog.h>

namespace viewlab {

std::string shape_to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

bool all_finite(const Vector& v) { return v.allFinite(); }

UnitEmbedding normalize(const Vector& y) {
  const double n = y.norm();
  if (n == 0.0) {
    spdlog::warn("normalize: zero vector, falling back to first basis vector");
    Vector e = Vector::Zero(y.size());
    if (y.size() > 0) e[0] = 1.0;
    return e;
  }
  return y / n;
}

Vector normalize_pullback(const Vector& y, const Vector& g) {
  const double n = y.norm();
  if (n == 0.0) return Vector::Zero(y.size());
  const Vector z = y / n;
  return (g - z * z.dot(g)) / n;
}

}  // namespace viewlab
