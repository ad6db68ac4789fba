#include "viewlab/batching.hpp"

#include <string>

namespace viewlab {

namespace {
void check_index(const IndexMap& m, std::size_t i) {
  if (i >= m.size())
    throw ConfigError("view index " + std::to_string(i) + " out of range (|I| = " +
                      std::to_string(m.size()) + ")");
}
}  // namespace

int IndexMap::view_set(std::size_t i) const {
  check_index(*this, i);
  if (i < anchors_) return 1;
  if (i < 2 * anchors_) return 2;
  return 0;
}

std::size_t IndexMap::anchor_of(std::size_t i) const {
  check_index(*this, i);
  if (i < 2 * anchors_) return i % anchors_;
  return (i - 2 * anchors_) / per_anchor_;
}

std::size_t IndexMap::partner(std::size_t i) const {
  check_index(*this, i);
  if (!is_expert(i)) throw ConfigError("partner is undefined for generated view " + std::to_string(i));
  return i < anchors_ ? i + anchors_ : i - anchors_;
}

std::span<const std::size_t> IndexMap::generated(std::size_t i) const {
  check_index(*this, i);
  if (!is_expert(i) || k_.empty()) return {};
  return k_[i];
}

std::vector<std::size_t> IndexMap::complement(std::size_t i) const {
  check_index(*this, i);
  std::vector<std::size_t> out;
  out.reserve(size() - 1);
  for (std::size_t a = 0; a < size(); ++a)
    if (a != i) out.push_back(a);
  return out;
}

std::vector<std::size_t> IndexMap::positives(std::size_t i) const {
  std::vector<std::size_t> out{partner(i)};
  for (auto p : generated(i)) out.push_back(p);
  return out;
}

std::vector<std::size_t> IndexMap::opposite_set(std::size_t i) const {
  const int set = view_set(i);
  if (set == 0) throw ConfigError("generated views belong to neither expert set");
  std::vector<std::size_t> out(anchors_);
  const std::size_t base = set == 1 ? anchors_ : 0;
  for (std::size_t a = 0; a < anchors_; ++a) out[a] = base + a;
  return out;
}

IndexMap build_two_view(std::size_t batch_size) {
  if (batch_size < 2)
    throw ConfigError("two-view batches need N >= 2 anchors (got " + std::to_string(batch_size) + ")");
  IndexMap m;
  m.anchors_ = batch_size;
  return m;
}

IndexMap append_generated(const IndexMap& base, std::size_t views_per_anchor) {
  if (views_per_anchor < 1) throw ConfigError("append_generated needs m >= 1");
  if (base.anchors_ < 2) throw ConfigError("append_generated needs a valid two-view base map");
  if (base.per_anchor_ != 0) throw ConfigError("index map already has generated views");
  IndexMap m = base;
  m.per_anchor_ = views_per_anchor;
  const std::size_t n = base.anchors_;
  m.k_.assign(2 * n, {});
  for (std::size_t i = 0; i < 2 * n; ++i) {
    const std::size_t a = i % n;
    for (std::size_t r = 0; r < views_per_anchor; ++r) m.k_[i].push_back(2 * n + a * views_per_anchor + r);
  }
  return m;
}

void MultiviewBatch::validate() const {
  const auto n = index_map.size();
  if (static_cast<std::size_t>(embeddings.rows()) != n)
    throw ConfigError("batch has " + std::to_string(embeddings.rows()) + " embeddings for " +
                      std::to_string(n) + " indexed views");
  if (!views.empty() && views.size() != n) throw ConfigError("batch views/index size mismatch");
  if (!anchor_ids.empty() && anchor_ids.size() != n) throw ConfigError("batch anchor_ids/index size mismatch");
}

}  // namespace viewlab
