#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "viewlab/core.hpp"

namespace viewlab {

/// Index bookkeeping for a batch of N anchors.
///
/// Expert views occupy [0, 2N): the first view of anchor a is a (set I1), the
/// second is a + N (set I2), and j pairs them. With m generated views per
/// anchor, generated view r of anchor a sits at 2N + a*m + r and is listed in
/// k(i) of both expert views of a. Generated views never anchor a loss row.
class IndexMap {
 public:
  IndexMap() = default;

  std::size_t anchors() const { return anchors_; }
  std::size_t generated_per_anchor() const { return per_anchor_; }
  /// |I|, all views including generated ones.
  std::size_t size() const { return 2 * anchors_ + anchors_ * per_anchor_; }
  std::size_t expert_count() const { return 2 * anchors_; }

  bool is_expert(std::size_t i) const { return i < expert_count(); }
  /// 1 for I1, 2 for I2, 0 for generated views.
  int view_set(std::size_t i) const;
  /// Position of the anchor (0..N-1) that view i came from.
  std::size_t anchor_of(std::size_t i) const;

  /// j(i). Only defined on expert views.
  std::size_t partner(std::size_t i) const;
  /// k(i); empty for generated views.
  std::span<const std::size_t> generated(std::size_t i) const;
  /// A(i) = I \ {i}.
  std::vector<std::size_t> complement(std::size_t i) const;
  /// P(i) = {j(i)} u k(i).
  std::vector<std::size_t> positives(std::size_t i) const;
  /// Expert views of the set opposite to i (I2 for i in I1 and vice versa).
  std::vector<std::size_t> opposite_set(std::size_t i) const;

 private:
  friend IndexMap build_two_view(std::size_t);
  friend IndexMap append_generated(const IndexMap&, std::size_t);

  std::size_t anchors_ = 0;
  std::size_t per_anchor_ = 0;
  std::vector<std::vector<std::size_t>> k_;
};

/// Two expert views per anchor; N >= 2 so that every anchor has negatives.
IndexMap build_two_view(std::size_t batch_size);

/// Appends m >= 1 generated views per anchor to a two-view map.
IndexMap append_generated(const IndexMap& base, std::size_t views_per_anchor);

/// Views, their embeddings (one row per view) and the index bookkeeping.
struct MultiviewBatch {
  std::vector<ImageTensor> views;
  Matrix embeddings;
  IndexMap index_map;
  std::vector<std::size_t> anchor_ids;

  /// Throws ConfigError when sizes disagree.
  void validate() const;
};

}  // namespace viewlab
