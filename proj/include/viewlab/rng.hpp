#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace viewlab {

using Rng = std::mt19937_64;

/// Independent stream keyed by (seed, keys...). Streams depend only on their
/// keys, so work split across anchors or views is reproducible in any order.
inline Rng make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys = {}) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * keys.size());
  auto push = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  for (auto k : keys) push(k);
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

// Stream tags keep the purposes of derived streams apart.
enum class StreamTag : std::uint64_t {
  init = 1,
  dataset = 2,
  expert_view = 3,
  generated_view = 4,
  shuffle = 5,
  w_search = 6,
  w_perturb = 7,
  probe = 8,
  mine = 9,
  inversion = 10,
  discriminator = 11,
  calibration = 12,
};

inline std::uint64_t tag(StreamTag t) { return static_cast<std::uint64_t>(t); }

}  // namespace viewlab
