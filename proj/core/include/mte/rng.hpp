// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace mte {

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t z);

/// Key of an independent stream `stream` under `seed`.
std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream);

/// Counter-based generator. Output n (n = 1, 2, ...) is mix64(key + n * 0x9E3779B97F4A7C15),
/// i.e. the SplitMix64 sequence started at `key`. Reals and integers are derived as:
///   uniform()  = (u64 >> 11) * 2^-53
///   below(n)   = Lemire multiply-shift with rejection
///   normal()   = Box-Muller cosine branch on (1 - uniform(), uniform()), one draw per call
/// so any implementation of the same recipe reproduces the same streams.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64();
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t below(std::size_t n);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Fisher-Yates, from the last element down.
void shuffle(std::span<std::size_t> items, CounterRng& rng);

}  // namespace mte
