#pragma once

#include <cstdint>

namespace effnet {

/// Counter-based generator built on the SplitMix64 output function.
///
/// The i-th draw of a stream with key k is mix(k + (i+1) * 0x9E3779B97F4A7C15),
/// so any draw can be recomputed from (key, counter) alone. Substreams are
/// derived with `split(id)`, which hashes (key, id) into a fresh key; the
/// parent's counter is untouched, so a substream's contents depend only on
/// the parent key and the id. This is what makes per-image augmentation
/// independent of data-loader order.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : key_(mix(seed ^ 0xD1B54A32D192ED03ULL)) {}

  static CounterRng from_key(std::uint64_t key) {
    CounterRng r(0);
    r.key_ = key;
    return r;
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(key_ + counter_ * kGamma);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased uniform integer in [0, bound) by rejection.
  std::uint64_t below(std::uint64_t bound);

  /// Uniform integer in the closed range [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (two draws per call, no caching).
  double normal();

  CounterRng split(std::uint64_t stream_id) const {
    return from_key(mix(key_ ^ mix(stream_id + kGamma)));
  }

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace effnet
