// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace stgmfm::rng {

// splitmix64 step; the workhorse for both stream derivation and generation.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d4a2fcf39bc83dULL;
  return z ^ (z >> 31);
}

// FNV-1a over bytes, used to fold purpose strings and indices into a stream id.
inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Deterministic generator. All randomness in the library flows through this
/// type; std::random distributions are avoided so results are identical across
/// standard library implementations.
class Stream {
public:
  explicit Stream(std::uint64_t seed) : state_(seed) {
    // Warm up so nearby seeds diverge immediately.
    splitmix64(state_);
    splitmix64(state_);
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer uniform in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    // Multiply-shift rejection-free mapping is fine here; statistical bias is
    // negligible for the ranges involved and determinism is what matters.
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  /// Standard normal via Box-Muller. Each call consumes two uniforms; the
  /// spare is discarded so the draw sequence is position-independent.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Fisher-Yates shuffle of indices [0, n).
  template <class Int>
  void shuffle(std::vector<Int>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  std::uint64_t state_;
};

/// Derive a substream seed from (root seed, purpose, indices). Substreams for
/// distinct purposes or indices are statistically independent, and inserting a
/// new consumer never perturbs existing streams.
inline std::uint64_t derive(std::uint64_t seed, std::string_view purpose,
                            std::uint64_t a = 0, std::uint64_t b = 0,
                            std::uint64_t c = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  h = fnv1a(h, &seed, sizeof(seed));
  h = fnv1a(h, purpose.data(), purpose.size());
  h = fnv1a(h, &a, sizeof(a));
  h = fnv1a(h, &b, sizeof(b));
  h = fnv1a(h, &c, sizeof(c));
  // One extra scramble so the FNV structure does not leak into the stream.
  return splitmix64(h);
}

inline Stream substream(std::uint64_t seed, std::string_view purpose,
                        std::uint64_t a = 0, std::uint64_t b = 0,
                        std::uint64_t c = 0) {
  return Stream(derive(seed, purpose, a, b, c));
}

}  // namespace stgmfm::rng
