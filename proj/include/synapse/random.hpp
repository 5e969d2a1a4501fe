#pragma once

// Counter-based randomness. Every stream is a pure function of (seed, keys),
// so draws are reproducible regardless of evaluation order or thread count.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string_view>
#include <vector>

namespace synapse {

std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// Combines a seed with an arbitrary list of integer keys.
std::uint64_t hash_keys(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) noexcept;

/// Named sub-stream: (seed, purpose) -> independent seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) noexcept;

/// Uniform double in (0, 1) from 53 high bits.
double to_unit_open(std::uint64_t bits) noexcept;

/// Standard normal keyed by (seed, keys). Box-Muller on two hashed uniforms.
double keyed_normal(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) noexcept;

/// Sequential stream over a counter.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) noexcept : key_(splitmix64(seed)) {}

  std::uint64_t next_u64() noexcept;
  double uniform() noexcept;  // (0, 1)
  double normal() noexcept;
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept;

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Fisher-Yates permutation of 0..n-1 driven by `rng`.
std::vector<std::size_t> permutation(std::size_t n, CounterRng& rng);

/// 64-bit FNV-1a, used for weight fingerprints and file hashes.
class Fnv1a {
 public:
  void update(const void* data, std::size_t bytes) noexcept;
  template <typename T>
  void update_value(const T& v) noexcept {
    update(&v, sizeof(T));
  }
  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace synapse
