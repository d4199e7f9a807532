#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace bayes_layers {

namespace detail {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Key of a counter-based random stream. Seeds never mutate; child streams are
/// obtained by `derive`, so the numbers a consumer sees depend only on the path
/// of derivations (global seed -> step -> layer position -> parameter), never on
/// the order in which other consumers drew.
class Seed {
 public:
  constexpr Seed() = default;
  constexpr explicit Seed(std::uint64_t key) : key_(key) {}

  constexpr std::uint64_t key() const noexcept { return key_; }

  constexpr Seed derive(std::uint64_t tag) const noexcept {
    return Seed(detail::mix64(key_ ^ detail::mix64(tag + 0x632BE59BD9B4E019ULL)));
  }
  constexpr Seed derive(std::uint64_t a, std::uint64_t b) const noexcept {
    return derive(a).derive(b);
  }

  /// Seed for training step `step` of a run keyed by `global_seed`.
  static constexpr Seed for_step(std::uint64_t global_seed, std::uint64_t step) noexcept {
    return Seed(global_seed).derive(0x5EED, step);
  }

  friend constexpr bool operator==(Seed a, Seed b) noexcept { return a.key_ == b.key_; }

 private:
  std::uint64_t key_ = 0;
};

/// UniformRandomBitGenerator whose i-th output is a pure function of (seed, i).
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(Seed seed) : key_(detail::mix64(seed.key())) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    return detail::mix64(key_ + (++counter_) * 0xD1B54A32D192ED03ULL);
  }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

inline std::vector<double> standard_normal(Seed seed, std::size_t n) {
  CounterRng rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

inline std::vector<double> uniform(Seed seed, std::size_t n, double lo = 0.0, double hi = 1.0) {
  CounterRng rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

/// +1 / -1 with equal probability.
inline std::vector<double> rademacher(Seed seed, std::size_t n) {
  CounterRng rng(seed);
  std::vector<double> out(n);
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i % 64 == 0) bits = rng();
    out[i] = (bits & 1U) ? 1.0 : -1.0;
    bits >>= 1U;
  }
  return out;
}

}  // namespace bayes_layers
