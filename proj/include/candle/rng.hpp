#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace candle {

/// splitmix64 step; used to expand a 64-bit seed into generator state.
std::uint64_t splitmix64(std::uint64_t& state);

/// xoshiro256** seeded through splitmix64, with Box-Muller normals.
///
/// The output stream is fully specified so that other implementations can
/// reproduce synthetic packs and initializations bit for bit:
///   - state[i] = splitmix64(seed) for i = 0..3
///   - uniform() = (next() >> 11) * 2^-53, in [0, 1)
///   - normal() draws u1 = 1 - uniform(), u2 = uniform(), returns
///     r*cos(2*pi*u2) and caches r*sin(2*pi*u2) for the following call,
///     where r = sqrt(-2 ln u1)
///   - below(n) rejects draws >= the largest multiple of n
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next();
  double uniform();
  double normal();
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  /// Fisher-Yates from the back.
  template <typename T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(values[i - 1], values[j]);
    }
  }

  /// Seed for an independent child stream, derived from this one.
  std::uint64_t fork() { return next(); }

 private:
  std::uint64_t s_[4];
  std::optional<double> cached_normal_;
};

/// Identity permutation of size n shuffled by `rng`.
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng);

}  // namespace candle
