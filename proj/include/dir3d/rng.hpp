#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>

namespace dir3d {

/// Platform-independent random stream.
///
/// Only the raw mt19937_64 bit stream is taken from the standard library;
/// every distribution is computed here, since std:: distributions are
/// implementation-defined and would break cross-platform replay.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller (no cached second value, so state is the engine alone).
  double normal();
  /// Normal with the given stddev, redrawn until within `bound` stddevs.
  double truncated_normal(double stddev, double bound = 2.0);
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  std::string state() const;
  void restore(const std::string& state);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Independent seed for sub-stream `stream` of `seed` (splitmix64 mixing).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace dir3d
