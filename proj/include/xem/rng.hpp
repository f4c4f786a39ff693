#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace xem {

// Deterministic random source. std::mt19937_64 is bit-stable across platforms,
// but the standard <random> distributions are not, so the distributions here
// are spelled out explicitly. Algorithm id: see Rng::kAlgorithm.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64/u53/box-muller/v1";

  explicit Rng(std::uint64_t seed) : eng_(seed), seed_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0,n), rejection-sampled so every value is equally likely.
  std::int64_t uniform_int(std::int64_t n) {
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t r;
    do {
      r = eng_();
    } while (r >= limit);
    return static_cast<std::int64_t>(r % un);
  }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0,1], keeps log() finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  // Derive an independent stream; used to keep data sampling, parameter init
  // and slice sampling on separate sequences.
  Rng fork(std::uint64_t stream) const {
    return Rng(splitmix64(seed_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1))));
  }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

 private:
  std::mt19937_64 eng_;
  std::uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace xem
