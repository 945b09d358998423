#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace transfollower {

// Counter-based generator built on the splitmix64 mixing function. The state
// advances by a fixed odd increment, so the k-th output is a pure function of
// (seed, k); independent streams are derived by hashing (seed, stream id).
// All stochastic code in the project draws from instances of this class so
// that runs are reproducible from a single seed.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : state_(mix(seed ^ 0x1d8af4f3c9e18d25ULL)) {}

  // Independent stream for (seed, stream). Used for per-event generation and
  // per-sample dropout so parallel schedules cannot change the output.
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    Rng r(seed);
    r.state_ = mix(r.state_ + mix(stream + 0x9e3779b97f4a7c15ULL));
    return r;
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller; always consumes exactly two uniforms.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = 1.0 - uniform01();  // (0, 1]
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    // Multiply-shift; bias is negligible for the n used here (n << 2^64).
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // In-place Fisher-Yates so shuffles are identical across standard libraries.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace transfollower
