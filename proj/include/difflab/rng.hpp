#pragma once

#include <cstdint>
#include <random>

namespace difflab {

// splitmix64 finalizer; used to derive well-separated seeds from
// (master seed, stream tag, index) triples.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream,
                                 std::uint64_t index = 0) {
  return mix64(mix64(master ^ (0x8000000000000000ULL | stream)) + index);
}

// Stream tags for the fixed substreams used across the project. Outputs are
// bit-identical for a given master seed regardless of worker count because
// every task derives its own stream from (master, tag, index).
namespace stream {
constexpr std::uint64_t kBaseSamples = 1;
constexpr std::uint64_t kModel = 2;
constexpr std::uint64_t kTrajectory = 3;
constexpr std::uint64_t kNodes = 4;
constexpr std::uint64_t kProbe = 5;
}  // namespace stream

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t raw() { return gen_(); }

  // uniform on [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer on [0, n)
  std::uint64_t uniform_index(std::uint64_t n) {
    // rejection-free modulo bias is negligible for the small n used here,
    // but keep it exact anyway
    const std::uint64_t limit = n * (UINT64_MAX / n);
    std::uint64_t v = gen_();
    while (v >= limit) v = gen_();
    return v % n;
  }

  // standard normal, Box-Muller with cached spare
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0,1] so log() is finite
    const double u1 =
        (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace difflab
