#pragma once

#include <cmath>
#include <cstdint>

namespace qm {

// Deterministic splitmix64-based generator. Self-contained so that streams
// are reproducible across standard libraries; every source of randomness in
// the project flows through explicit seeds and Rng::split.
class Rng {
 public:
  explicit Rng(uint64_t seed) : base_(seed), state_(mix_seed(seed)) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the second deviate of each pair is cached
  // so consecutive draws consume a fixed, reproducible amount of stream.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Guard against log(0).
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    have_cached_ = true;
    return r * std::cos(theta);
  }

  // Uniform integer in [lo, hi) via rejection-free 128-bit scaling.
  int randint(int lo, int hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo);
    return lo + static_cast<int>((static_cast<unsigned __int128>(next_u64()) * span) >> 64);
  }

  // Child stream decorrelated from this one and from other stream ids.
  // Splitting does not advance this generator's state.
  Rng split(uint64_t stream) const {
    uint64_t s = base_ ^ (0x9e3779b97f4a7c15ull * (stream + 0x632be59bd9b4e019ull));
    s = (s ^ (s >> 30)) * 0xbf58476d1ce4e5b9ull;
    return Rng(s);
  }

  uint64_t base_seed() const { return base_; }

 private:
  static uint64_t mix_seed(uint64_t s) {
    s = (s ^ (s >> 33)) * 0xff51afd7ed558ccdull;
    return s ^ (s >> 33);
  }

  uint64_t base_;
  uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace qm
