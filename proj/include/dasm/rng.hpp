#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace dasm {

// Deterministic random source. mt19937_64 output is fixed by the C++
// standard; the distribution transforms live here (not in <random>
// distributions, whose streams are implementation-defined) so that a seed
// produces the same stream on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next() { return gen_(); }

  // Uniform in [0, 1), 53 bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller. Draws a fresh pair per call; the spare is discarded to keep
  // the stream position independent of call history.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

  // Index in [0, n). n must be positive.
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = index(i + 1);
      std::swap(v[i], v[j]);
    }
  }

  // Stable per-stream seed derivation (splitmix64 finalizer) so that worker
  // cells and data-generation cells get independent, reproducible streams.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  static constexpr double kTwoPi = 6.283185307179586476925286766559;
  std::mt19937_64 gen_;
};

}  // namespace dasm
