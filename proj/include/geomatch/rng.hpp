#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace geomatch {

// mt19937_64 is bit-specified by the standard, the std distributions are not.
// Draws are built from raw engine output so streams match across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(engine_() % span);
  }

  /// Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::mt19937_64 engine_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for (master seed, stream id, purpose tag).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t id,
                                 std::string_view tag = {}) {
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ id);
  for (char c : tag) h = splitmix64(h ^ static_cast<unsigned char>(c));
  return h;
}

}  // namespace geomatch
