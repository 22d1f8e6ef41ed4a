#pragma once

#include <cstdint>
#include <string_view>

#include "davi/common.hpp"

namespace davi {

// Deterministic counter-based RNG. Every stream in the project is derived
// from one master seed plus a label/counter, so generation order never
// depends on which module asked first. The core is splitmix64, which is
// fully specified arithmetic (no libstdc++ distribution objects whose output
// may vary across standard libraries).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(static_cast<std::uint64_t>(
                    (static_cast<unsigned __int128>(next_u64()) * range) >> 64));
  }

  // Box-Muller. Draws two uniforms per call and discards the spare so the
  // stream position is a pure function of call count.
  double normal(double mu, double sigma) {
    double u1 = 1.0 - uniform01();  // (0, 1]
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mu + sigma * r * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Stream derivation: hash a label or counter into the seed.
  static std::uint64_t derive(std::uint64_t seed, std::string_view label) {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (char c : label) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    return mix(seed ^ h);
  }

  static std::uint64_t derive(std::uint64_t seed, std::uint64_t counter) {
    return mix(seed ^ (counter * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull));
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace davi
