#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace milkit {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Folds an arbitrary list of 64-bit parts into one stream key.
inline std::uint64_t mix_key(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t state = 0x243f6a8885a308d3ULL;  // arbitrary nonzero start
  std::uint64_t out = splitmix64(state);
  for (std::uint64_t p : parts) {
    state ^= p;
    out ^= splitmix64(state);
  }
  return out;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Deterministic random stream. mt19937_64 output is pinned by the standard;
/// the double conversions below avoid the implementation-defined std
/// distributions so identical seeds give identical streams on any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform on [0, 1) with 53 bits of mantissa.
  double u01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  /// Uniform integer in [0, n). n must be positive.
  int uniform_int(int n) {
    int v = static_cast<int>(u01() * static_cast<double>(n));
    return v >= n ? n - 1 : v;
  }

  /// Standard normal via Box-Muller (no rejection, so the draw count per
  /// call is fixed: one pair of u64 per two normals).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - u01();  // (0, 1]
    double u2 = u01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// Named substream: identical (parts...) always yields the same stream.
inline Rng substream(std::initializer_list<std::uint64_t> parts) {
  return Rng(mix_key(parts));
}

}  // namespace milkit
