#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "prcn/error.hpp"

namespace prcn {

// SplitMix64 step (Steele, Lea, Flood 2014). Used to expand a 64-bit seed
// into xoshiro state and to derive independent substream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// xoshiro256** 1.0 (Blackman & Vigna). State is four words filled by four
// successive splitmix64 outputs of the seed. Only integer arithmetic feeds
// the stream, so a seed yields the same sequence on every platform.
//
// Draw accounting (one "draw" == one call to next()):
//   uniform()      1 draw
//   below(n)       1 draw  (multiply-high, no rejection)
//   normal()       2 draws (Box-Muller, cosine branch only)
//   permutation(n) n-1 draws
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n). Bias is below n / 2^64, far under any test resolution.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ConfigError("Rng::below: empty range");
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
};

// Seed for an independent stream keyed by (seed, tag). Tags name call sites
// ("init", "shuffle", ...) so adding a consumer never shifts another's draws.
inline std::uint64_t substream(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a over the tag
  for (unsigned char ch : tag) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  std::uint64_t x = seed ^ h;
  splitmix64(x);
  return splitmix64(x);
}

inline std::uint64_t substream(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t x = seed + 0xD1B54A32D192ED03ULL * (index + 1);
  return splitmix64(x);
}

// Fisher-Yates, descending: for i = n-1 .. 1 swap p[i] with p[below(i+1)].
inline std::vector<std::uint32_t> rng_permutation(Rng& rng, std::size_t n) {
  if (n == 0) throw ConfigError("rng_permutation: n must be >= 1");
  std::vector<std::uint32_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<std::uint32_t>(i);
  for (std::size_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i + 1));
    std::swap(p[i], p[j]);
  }
  return p;
}

}  // namespace prcn
