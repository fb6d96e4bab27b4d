#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prcn/error.hpp"
#include "prcn/rng.hpp"

namespace prcn {

// Permanent channel wiring: a permutation of the E expanded channels, cut
// into E/cmp consecutive pooling supports. Immutable once built.
//
// Support j is {perm[j*cmp], ..., perm[(j+1)*cmp - 1]}; the supports are
// disjoint and cover [0, E).
class Connectome {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  // Permutation from Rng(seed) via Fisher-Yates (E-1 draws), or the identity
  // when randomized is false. The seed is recorded either way.
  static Connectome build(std::uint64_t seed, std::size_t expansion, std::size_t cmp, bool randomized) {
    validate_sizes(expansion, cmp);
    std::vector<std::uint32_t> perm;
    if (randomized) {
      Rng rng(seed);
      perm = rng_permutation(rng, expansion);
    } else {
      perm.resize(expansion);
      for (std::size_t i = 0; i < expansion; ++i) perm[i] = static_cast<std::uint32_t>(i);
    }
    return Connectome(std::move(perm), cmp, seed, randomized);
  }

  // Consumes one draw from `rng` as the connectome seed.
  static Connectome build(Rng& rng, std::size_t expansion, std::size_t cmp, bool randomized) {
    return build(rng.next(), expansion, cmp, randomized);
  }

  std::size_t expansion() const { return perm_.size(); }
  std::size_t cmp() const { return cmp_; }
  std::size_t slots() const { return perm_.size() / cmp_; }
  std::uint64_t seed() const { return seed_; }
  bool randomized() const { return randomized_; }
  std::span<const std::uint32_t> perm() const { return perm_; }
  std::span<const std::uint32_t> support(std::size_t j) const {
    return std::span<const std::uint32_t>(perm_).subspan(j * cmp_, cmp_);
  }

  // FNV-1a over (cmp, perm); identifies the applied index map.
  std::uint64_t hash() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto mix = [&h](std::uint32_t v) {
      for (int b = 0; b < 4; ++b) {
        h ^= (v >> (8 * b)) & 0xFFu;
        h *= 0x100000001B3ULL;
      }
    };
    mix(static_cast<std::uint32_t>(cmp_));
    for (auto p : perm_) mix(p);
    return h;
  }

  // Little-endian: u32 version, u32 E, u32 cmp, u32 randomized, u64 seed,
  // u32 count (== E), count x u32 perm entries.
  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out;
    out.reserve(28 + 4 * perm_.size());
    put32(out, kFormatVersion);
    put32(out, static_cast<std::uint32_t>(perm_.size()));
    put32(out, static_cast<std::uint32_t>(cmp_));
    put32(out, randomized_ ? 1u : 0u);
    put64(out, seed_);
    put32(out, static_cast<std::uint32_t>(perm_.size()));
    for (auto p : perm_) put32(out, p);
    return out;
  }

  static Connectome deserialize(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    const auto version = get32(bytes, pos);
    if (version != kFormatVersion) throw ParseError("connectome: unsupported version " + std::to_string(version), 0);
    const auto expansion = get32(bytes, pos);
    const auto cmp = get32(bytes, pos);
    const auto flag = get32(bytes, pos);
    if (flag > 1) throw ParseError("connectome: bad randomized flag", 12);
    const auto seed = get64(bytes, pos);
    const auto count = get32(bytes, pos);
    if (count != expansion) throw ParseError("connectome: perm length != E", 24);
    if (cmp == 0 || expansion == 0 || expansion % cmp != 0)
      throw ParseError("connectome: cmp does not divide E", 8);
    if (bytes.size() - pos != 4ull * count)
      throw ParseError("connectome: payload length mismatch (truncated or trailing bytes)", bytes.size());
    std::vector<std::uint32_t> perm(count);
    std::vector<bool> seen(count, false);
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::size_t at = pos;
      perm[i] = get32(bytes, pos);
      if (perm[i] >= count || seen[perm[i]])
        throw ParseError("connectome: perm is not a bijection (entry " + std::to_string(i) + ")", at);
      seen[perm[i]] = true;
      if (flag == 0 && perm[i] != i) throw ParseError("connectome: non-random connectome is not identity", at);
    }
    return Connectome(std::move(perm), cmp, seed, flag == 1);
  }

  bool operator==(const Connectome&) const = default;

 private:
  Connectome(std::vector<std::uint32_t> perm, std::size_t cmp, std::uint64_t seed, bool randomized)
      : perm_(std::move(perm)), cmp_(cmp), seed_(seed), randomized_(randomized) {}

  static void validate_sizes(std::size_t expansion, std::size_t cmp) {
    if (expansion == 0) throw ConfigError("connectome: expansion must be >= 1");
    if (cmp == 0 || cmp > expansion || expansion % cmp != 0)
      throw ConfigError("connectome: CMP " + std::to_string(cmp) + " must divide expansion " +
                        std::to_string(expansion));
    if (expansion > 0xFFFFFFFFull) throw ConfigError("connectome: expansion too large");
  }

  static void put32(std::vector<std::uint8_t>& o, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) o.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  static void put64(std::vector<std::uint8_t>& o, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) o.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  static std::uint32_t get32(std::span<const std::uint8_t> s, std::size_t& pos) {
    if (pos + 4 > s.size()) throw ParseError("connectome: truncated payload", pos);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(s[pos + b]) << (8 * b);
    pos += 4;
    return v;
  }
  static std::uint64_t get64(std::span<const std::uint8_t> s, std::size_t& pos) {
    const std::uint64_t lo = get32(s, pos);
    const std::uint64_t hi = get32(s, pos);
    return lo | (hi << 32);
  }

  std::vector<std::uint32_t> perm_;
  std::size_t cmp_ = 1;
  std::uint64_t seed_ = 0;
  bool randomized_ = false;
};

}  // namespace prcn
