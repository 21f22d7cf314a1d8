#pragma once

// Counter-based, splittable random stream.
//
// Algorithm (stable across platforms, compilers and releases):
//   output(key, i) = mix64(key + (i + 1) * 0x9E3779B97F4A7C15)
// where mix64 is the SplitMix64 finalizer. A stream is the pair (key, counter).
// split(id) derives an independent child key:
//   child_key = mix64(key ^ mix64(id * 0xD1B54A32D192ED03 + 0x8BB84B93962EACC9))
// so a consumer identified by `id` never perturbs any sibling stream.
//
// Derived variates:
//   uniform()      = (output >> 11) * 2^-53                  in [0, 1)
//   below(n)       = Lemire multiply-shift with rejection     in [0, n)
//   normal()       = Box-Muller cosine branch from two uniforms

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string_view>

namespace protokd {

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// FNV-1a over a label; used to name sub-streams ("episodes", "skl", ...).
constexpr std::uint64_t stream_id(std::string_view label) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

class Rng {
 public:
  explicit constexpr Rng(std::uint64_t seed) noexcept : key_(mix64(seed ^ 0x6A09E667F3BCC909ULL)) {}

  constexpr std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  [[nodiscard]] constexpr Rng split(std::uint64_t id) const noexcept {
    Rng child{0};
    child.key_ = mix64(key_ ^ mix64(id * 0xD1B54A32D192ED03ULL + 0x8BB84B93962EACC9ULL));
    child.counter_ = 0;
    return child;
  }
  [[nodiscard]] constexpr Rng split(std::string_view label) const noexcept {
    return split(stream_id(label));
  }

  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    // Lemire's nearly-divisionless method.
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next_u64()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  double normal() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  [[nodiscard]] constexpr std::uint64_t key() const noexcept { return key_; }
  [[nodiscard]] constexpr std::uint64_t counter() const noexcept { return counter_; }

  friend constexpr bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace protokd
