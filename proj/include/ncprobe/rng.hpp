#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <utility>
#include <vector>

#include "ncprobe/tensor.hpp"

namespace ncprobe {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// PCG XSL-RR 128/64. Output depends only on the seed, never on the platform.
class SeededRng {
 public:
  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  explicit SeededRng(std::uint64_t seed = 0) : seed_(seed) {
    const unsigned __int128 init_state =
        (static_cast<unsigned __int128>(splitmix64(seed)) << 64) | splitmix64(seed ^ 0xA5A5A5A5A5A5A5A5ULL);
    const unsigned __int128 init_seq =
        (static_cast<unsigned __int128>(splitmix64(seed + 1)) << 64) | splitmix64(seed + 2);
    state_ = 0;
    inc_ = (init_seq << 1) | 1u;
    step();
    state_ += init_state;
    step();
  }

  std::uint64_t seed() const { return seed_; }

  result_type operator()() {
    step();
    const auto hi = static_cast<std::uint64_t>(state_ >> 64);
    const auto lo = static_cast<std::uint64_t>(state_);
    const std::uint64_t x = hi ^ lo;
    const unsigned rot = static_cast<unsigned>(hi >> 58);
    return (x >> rot) | (x << ((64u - rot) & 63u));
  }

  // Independent generator keyed by (seed, label); does not consume from this stream.
  SeededRng child(std::string_view label) const {
    return SeededRng(splitmix64(seed_ ^ splitmix64(fnv1a64(label))));
  }
  SeededRng child(std::uint64_t index) const {
    return SeededRng(splitmix64(seed_ ^ splitmix64(index + 0x632BE59BD9B4E019ULL)));
  }

  // Uniform in (0, 1], 53 bits from one raw draw.
  double uniform_open0() { return (static_cast<double>((*this)() >> 11) + 1.0) * 0x1.0p-53; }
  // Uniform in [0, 1), 53 bits from one raw draw.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0, n) by rejection (Lemire); variable draw count.
  std::uint64_t below(std::uint64_t n) {
    unsigned __int128 m = static_cast<unsigned __int128>((*this)()) * n;
    auto l = static_cast<std::uint64_t>(m);
    if (l < n) {
      const std::uint64_t t = -n % n;
      while (l < t) {
        m = static_cast<unsigned __int128>((*this)()) * n;
        l = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  // Standard normal via Box-Muller; exactly two raw draws per value.
  double normal() {
    const double u1 = uniform_open0();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  void step() {
    constexpr unsigned __int128 kMult =
        (static_cast<unsigned __int128>(2549297995355413924ULL) << 64) | 4865540595714422341ULL;
    state_ = state_ * kMult + inc_;
  }

  std::uint64_t seed_;
  unsigned __int128 state_ = 0;
  unsigned __int128 inc_ = 0;
};

// i.i.d. N(0,1) entries, two raw draws per element in row-major order.
inline Tensor gaussian(SeededRng& rng, const Shape& shape) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

// Fisher-Yates over [0, n).
inline std::vector<std::size_t> permutation(SeededRng& rng, std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

}  // namespace ncprobe
