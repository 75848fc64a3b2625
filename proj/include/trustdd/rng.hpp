#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "trustdd/common.hpp"

namespace trustdd {

// Deterministic RNG with named child streams. Distributions are implemented
// here rather than with <random> adaptors so that draws are bit-reproducible
// regardless of the standard library (std distributions are
// implementation-defined). Core generator is splitmix64->xoshiro256**.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed + 0x9e3779b97f4a7c15ull;
    for (auto& si : s_) {
      x += 0x9e3779b97f4a7c15ull;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
      si = z ^ (z >> 31);
    }
  }

  // Child stream: independent generator derived from (seed path, name).
  Rng stream(const std::string& name) const {
    return Rng(fnv1a64(name) ^ (s_[0] + 0x632be59bd9b4e019ull));
  }
  Rng stream(const std::string& name, std::uint64_t index) const {
    return stream(name + "#" + std::to_string(index));
  }

  std::uint64_t next_u64() {
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

  // Uniform on [0,1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) via rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error("Rng::below called with n=0");
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  std::int64_t index(std::int64_t n) { return static_cast<std::int64_t>(below(static_cast<std::uint64_t>(n))); }

  // Standard normal via Box-Muller (both values used).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  bool coin() { return (next_u64() >> 63) != 0; }

  // Fisher-Yates permutation of [0, n).
  std::vector<std::int64_t> permutation(std::int64_t n) {
    std::vector<std::int64_t> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), std::int64_t{0});
    for (std::int64_t i = n - 1; i > 0; --i) {
      std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(index(i + 1))]);
    }
    return p;
  }

  // k distinct indices from [0, n), order = draw order.
  std::vector<std::int64_t> sample_without_replacement(std::int64_t n, std::int64_t k) {
    if (k > n) throw Error("sample_without_replacement: k > n");
    auto p = permutation(n);
    p.resize(static_cast<std::size_t>(k));
    return p;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t s_[4];
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace trustdd
