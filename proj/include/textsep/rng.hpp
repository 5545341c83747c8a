#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace textsep {

// All randomness in the library flows through this generator so that runs are
// reproducible bit-for-bit across platforms and standard library versions
// (std::normal_distribution et al. are implementation-defined and therefore
// banned from library code).
//
// The generator is splitmix64: a 64-bit counter advanced by a fixed odd
// constant, passed through an avalanche mix. Seeds for sub-streams are derived
// statelessly with derive_seed(parent, index), so the result of generating
// example k never depends on how many examples were generated before it or on
// how work was split across threads.

constexpr std::uint64_t kGolden64 = 0x9e3779b97f4a7c15ull;

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Stateless stream split. Safe for nesting: derive_seed(derive_seed(s, a), b).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return mix64(seed + kGolden64 * (index + 1));
}

// FNV-1a over bytes, then mixed. Used to turn names (tokens, speaker ids,
// config dumps) into seeds.
constexpr std::uint64_t hash_str(std::string_view s, std::uint64_t seed = 0) {
  std::uint64_t h = 14695981039346656037ull ^ mix64(seed);
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return mix64(h);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += kGolden64;
    return mix64(state_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Uses the high bits via a 128-bit multiply;
  // bias is below 2^-64 and irrelevant here.
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(
        (static_cast<unsigned __int128>(next_u64()) *
         static_cast<unsigned __int128>(n)) >> 64);
  }

  // Standard normal via Box-Muller. The second value of each pair is cached.
  double gaussian() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[uniform_int(i + 1)]);
    }
  }

  // Sample k distinct indices from [0, n), order randomized.
  std::vector<std::int64_t> sample_indices(std::int64_t n, std::int64_t k) {
    std::vector<std::int64_t> pool(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    shuffle(pool);
    pool.resize(static_cast<std::size_t>(k < n ? k : n));
    return pool;
  }

 private:
  std::uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace textsep
