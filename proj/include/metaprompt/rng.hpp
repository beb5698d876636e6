#pragma once

// Deterministic random streams. mt19937_64 supplies the bits; the
// distributions are hand-mapped so sequences are identical across standard
// library implementations (std::uniform_*_distribution is not portable).

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "metaprompt/common.hpp"

namespace metaprompt {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller.
  double next_normal() {
    double u1 = 0.0;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  int next_int(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::next_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return static_cast<int>(x % un);
  }

  void shuffle(std::vector<int>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      std::swap(v[static_cast<std::size_t>(i)],
                v[static_cast<std::size_t>(next_int(i + 1))]);
    }
  }

  // k distinct indices from [0, n), order randomized (partial Fisher-Yates).
  std::vector<int> sample_indices(int n, int k) {
    if (k > n) throw std::invalid_argument("Rng::sample_indices: k > n");
    std::vector<int> pool(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
      const int j = i + next_int(n - i);
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    pool.resize(static_cast<std::size_t>(k));
    return pool;
  }

  // Independent substream derived from the original seed, not the current
  // generator state, so forks are order-insensitive.
  Rng fork(std::uint64_t salt) const {
    return Rng(fnv1a64(salt, fnv1a64(seed_)));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
};

// Stable seed derivation for named substreams (task ids, arm labels, ...).
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag,
                                 std::uint64_t salt = 0) {
  return fnv1a64(salt, fnv1a64(tag, fnv1a64(root)));
}

}  // namespace metaprompt
