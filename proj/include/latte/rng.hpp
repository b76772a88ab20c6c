#pragma once

// Seeded randomness with reproducible output everywhere. std::shuffle and the
// std distributions are implementation-defined, so every draw here is built
// from raw 64-bit outputs of xoshiro256** seeded through SplitMix64.
//
// Streams: Rng(seed, stream) gives an independent generator per (seed, stream)
// pair, so per-trial / per-user generators never depend on call order.

#include "latte/core.hpp"

#include <cstdint>
#include <cstring>

namespace latte {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
    // Mix the stream id in through SplitMix64 so streams 0,1,2,... are as
    // unrelated as arbitrary seeds.
    std::uint64_t sm = seed;
    (void)splitmix64(sm);
    sm ^= 0xd1b54a32d192ed03ULL * (stream + 1);
    for (auto& word : s_) word = splitmix64(sm);
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;  // all-zero state is invalid
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

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Multiply-shift; bias is < 2^-64 per draw.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller. Pairs are generated together and the
  // second value is cached, so draws cost one transcendental pair per two.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;  // guard log(0)
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  Vec normal_vec(Eigen::Index d, double sd = 1.0) {
    Vec v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = sd * normal();
    return v;
  }

  Vec unit_vec(Eigen::Index d) {
    for (;;) {
      Vec v = normal_vec(d);
      const double n = v.norm();
      if (n > 1e-12) return v / n;
    }
  }

  // Random point on the probability simplex (normalized exponentials).
  Vec simplex(Eigen::Index k) {
    Vec w(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      double u = uniform();
      if (u <= 0.0) u = 0x1.0p-53;
      w[i] = -std::log(u);
    }
    return w / w.sum();
  }

  // Fisher-Yates with our own bounded draw (std::shuffle is not reproducible
  // across standard libraries).
  template <typename T>
  void shuffle(std::vector<T>& items) {
    if (items.size() < 2) return;
    for (std::size_t i = items.size() - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i + 1));
      std::swap(items[i], items[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Stable 64-bit hash of a string, used to derive stream ids from names.
inline std::uint64_t stream_of(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace latte
