#pragma once

// Shared basics: Eigen aliases, the error type used across the library,
// small vector helpers, and a deterministic parallel-for.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace latte {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// All failures surface as latte::Error. The kind tells the CLI which exit
// code to use: validation -> 2, missing dependency -> 3, everything else -> 1.
class Error : public std::runtime_error {
 public:
  enum class Kind { internal, validation, dependency };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const { return kind_; }

  static Error internal(const std::string& what) { return Error(Kind::internal, what); }
  static Error validation(const std::string& what) { return Error(Kind::validation, what); }
  static Error dependency(const std::string& what) { return Error(Kind::dependency, what); }

 private:
  Kind kind_;
};

inline double cosine(const Vec& a, const Vec& b, double eps = 1e-12) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na < eps || nb < eps) return 0.0;
  return a.dot(b) / (na * nb);
}

// A vector together with a flag telling whether normalization was possible.
struct UnitVec {
  Vec v;
  bool degenerate = false;
};

inline UnitVec normalized(const Vec& x, double eps = 1e-12) {
  const double n = x.norm();
  if (!(n > eps)) return {Vec::Zero(x.size()), true};
  return {x / n, false};
}

inline bool all_finite(const Vec& x) { return x.allFinite(); }

// Number of worker threads: LATTE_THREADS if set and >= 1, else 1.
inline int thread_count() {
  const char* env = std::getenv("LATTE_THREADS");
  if (env == nullptr) return 1;
  const long n = std::strtol(env, nullptr, 10);
  if (n < 1) return 1;
  return static_cast<int>(std::min<long>(n, 256));
}

// Runs fn(i) for i in [0, n). Work is cut into chunks whose boundaries depend
// only on n, never on the thread count, so any reduction done per-index or
// per-chunk gives identical results for every LATTE_THREADS setting.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const int workers = thread_count();
  if (workers <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<std::size_t> next{0};
  const std::size_t chunk = std::max<std::size_t>(1, n / 64);
  auto worker = [&]() {
    for (;;) {
      const std::size_t begin = next.fetch_add(chunk);
      if (begin >= n) return;
      const std::size_t end = std::min(n, begin + chunk);
      for (std::size_t i = begin; i < end; ++i) fn(i);
    }
  };
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

}  // namespace latte
