#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>
#include <functional>

namespace sdc {

enum class ErrorKind { argument, io, compute };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_argument(const std::string& msg) { throw Error(ErrorKind::argument, msg); }
[[noreturn]] inline void fail_io(const std::string& msg) { throw Error(ErrorKind::io, msg); }
[[noreturn]] inline void fail_compute(const std::string& msg) { throw Error(ErrorKind::compute, msg); }

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) throw Error(kind, msg);
}

// FNV-1a, used for spec hashes and rng substream derivation.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic rng. The raw engine is std::mt19937_64; the value
// transforms are hand-rolled so that streams are stable across standard
// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)) {}

  // Independent substream, e.g. rng.substream("init").
  Rng substream(const std::string& name) const {
    return Rng(state_ ^ fnv1a(name));
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    // modulo bias is negligible for n << 2^64
    return next_u64() % n;
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Splits [0, n) into contiguous chunks, one thread each. With threads <= 1
// runs inline. Callers must only use this where chunk writes are disjoint,
// so results do not depend on the thread count.
inline void parallel_for(int n, int threads, const std::function<void(int, int)>& body) {
  if (threads <= 1 || n <= 1) {
    body(0, n);
    return;
  }
  int t = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(std::size_t(t));
  int chunk = (n + t - 1) / t;
  for (int i = 0; i < t; ++i) {
    int lo = i * chunk;
    int hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace sdc
