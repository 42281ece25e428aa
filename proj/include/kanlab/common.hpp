#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace kanlab {

// ---------------------------------------------------------------------------
// Error taxonomy. Every module throws one of these; the CLI maps them to
// module-qualified diagnostics and a nonzero exit code.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };   // shape/rank mismatch
struct ConfigError : Error { using Error::Error; };      // invalid configuration
struct OutOfDomainError : Error { using Error::Error; }; // spline input outside grid
struct NumericError : Error { using Error::Error; };     // non-finite values
struct InputError : Error { using Error::Error; };       // bad argument values
struct IoError : Error { using Error::Error; };          // file system failures

// ---------------------------------------------------------------------------
// Deterministic random numbers. All randomness in the project flows from one
// root seed, split per component by stable string labels so that a single
// seed reproduces an entire experiment bit for bit on any platform.
// std::random distributions are implementation-defined, so the generator and
// the distributions are spelled out here.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  // Derive an independent stream for a named component.
  Rng split(std::string_view label) const {
    std::uint64_t mix = seed_fingerprint() ^ fnv1a64(label);
    return Rng(mix);
  }
  Rng child(std::uint64_t n) const {
    std::uint64_t mix = seed_fingerprint() ^ (0x9e3779b97f4a7c15ull * (n + 1));
    return Rng(mix);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    // multiply-shift; bias is negligible for the n used here and the result
    // is identical on every platform
    return std::uint64_t((__uint128_t(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller (deterministic, no rejection loop).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = std::size_t(index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }
  std::uint64_t seed_fingerprint() const {
    return s_[0] ^ rotl(s_[1], 13) ^ rotl(s_[2], 29) ^ rotl(s_[3], 47);
  }
  std::uint64_t s_[4]{};
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Deterministic parallelism. Work is cut into chunks whose boundaries depend
// only on the problem size, never on the thread count; each chunk is owned by
// exactly one thread and writes disjoint output. Reductions accumulate one
// partial per chunk and combine them in chunk order, so results are
// bit-identical for any --jobs setting.
// ---------------------------------------------------------------------------

inline std::atomic<int>& detail_max_threads() {
  static std::atomic<int> v{int(std::thread::hardware_concurrency())};
  return v;
}
inline int max_threads() {
  const int v = detail_max_threads().load(std::memory_order_relaxed);
  return v > 0 ? v : 1;
}
inline void set_max_threads(int n) {
  detail_max_threads().store(n > 0 ? n : 1, std::memory_order_relaxed);
}

// Calls fn(begin, end) over a fixed partition of [0, n).
template <class Fn>
void parallel_for(std::int64_t n, const Fn& fn, int threads = 0) {
  if (n <= 0) return;
  if (threads <= 0) threads = max_threads();
  std::int64_t nchunks = std::min<std::int64_t>(n, std::int64_t(threads) * 4);
  if (nchunks < 1) nchunks = 1;
  if (threads == 1 || nchunks == 1) {
    fn(std::int64_t(0), n);
    return;
  }
  std::atomic<std::int64_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::int64_t c = next.fetch_add(1);
      if (c >= nchunks) break;
      const std::int64_t b = c * n / nchunks;
      const std::int64_t e = (c + 1) * n / nchunks;
      if (b < e) fn(b, e);
    }
  };
  std::vector<std::thread> pool;
  const int spawn = std::min<std::int64_t>(threads, nchunks) - 1;
  pool.reserve(std::size_t(spawn));
  for (int i = 0; i < spawn; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
}

// Calls fn(chunk, begin, end) for `nchunks` fixed chunks of [0, n); intended
// for reductions where the caller sums per-chunk partials in chunk order.
template <class Fn>
void parallel_chunks(std::int64_t n, std::int64_t nchunks, const Fn& fn,
                     int threads = 0) {
  if (n <= 0 || nchunks <= 0) return;
  if (threads <= 0) threads = max_threads();
  nchunks = std::min(nchunks, n);
  if (threads == 1 || nchunks == 1) {
    for (std::int64_t c = 0; c < nchunks; ++c)
      fn(c, c * n / nchunks, (c + 1) * n / nchunks);
    return;
  }
  std::atomic<std::int64_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::int64_t c = next.fetch_add(1);
      if (c >= nchunks) break;
      fn(c, c * n / nchunks, (c + 1) * n / nchunks);
    }
  };
  std::vector<std::thread> pool;
  const int spawn = int(std::min<std::int64_t>(threads, nchunks)) - 1;
  pool.reserve(std::size_t(spawn));
  for (int i = 0; i < spawn; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
}

}  // namespace kanlab
