#pragma once

// Shared plumbing: error taxonomy, contract-check macros, string formatting,
// and a deterministic parallel_for. Everything downstream includes this.

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace arseg {

// ---------------------------------------------------------------------------
// Error taxonomy. Contract violations throw; the CLI maps these to exit codes
// (config/usage -> 2, parse/io -> 3, numeric -> 1).
// ---------------------------------------------------------------------------
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct DimensionError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename A, typename... Rest>
void format_into(std::ostringstream& os, const A& a, const Rest&... rest) {
  os << a;
  format_into(os, rest...);
}
}  // namespace detail

template <typename... Args>
std::string cat(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  return os.str();
}

// Contract checks stay active in release builds (they guard API misuse, not
// internal invariants), so they are macros over throw, not assert().
#define ARSG_CHECK_DIM(cond, ...) \
  do {                            \
    if (!(cond)) throw ::arseg::DimensionError(::arseg::cat(__VA_ARGS__)); \
  } while (0)
#define ARSG_CHECK_CFG(cond, ...) \
  do {                            \
    if (!(cond)) throw ::arseg::ConfigError(::arseg::cat(__VA_ARGS__)); \
  } while (0)
#define ARSG_CHECK_CONTRACT(cond, ...) \
  do {                                 \
    if (!(cond)) throw ::arseg::ContractError(::arseg::cat(__VA_ARGS__)); \
  } while (0)

// ---------------------------------------------------------------------------
// Worker-thread budget. ARSG_THREADS caps the pool; unset falls back to the
// hardware count. All parallel loops write disjoint output slots, so results
// are bit-identical for every thread count.
// ---------------------------------------------------------------------------
inline int max_threads() {
  static const int cached = [] {
    if (const char* env = std::getenv("ARSG_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
  }();
  return cached;
}

// Runs fn(i) for i in [0, n). Serial when the pool is 1 thread or the range
// is small; otherwise contiguous index slabs, one std::thread each.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn, int64_t min_grain = 1024) {
  if (n <= 0) return;
  int threads = max_threads();
  if (threads <= 1 || n < 2 * min_grain) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  int slabs = static_cast<int>(std::min<int64_t>(threads, (n + min_grain - 1) / min_grain));
  std::vector<std::thread> pool;
  pool.reserve(slabs);
  int64_t chunk = (n + slabs - 1) / slabs;
  for (int s = 0; s < slabs; ++s) {
    int64_t lo = s * chunk;
    int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace arseg
