#ifndef LGCP_PARALLEL_HPP
#define LGCP_PARALLEL_HPP

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace lgcp {

inline int& max_threads_ref() {
  static int t = static_cast<int>(std::thread::hardware_concurrency());
  return t;
}

inline void set_max_threads(int t) { max_threads_ref() = std::max(1, t); }
inline int max_threads() { return std::max(1, max_threads_ref()); }

// Runs body(i) for i in [0, n). Work is split into contiguous index chunks,
// one per thread; bodies must write only to slots indexed by i so the result
// is identical for any thread count. Reductions happen afterwards in index
// order at the call site.
template <typename Body>
void parallel_for(std::size_t n, Body&& body, int threads = 0) {
  if (threads <= 0) threads = max_threads();
  threads = static_cast<int>(std::min<std::size_t>(threads, n));
  if (threads <= 1 || n < 64) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  std::size_t chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    std::size_t beg = t * chunk;
    std::size_t end = std::min(n, beg + chunk);
    if (beg >= end) break;
    pool.emplace_back([&body, beg, end] {
      for (std::size_t i = beg; i < end; ++i) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace lgcp

#endif
