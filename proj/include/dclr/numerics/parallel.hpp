#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace dclr::numerics {

inline std::size_t& thread_count() {
  static std::size_t n = 1;
  return n;
}

/// Sets the worker count used by parallel_for; 0 selects hardware concurrency.
inline void set_threads(std::size_t n) {
  thread_count() = n == 0 ? std::max(1u, std::thread::hardware_concurrency()) : n;
}

/// Runs fn(i) for i in [0, n). Work is split into contiguous static chunks, so
/// any fn whose iterations write disjoint outputs gives identical results for
/// every thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        const std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace dclr::numerics
