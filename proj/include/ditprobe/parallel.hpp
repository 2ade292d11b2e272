// Index-parallel loops whose results never depend on the worker count.
//
// Work items write into their own output slot; callers reduce the slots in
// index order afterwards.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ditprobe {

/// Worker cap: DITPROBE_THREADS if set (>= 1), else the hardware concurrency.
inline std::size_t worker_count() {
  if (const char* env = std::getenv("DITPROBE_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return std::size_t(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Calls f(i) for i in [0, n). The first exception thrown by any item is
/// rethrown on the calling thread after all workers stop.
template <class F>
void parallel_for(std::size_t n, F&& f) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto loop = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        f(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::jthread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(loop);
  loop();
  pool.clear();
  if (error) std::rethrow_exception(error);
}

}  // namespace ditprobe
