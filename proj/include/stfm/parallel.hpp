#pragma once

#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace stfm {

// Runs fn(i) for i in [0, n) across up to `threads` workers (0 = hardware
// concurrency). Work items are assigned in contiguous blocks; the caller is
// responsible for making per-item state independent. Results that must be
// order-sensitive (e.g. gradient accumulation) should be stored per item and
// reduced sequentially afterwards so the outcome is thread-count invariant.
// The first exception thrown by any worker is rethrown on the calling thread
// after all workers have joined.
inline void parallel_for(int n, const std::function<void(int)>& fn,
                         int threads = 0) {
  if (threads <= 0) {
    threads = static_cast<int>(std::thread::hardware_concurrency());
    if (threads <= 0) threads = 1;
  }
  if (threads > n) threads = n;
  if (n <= 0) return;
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const int chunk = (n + threads - 1) / threads;
  for (int w = 0; w < threads; ++w) {
    const int lo = w * chunk;
    const int hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn, &failure, &failure_mutex] {
      try {
        for (int i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace stfm
