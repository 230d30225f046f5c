#pragma once

// Fixed-assignment worker pool: task i always runs exactly once and
// writes only its own output slot, so results never depend on the
// worker count.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace haloroute {

/// Worker count from HALOROUTE_WORKERS, else `fallback`. Values < 1 are
/// treated as 1.
inline int worker_count(int fallback = 1) {
  if (const char* env = std::getenv("HALOROUTE_WORKERS")) {
    try {
      return std::max(1, std::stoi(env));
    } catch (const std::exception&) {
      return std::max(1, fallback);
    }
  }
  return std::max(1, fallback);
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. The first
/// exception (lowest task index) is rethrown after all threads join.
inline void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  workers = std::clamp(workers, 1, std::max(1, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex mu;
  int failed_at = n;
  std::exception_ptr failure;
  auto body = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (i < failed_at) {
          failed_at = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace haloroute
