#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace lmmboot {

/// Runs body(i) for i in [0, count) on up to `workers` threads. Each index is
/// processed exactly once; bodies must write only to index-owned slots so the
/// result is identical for every worker count. The first exception thrown by a
/// body is rethrown on the calling thread after all workers join.
inline void parallel_for(std::size_t count, unsigned workers,
                         const std::function<void(std::size_t)>& body);

/// Like parallel_for but with static striding: worker w handles indices
/// w, w + W, w + 2W, ... and receives its own id, so callers can keep
/// per-worker scratch. Slot-owned writes keep results worker-count invariant.
inline void parallel_for_strided(std::size_t count, unsigned workers,
                                 const std::function<void(unsigned, std::size_t)>& body) {
  if (count == 0) return;
  if (workers == 0) workers = std::thread::hardware_concurrency();
  const unsigned nthreads =
      static_cast<unsigned>(std::min<std::size_t>(std::max(1u, workers), count));
  if (nthreads == 1) {
    for (std::size_t i = 0; i < count; ++i) body(0, i);
    return;
  }
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&](unsigned w) {
    for (std::size_t i = w; i < count; i += nthreads) {
      if (failed.load(std::memory_order_relaxed)) return;
      try {
        body(w, i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        failed.store(true, std::memory_order_relaxed);
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  threads.reserve(nthreads);
  for (unsigned t = 0; t < nthreads; ++t) threads.emplace_back(worker, t);
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

inline void parallel_for(std::size_t count, unsigned workers,
                         const std::function<void(std::size_t)>& body) {
  if (count == 0) return;
  if (workers == 0) workers = std::thread::hardware_concurrency();
  if (workers <= 1 || count == 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&]() {
    while (!failed.load(std::memory_order_relaxed)) {
      const std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
      if (i >= count) break;
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        failed.store(true, std::memory_order_relaxed);
      }
    }
  };
  const std::size_t nthreads = std::min<std::size_t>(workers, count);
  std::vector<std::thread> threads;
  threads.reserve(nthreads);
  for (std::size_t t = 0; t < nthreads; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace lmmboot
