#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace ddcn {

// Worker cap. Starts from DDCN_THREADS (or hardware concurrency) and can be
// forced to 1 by the CLI's --deterministic switch.
inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap = [] {
    if (const char* env = std::getenv("DDCN_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
  }();
  return cap;
}

inline void set_thread_cap(int n) { thread_cap().store(std::max(1, n)); }

// Runs body(i) for i in [0, count). Each index is owned by exactly one
// worker, so results that are written per index do not depend on the
// schedule. Exceptions are rethrown on the calling thread.
template <typename Body>
void parallel_for(std::size_t count, Body&& body) {
  std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(thread_cap().load()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(count);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(run);
  run();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace ddcn
