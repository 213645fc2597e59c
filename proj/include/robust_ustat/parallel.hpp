#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "robust_ustat/matrix.hpp"

namespace robust_ustat {

namespace detail {

inline std::atomic<int>& thread_count_slot() {
  static std::atomic<int> slot{0};
  return slot;
}

/// Set on pool workers so nested reductions run serially.
inline bool& inside_worker() {
  thread_local bool flag = false;
  return flag;
}

}  // namespace detail

/// Worker count used by the parallel reductions. Defaults to
/// ROBUST_USTAT_THREADS when set, otherwise hardware concurrency.
inline int thread_count() {
  const int set = detail::thread_count_slot().load(std::memory_order_relaxed);
  if (set > 0) return set;
  if (const char* env = std::getenv("ROBUST_USTAT_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// n <= 0 restores the default.
inline void set_thread_count(int n) {
  detail::thread_count_slot().store(n > 0 ? n : 0, std::memory_order_relaxed);
}

/// Runs body(chunk) for chunk in [0, chunks). Chunks are claimed
/// dynamically, so body must only write to chunk-indexed state. Calls made
/// from inside another parallel_for_chunks run serially.
template <class Body>
void parallel_for_chunks(std::size_t chunks, Body&& body, int threads = thread_count()) {
  std::size_t workers = std::min<std::size_t>(chunks, static_cast<std::size_t>(std::max(1, threads)));
  if (detail::inside_worker()) workers = 1;
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) body(c);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&] {
    const bool outer = detail::inside_worker();
    detail::inside_worker() = true;
    try {
      for (std::size_t c = next.fetch_add(1); c < chunks; c = next.fetch_add(1)) body(c);
    } catch (...) {
      next.store(chunks);
      const std::lock_guard lock(error_mutex);
      if (!error) error = std::current_exception();
    }
    detail::inside_worker() = outer;
  };
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
    run();
  }
  if (error) std::rethrow_exception(error);
}

/// Kahan-compensated running sum of equally shaped matrices.
class KahanMatrixSum {
 public:
  KahanMatrixSum() = default;
  KahanMatrixSum(Index rows, Index cols)
      : sum_(Matrix::Zero(rows, cols)), comp_(Matrix::Zero(rows, cols)), tmp_(rows, cols) {}

  void add(const Matrix& x) {
    // y = x - c; t = s + y; c = (t - s) - y; s = t
    tmp_ = x - comp_;
    Matrix t = sum_ + tmp_;
    comp_ = (t - sum_) - tmp_;
    sum_.swap(t);
  }

  const Matrix& sum() const { return sum_; }

 private:
  Matrix sum_;
  Matrix comp_;
  Matrix tmp_;
};

/// Kahan-compensated scalar sum.
class KahanSum {
 public:
  void add(double x) {
    const double y = x - comp_;
    const double t = sum_ + y;
    comp_ = (t - sum_) - y;
    sum_ = t;
  }
  double sum() const { return sum_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

}  // namespace robust_ustat
