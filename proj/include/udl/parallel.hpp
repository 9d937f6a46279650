#pragma once

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "udl/core.hpp"

namespace udl {

inline int hardware_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

namespace detail {
inline int& max_threads_slot() {
  static int value = hardware_threads();
  return value;
}
}  // namespace detail

/// Global cap on worker threads (set once from the CLI --threads flag).
inline void set_max_threads(int n) { detail::max_threads_slot() = n < 1 ? 1 : n; }
inline int max_threads() { return detail::max_threads_slot(); }

/// Runs fn(block_index, begin, end) over [0, count) split into fixed-size
/// blocks. The block partition depends only on (count, block_size), never on
/// the worker count, so per-block results are reproducible under any
/// thread setting. fn must write only to block-local state.
template <class Fn>
void parallel_for_blocks(Index count, Index block_size, Fn&& fn, int threads = 0) {
  if (count <= 0) return;
  if (block_size <= 0) block_size = 1;
  const Index n_blocks = (count + block_size - 1) / block_size;
  if (threads <= 0) threads = max_threads();
  threads = static_cast<int>(std::min<Index>(threads, n_blocks));

  if (threads <= 1) {
    for (Index b = 0; b < n_blocks; ++b) {
      fn(b, b * block_size, std::min(count, (b + 1) * block_size));
    }
    return;
  }

  std::atomic<Index> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&]() {
    for (;;) {
      const Index b = next.fetch_add(1);
      if (b >= n_blocks) return;
      try {
        fn(b, b * block_size, std::min(count, (b + 1) * block_size));
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Deterministic sum of per-block matrix partials: each block accumulates
/// into its own slot in index order; slots are then combined serially in
/// block order.
template <class Fn>
Mat parallel_block_sum(Index count, Index block_size, Index rows, Index cols, Fn&& per_item,
                       int threads = 0) {
  if (block_size <= 0) block_size = 1;
  const Index n_blocks = count <= 0 ? 0 : (count + block_size - 1) / block_size;
  std::vector<Mat> partials(static_cast<std::size_t>(n_blocks));
  parallel_for_blocks(
      count, block_size,
      [&](Index b, Index begin, Index end) {
        Mat acc = Mat::Zero(rows, cols);
        for (Index i = begin; i < end; ++i) per_item(i, acc);
        partials[static_cast<std::size_t>(b)] = std::move(acc);
      },
      threads);
  Mat total = Mat::Zero(rows, cols);
  for (auto& p : partials) total += p;
  return total;
}

}  // namespace udl
