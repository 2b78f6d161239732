#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <thread>
#include <vector>

namespace lmens::detail {

// Token-range reductions are split into fixed-size blocks. Each block is
// accumulated sequentially, then block partials are combined by a fixed
// pairwise tree. The block layout never depends on the worker count, so the
// result is bitwise identical for any number of threads.
inline constexpr std::size_t kSumBlock = 128;

/// Pairwise sum with a sequential base case of kSumBlock elements.
inline double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= kSumBlock) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  const std::size_t half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

/// Runs `fn(first_block, last_block)` over contiguous block ranges using up
/// to `threads` workers.
template <class Fn>
void for_block_ranges(std::size_t n_blocks, std::size_t threads, Fn&& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n_blocks, 1));
  if (threads == 1) {
    fn(std::size_t{0}, n_blocks);
    return;
  }
  std::vector<std::jthread> workers;
  workers.reserve(threads);
  const std::size_t per = (n_blocks + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * per;
    const std::size_t hi = std::min(n_blocks, lo + per);
    if (lo >= hi) break;
    workers.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
}

/// Sums `width` accumulators over tokens [0, n). `accumulate(begin, end, acc)`
/// must add the contributions of tokens [begin, end) into acc[0..width).
template <class Accumulate>
std::vector<double> blocked_sum(std::size_t n, std::size_t width, std::size_t threads,
                                Accumulate&& accumulate) {
  const std::size_t n_blocks = (n + kSumBlock - 1) / kSumBlock;
  std::vector<double> partial(std::max<std::size_t>(n_blocks, 1) * width, 0.0);
  for_block_ranges(n_blocks, threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t b = lo; b < hi; ++b) {
      const std::size_t begin = b * kSumBlock;
      const std::size_t end = std::min(n, begin + kSumBlock);
      accumulate(begin, end, std::span<double>(partial.data() + b * width, width));
    }
  });
  // Fixed pairwise tree over block partials.
  std::size_t count = std::max<std::size_t>(n_blocks, 1);
  while (count > 1) {
    const std::size_t next = (count + 1) / 2;
    for (std::size_t i = 0; i < count / 2; ++i) {
      double* dst = partial.data() + i * width;
      const double* a = partial.data() + (2 * i) * width;
      const double* b = partial.data() + (2 * i + 1) * width;
      for (std::size_t k = 0; k < width; ++k) dst[k] = a[k] + b[k];
    }
    if (count % 2 == 1) {
      std::copy_n(partial.data() + (count - 1) * width, width, partial.data() + (next - 1) * width);
    }
    count = next;
  }
  partial.resize(width);
  return partial;
}

}  // namespace lmens::detail
