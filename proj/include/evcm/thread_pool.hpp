#pragma once
// Minimal data-parallel helper: runs a callable over a fixed contiguous
// partition of [0, n). Chunk boundaries depend only on (n, n_chunks), so any
// result written per-chunk is reproducible for a fixed chunk count.

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace evcm {

// fn(chunk_index, begin, end); chunk 0 runs on the calling thread.
inline void parallel_chunks(std::size_t n, int n_chunks,
                            const std::function<void(int, std::size_t, std::size_t)>& fn) {
  if (n_chunks <= 1) {
    fn(0, 0, n);
    return;
  }
  const auto bound = [n, n_chunks](int c) {
    return n * static_cast<std::size_t>(c) / static_cast<std::size_t>(n_chunks);
  };
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(n_chunks) - 1);
  for (int c = 1; c < n_chunks; ++c)
    workers.emplace_back([&fn, &bound, c] { fn(c, bound(c), bound(c + 1)); });
  fn(0, bound(0), bound(1));
  for (std::thread& w : workers) w.join();
}

}  // namespace evcm
