#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace maskdiff {

// Worker count: MASKDIFF_THREADS when set to a positive integer, otherwise
// the hardware concurrency (at least 1).
inline int thread_count() {
  if (const char* env = std::getenv("MASKDIFF_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

struct Chunk {
  int begin = 0;
  int end = 0;
};

// Splits [0, n) into at most `parts` contiguous, nearly equal chunks.
inline std::vector<Chunk> split_range(int n, int parts) {
  parts = std::clamp(parts, 1, std::max(n, 1));
  std::vector<Chunk> out;
  int start = 0;
  for (int p = 0; p < parts; ++p) {
    const int len = n / parts + (p < n % parts ? 1 : 0);
    out.push_back({start, start + len});
    start += len;
  }
  return out;
}

// Runs fn(chunk_index) for every chunk, one thread per chunk beyond the first.
// The first exception thrown (by chunk order) is rethrown.
inline void run_chunks(size_t count, const std::function<void(size_t)>& fn) {
  if (count <= 1) {
    if (count == 1) fn(0);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> workers;
  for (size_t i = 1; i < count; ++i) {
    workers.emplace_back([&, i] {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  }
  try {
    fn(0);
  } catch (...) {
    errors[0] = std::current_exception();
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace maskdiff
