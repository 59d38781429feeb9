#ifndef FSLF_PARALLEL_HPP
#define FSLF_PARALLEL_HPP

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace fslf {

// Worker count: FSLF_THREADS caps it, hardware concurrency is the default.
inline int worker_count() {
  int n = int(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* env = std::getenv("FSLF_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, cap);
  }
  return n;
}

// Order-independent parallel loop over [0, n).
template <typename Fn>
void parallel_for(size_t n, Fn&& fn) {
  int workers = worker_count();
  if (workers <= 1 || n < 2) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  size_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    size_t begin = size_t(w) * chunk;
    size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([begin, end, &fn] {
      for (size_t i = begin; i < end; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace fslf

#endif  // FSLF_PARALLEL_HPP
