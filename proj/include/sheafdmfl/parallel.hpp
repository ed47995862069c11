#pragma once

#include <cstdlib>
#include <thread>
#include <vector>

namespace sheafdmfl {

/// Worker count from SHEAF_SIM_THREADS (default 1). Thread count affects
/// speed only: every parallel loop writes to disjoint per-index slots and
/// all reductions happen serially afterwards, so results are identical for
/// any setting.
inline int worker_count() {
  const char* env = std::getenv("SHEAF_SIM_THREADS");
  if (!env) return 1;
  int n = std::atoi(env);
  if (n < 1) return 1;
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  return hw > 0 && n > hw ? hw : n;
}

/// Run fn(i) for i in [0, n). fn must only touch state owned by index i.
template <class Fn>
void parallel_for(int n, Fn&& fn) {
  const int workers = worker_count();
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const int used = workers < n ? workers : n;
  pool.reserve(static_cast<std::size_t>(used));
  for (int w = 0; w < used; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += used) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace sheafdmfl
