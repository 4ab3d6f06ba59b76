// SPDX-License-Identifier: Apache-2.0
#include <blockattn/parallel.hpp>

#include <cstdlib>
#include <thread>
#include <vector>

namespace blockattn {

int worker_count() {
  const char* env = std::getenv("BLOCKATTN_WORKERS");
  if (env == nullptr || *env == '\0') return 1;
  const int n = std::atoi(env);
  return n < 1 ? 1 : n;
}

void parallel_for(i64 n, const std::function<void(i64, i64, int)>& fn) {
  if (n <= 0) return;
  const int workers = static_cast<int>(std::min<i64>(worker_count(), n));
  if (workers <= 1) {
    fn(0, n, 0);
    return;
  }
  const i64 chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers - 1));
  for (int w = 1; w < workers; ++w) {
    const i64 begin = w * chunk;
    const i64 end = std::min<i64>(begin + chunk, n);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end, w] { fn(begin, end, w); });
  }
  fn(0, std::min<i64>(chunk, n), 0);
  for (auto& t : pool) t.join();
}

}  // namespace blockattn
