// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include <blockattn/tensor.hpp>

namespace blockattn {

// Worker count used by parallel_for: the BLOCKATTN_WORKERS environment
// variable if set (clamped to >= 1), otherwise 1. Single-threaded by default
// so results and op counters are trivially reproducible unless the caller
// opts in.
int worker_count();

// Runs fn(begin, end, worker) over a static partition of [0, n) across
// worker_count() threads. Contiguous chunks, worker 0 runs on the calling
// thread. fn must only write worker-private or index-disjoint state.
void parallel_for(i64 n, const std::function<void(i64 begin, i64 end, int worker)>& fn);

}  // namespace blockattn
