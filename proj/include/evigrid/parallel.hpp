// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>

namespace evigrid {

// Worker count: EVIGRID_THREADS if set and positive, else hardware
// concurrency (at least 1).
int worker_count();

// Calls fn(i) for i in [0, n) across worker_count() threads. Callers write
// results by index, so output order never depends on scheduling. If any call
// throws, remaining work is skipped and one of the exceptions is rethrown.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace evigrid
