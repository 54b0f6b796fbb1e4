#pragma once

#include <cstddef>
#include <functional>

namespace precdiff {

// Worker cap from PRECDIFF_THREADS (0 or unset = hardware concurrency).
int worker_count();

// Runs fn(i) for i in [0, n) over up to worker_count() threads. Callers write
// results into index-addressed slots, so output never depends on scheduling.
// The first exception thrown by any task is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace precdiff
