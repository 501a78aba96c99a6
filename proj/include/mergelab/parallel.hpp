#pragma once

#include <cstddef>
#include <functional>

namespace mergelab {

// Runs fn(i) for i in [0, count) on up to `workers` threads. Items are claimed
// dynamically; the first exception thrown by any item is rethrown after all
// workers stop. workers <= 1 runs inline.
void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& fn);

// Worker count from MERGELAB_WORKERS, else `fallback`.
int default_workers(int fallback = 1);

} // namespace mergelab
