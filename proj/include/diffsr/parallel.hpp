#pragma once

#include <cstddef>
#include <functional>

namespace diffsr {

/// Worker count: DIFFSR_THREADS if set to a positive integer, else the hardware concurrency.
int thread_count();

/// Runs fn(i) for i in [0, n) on up to thread_count() threads, static contiguous partition.
/// Each call records its own autograd state; rethrows the first exception by index order.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace diffsr
