#pragma once

#include <cstddef>
#include <functional>

namespace funcreg {

/// Worker count: FUNCREG_THREADS when set to a positive integer, otherwise
/// the hardware concurrency (at least 1).
std::size_t worker_count();

/// Calls fn(i) for every i in [0, n) on up to `threads` workers. The first
/// exception thrown by any call is rethrown after all workers join. Callers
/// write results into pre-sized slots, so output is independent of
/// scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t threads = worker_count());

}  // namespace funcreg
