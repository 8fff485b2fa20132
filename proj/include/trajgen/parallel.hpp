#pragma once

#include <cstddef>
#include <functional>

namespace trajgen {

// Worker count used by parallel_for when `threads` is 0. Starts at the
// hardware concurrency; the CLI's --threads flag overrides it.
std::size_t default_threads();
void set_default_threads(std::size_t n);

// Calls fn(i) for every i in [0, n). Work items are independent and results
// must be written to per-index slots, so output never depends on scheduling.
// If items throw, the exception from the lowest failing index seen is rethrown
// once all workers have stopped.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t threads = 0);

}  // namespace trajgen
