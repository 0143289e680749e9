#pragma once

#include <cstddef>
#include <functional>

namespace segcal {

// Caps the worker count used by parallel_for. 0 restores the default
// (hardware concurrency).
void set_thread_limit(unsigned limit);
unsigned thread_limit();

// Runs body(i) for i in [0, n). Each index is processed exactly once; callers
// write results into per-index slots and reduce afterwards in index order, so
// output never depends on scheduling. The first exception thrown (lowest
// index) is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace segcal
