#pragma once

#include <cstddef>
#include <functional>

namespace nvdeer {

/// Worker count: NVDEER_THREADS when set to a positive integer, otherwise the
/// hardware concurrency.
unsigned thread_count();

/// Runs body(i) for i in [0, n) across thread_count() workers. The first
/// exception thrown by any body is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace nvdeer
