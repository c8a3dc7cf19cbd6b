#pragma once

#include <cstddef>
#include <functional>

namespace akd {

/// Worker count: AKD_THREADS if set and positive, else hardware concurrency.
int thread_count();

/// Runs body(i) for i in [0, n). Each index is processed exactly once by one
/// thread; callers keep outputs per-index so results never depend on the
/// schedule.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace akd
