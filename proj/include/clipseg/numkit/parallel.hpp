#pragma once

#include <cstddef>
#include <functional>

namespace clipseg {

/// Worker count used by parallel kernels. Defaults to the CLIPSEG_THREADS
/// environment variable, else the hardware concurrency.
std::size_t thread_count();
void set_thread_count(std::size_t n);

/// Runs fn(i) for i in [begin, end). Each index must write disjoint output so
/// results are identical for every thread count.
void parallel_for(std::size_t begin, std::size_t end, const std::function<void(std::size_t)>& fn,
                  std::size_t min_grain = 1);

}  // namespace clipseg
