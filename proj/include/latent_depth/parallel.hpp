#pragma once

#include <cstddef>
#include <functional>

namespace latent_depth {

// Worker count from LATENT_DEPTH_THREADS (0 or unset = hardware concurrency).
std::size_t thread_count();

// Runs body(i) for i in [0, n). Iterations must write disjoint state; callers
// reduce per-iteration partials afterwards in index order, which keeps results
// independent of the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace latent_depth
