#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace vitstem {

// Per-thread worker count for compute kernels. Trials in a sweep run with 1
// so that trial-level parallelism composes without oversubscription.
int compute_threads();
void set_compute_threads(int n);

// Runs fn over contiguous chunks of [0, n). Each index is processed by
// exactly one chunk, so writes to disjoint per-index outputs are
// bit-deterministic regardless of the thread count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace vitstem
