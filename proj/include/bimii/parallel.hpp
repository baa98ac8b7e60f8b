#pragma once

#include <functional>

namespace bimii {

// Static-partition parallel loop over [0, n). Work is split into contiguous
// chunks, one per worker, so results never depend on the thread count; every
// output element is produced by exactly one fixed-order inner loop.
// Worker count = min(hardware threads, BIMII_THREADS if set). n below the
// grain threshold runs inline.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk);

int worker_count();

}  // namespace bimii
