#pragma once

#include <cstddef>
#include <functional>

namespace aosense {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items must
// be independent and write only to their own output slots; under that
// contract results are identical for any thread count. threads <= 1 runs
// inline. Exceptions from workers are rethrown on the caller thread.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

// Thread budget resolution: explicit argument > AOSENSE_THREADS env var
// > hardware concurrency.
int resolve_threads(int requested);

}  // namespace aosense
