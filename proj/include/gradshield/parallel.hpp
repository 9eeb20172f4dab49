#pragma once

#include <cstddef>
#include <functional>

namespace gradshield {

// Worker count from GRADSHIELD_THREADS (default 1).
std::size_t thread_count();

// Calls fn(i) for i in [0, n). Each index must write only its own output slot,
// so results do not depend on the thread count. The first exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace gradshield
