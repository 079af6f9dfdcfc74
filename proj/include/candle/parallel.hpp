#pragma once

#include <cstddef>
#include <functional>

namespace candle {

/// Worker count: CANDLE_THREADS if set (>= 1), else hardware concurrency.
std::size_t thread_limit();

/// Runs fn(i) for i in [0, n) on up to thread_limit() threads. Each index
/// must write only to its own output slot so results do not depend on
/// scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace candle
