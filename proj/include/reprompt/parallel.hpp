#pragma once

#include <cstddef>
#include <functional>

namespace reprompt {

/// Worker count from REPROMPT_WORKERS, else hardware concurrency (min 1).
int worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Each index must
/// write only its own output slot; callers reduce in index order, so results
/// do not depend on the worker count. Nested calls run inline.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace reprompt
