#pragma once

#include <cstddef>
#include <functional>

namespace kanet {

/// Worker count: KANET_THREADS if set and positive, else hardware concurrency.
std::size_t worker_count();

/// Run fn(chunk) for chunk in [0, chunks). Chunks are independent; callers
/// that reduce across chunks do so in chunk order afterwards, so results do
/// not depend on the worker count.
void parallel_for(std::size_t chunks, const std::function<void(std::size_t)>& fn);

}  // namespace kanet
