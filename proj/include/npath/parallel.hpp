#pragma once

#include <cstddef>
#include <functional>
#include <optional>

namespace npath {

// Worker count: the explicit request if given, else NEURONPATH_THREADS, else 1.
// Throws InvalidParameter on zero or a malformed environment value.
std::size_t resolve_threads(std::optional<std::size_t> requested);

// Calls fn(index, worker) for every index in [0, count) on up to `threads`
// workers. Callers write results into per-index slots, so output order never
// depends on scheduling. The exception from the lowest failing index is
// rethrown after all workers stop.
void parallel_for(std::size_t count, std::size_t threads,
                  const std::function<void(std::size_t index, std::size_t worker)>& fn);

}  // namespace npath
