#pragma once

#include <cstddef>
#include <functional>

namespace topicnet {

// Worker count: hardware concurrency, capped by the TOPICNET_THREADS environment variable.
std::size_t worker_count();

// Runs fn(i) for i in [0, n) on up to worker_count() threads. Work items must be independent;
// the first exception thrown is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace topicnet
