#include "npath/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "npath/error.hpp"

namespace npath {

std::size_t resolve_threads(std::optional<std::size_t> requested) {
  if (requested) {
    if (*requested == 0) throw InvalidParameter("--threads must be >= 1");
    return *requested;
  }
  const char* env = std::getenv("NEURONPATH_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(env, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != std::string(env).size() || v == 0) {
    throw InvalidParameter(std::string("NEURONPATH_THREADS='") + env + "' is not a positive integer");
  }
  return v;
}

void parallel_for(std::size_t count, std::size_t threads,
                  const std::function<void(std::size_t, std::size_t)>& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i, 0);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_index = count;
  std::exception_ptr failure;

  auto work = [&](std::size_t worker) {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i, worker);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (i < failed_index) {
          failed_index = i;
          failure = std::current_exception();
        }
      }
    }
  };
  const std::size_t n = std::min(threads, count);
  std::vector<std::thread> pool;
  pool.reserve(n);
  for (std::size_t w = 0; w < n; ++w) pool.emplace_back(work, w);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace npath
