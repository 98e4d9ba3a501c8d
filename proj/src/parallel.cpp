#include "latent_depth/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace latent_depth {

std::size_t thread_count() {
  std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  const char* env = std::getenv("LATENT_DEPTH_THREADS");
  if (env == nullptr || *env == '\0') return hw;
  char* end = nullptr;
  const long requested = std::strtol(env, &end, 10);
  if (end == env || requested < 0) return hw;
  if (requested == 0) return hw;
  return static_cast<std::size_t>(requested);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace latent_depth
