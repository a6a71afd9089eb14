#include "evax/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include <cblas.h>

#include "evax/error.hpp"

namespace evax {

namespace {
std::atomic<int> g_threads{1};
}

void set_num_threads(int n) {
    if (n < 1) throw ConfigError("threads", "threads must be >= 1");
    g_threads = n;
    // BLAS stays single-threaded; parallelism is over samples.
    openblas_set_num_threads(1);
}

int num_threads() { return g_threads; }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)> &fn) {
    const int workers = static_cast<int>(std::min<std::int64_t>(g_threads, n));
    if (workers <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::int64_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const auto i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!first_error) first_error = std::current_exception();
                    next = n;
                }
            }
        });
    }
    for (auto &t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace evax
