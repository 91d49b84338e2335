#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mmgen {

inline int worker_count() {
    if (const char* env = std::getenv("MMGEN_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

// Runs fn(i) for i in [0,n). Each index is processed exactly once on some
// worker; callers own determinism by merging results in index order. The
// first exception is rethrown on the calling thread.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn, int max_workers = 0) {
    if (n <= 0) return;
    int workers = max_workers > 0 ? max_workers : worker_count();
    if (workers > n) workers = static_cast<int>(n);
    if (workers <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::exception_ptr err;
    std::mutex err_mu;
    auto run = [&]() {
        for (;;) {
            const int64_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!err) err = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers - 1));
    for (int t = 0; t < workers - 1; ++t) pool.emplace_back(run);
    run();
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace mmgen
