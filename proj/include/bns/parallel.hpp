#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace bns {

/// Worker count taken from the BNS_THREADS environment variable.
///
/// Defaults to 1 (fully serial). Values are clamped to the hardware thread
/// count. Deterministic output is preserved regardless of the budget because
/// callers write into per-index slots and reduce in index order.
inline int thread_budget() {
    const char* env = std::getenv("BNS_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end == env || v < 1) return 1;
    unsigned hw = std::thread::hardware_concurrency();
    if (hw > 0 && v > static_cast<long>(hw)) v = static_cast<long>(hw);
    if (v > 256) v = 256;
    return static_cast<int>(v);
}

/// Runs fn(i) for every i in [0, count), using up to thread_budget() workers.
///
/// With a budget of 1 (the default) everything runs inline on the calling
/// thread. The first exception thrown by any worker is rethrown on the caller
/// after all workers join.
inline void parallel_for(int count, const std::function<void(int)>& fn) {
    if (count <= 0) return;
    const int workers = std::min(thread_budget(), count);
    if (workers <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto body = [&]() {
        for (;;) {
            int i = next.fetch_add(1, std::memory_order_relaxed);
            if (i >= count) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(body);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace bns
