#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace treenet {

namespace detail {
inline std::atomic<int>& thread_setting() {
    static std::atomic<int> threads{1};
    return threads;
}
}  // namespace detail

inline void set_num_threads(int n) { detail::thread_setting() = std::max(1, n); }
inline int num_threads() { return detail::thread_setting(); }

/// Reads TREENET_THREADS; returns `fallback` when unset or malformed.
inline int threads_from_env(int fallback = 1) {
    const char* env = std::getenv("TREENET_THREADS");
    if (!env || !*env) return fallback;
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) return fallback;
    return static_cast<int>(v);
}

/// Splits [0, n) into contiguous chunks, one per worker. Each index is handled by
/// exactly one worker, so results do not depend on the thread count as long as
/// `fn` writes only to locations owned by its index.
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn, std::int64_t min_chunk = 1) {
    const std::int64_t workers =
        std::min<std::int64_t>(num_threads(), std::max<std::int64_t>(1, n / std::max<std::int64_t>(1, min_chunk)));
    if (workers <= 1 || n <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers - 1));
    const std::int64_t chunk = (n + workers - 1) / workers;
    auto run = [&](std::int64_t w) {
        const std::int64_t lo = w * chunk, hi = std::min(n, lo + chunk);
        for (std::int64_t i = lo; i < hi; ++i) fn(i);
    };
    for (std::int64_t w = 1; w < workers; ++w) pool.emplace_back(run, w);
    run(0);
    for (auto& t : pool) t.join();
}

}  // namespace treenet
