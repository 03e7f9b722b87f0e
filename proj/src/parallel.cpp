#include "vitstem/parallel.hpp"

#include <algorithm>

namespace vitstem {

namespace {
thread_local int g_threads = 1;
}

int compute_threads() { return g_threads; }

void set_compute_threads(int n) { g_threads = std::max(1, n); }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) {
        return;
    }
    const int t = static_cast<int>(std::min<std::int64_t>(g_threads, n));
    if (t <= 1) {
        fn(0, n);
        return;
    }
    const std::int64_t chunk = (n + t - 1) / t;
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(t - 1));
    for (int i = 1; i < t; ++i) {
        const std::int64_t lo = i * chunk;
        const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
        if (lo >= hi) {
            break;
        }
        workers.emplace_back([&fn, lo, hi] {
            const int saved = compute_threads();
            set_compute_threads(1);
            fn(lo, hi);
            set_compute_threads(saved);
        });
    }
    fn(0, std::min<std::int64_t>(n, chunk));
    for (auto& w : workers) {
        w.join();
    }
}

}  // namespace vitstem
