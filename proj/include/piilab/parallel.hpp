#pragma once

#include <algorithm>
#include <functional>
#include <thread>
#include <vector>

namespace piilab {

// Static-partition parallel loop. Each index is processed exactly once and
// results must be written to per-index slots, which keeps reductions
// deterministic regardless of scheduling.
inline void parallel_for(int n, const std::function<void(int)>& body, int n_threads = 0) {
    if (n <= 0) return;
    if (n_threads <= 0) {
        n_threads = static_cast<int>(std::thread::hardware_concurrency());
        if (n_threads <= 0) n_threads = 1;
    }
    n_threads = std::min(n_threads, n);
    if (n_threads == 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(static_cast<size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t) {
        workers.emplace_back([=, &body] {
            for (int i = t; i < n; i += n_threads) body(i);
        });
    }
    for (auto& w : workers) w.join();
}

}  // namespace piilab
