#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ictx {

/// Runs fn(begin, end) over `workers` contiguous chunks of [0, n).
/// Chunk boundaries depend only on n and workers, and callers write results
/// into pre-sized slots, so output never depends on scheduling.
/// The first exception thrown by any chunk is rethrown on the caller.
template <typename Fn>
void parallel_chunks(std::size_t n, unsigned workers, Fn&& fn) {
    workers = std::max(1u, workers);
    if (workers == 1 || n < 2) {
        fn(std::size_t{0}, n);
        return;
    }
    const std::size_t chunks = std::min<std::size_t>(workers, n);
    std::exception_ptr failure;
    std::mutex failure_mutex;
    {
        std::vector<std::jthread> threads;
        threads.reserve(chunks);
        for (std::size_t c = 0; c < chunks; ++c) {
            const std::size_t begin = n * c / chunks;
            const std::size_t end = n * (c + 1) / chunks;
            threads.emplace_back([&, begin, end] {
                try {
                    fn(begin, end);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            });
        }
    }
    if (failure) std::rethrow_exception(failure);
}

template <typename Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
    parallel_chunks(n, workers, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) fn(i);
    });
}

}  // namespace ictx
