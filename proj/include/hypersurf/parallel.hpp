#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace hypersurf {

// Worker count used by every parallel loop in the library. Defaults to the
// number of available cores.
void set_num_threads(unsigned n);
unsigned num_threads();

// Runs body(i) for i in [0, n). Each index is handled by exactly one worker,
// so results written per index do not depend on the thread count. The first
// exception thrown by any worker is rethrown on the caller.
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
    const unsigned nt = static_cast<unsigned>(std::min<std::size_t>(num_threads(), n));
    if (nt <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::exception_ptr> errors(nt);
    std::vector<std::thread> pool;
    pool.reserve(nt);
    for (unsigned t = 0; t < nt; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < n; i += nt) body(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// Block size for chunked reductions. Fixed, so partial sums are formed over
// the same index ranges regardless of thread count.
inline constexpr std::size_t kReductionBlock = 4096;

inline std::size_t num_blocks(std::size_t n) { return (n + kReductionBlock - 1) / kReductionBlock; }

}  // namespace hypersurf
