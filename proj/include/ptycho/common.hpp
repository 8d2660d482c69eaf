#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <omp.h>

namespace ptycho {

// Error hierarchy. Everything user-facing throws one of these; messages carry
// the offending values so failures are diagnosable from the what() string.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error("dimension error: " + msg) {}
};

struct DomainError : Error {
    explicit DomainError(const std::string& msg) : Error("domain error: " + msg) {}
};

struct FormatError : Error {
    FormatError(const std::string& msg, std::uint64_t byte_offset)
        : Error("format error at byte " + std::to_string(byte_offset) + ": " + msg),
          offset(byte_offset) {}
    std::uint64_t offset;
};

struct DivergedError : Error {
    explicit DivergedError(const std::string& msg) : Error("diverged: " + msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

// Worker count for the data-parallel sections (scan positions, sweep cells).
// All reductions are performed in a fixed order after the parallel region, so
// results are bitwise identical for any thread count.
inline int& worker_threads() {
    static int n = 1;
    return n;
}

inline void set_worker_threads(int n) { worker_threads() = n < 1 ? 1 : n; }

// Runs fn(i) for i in [0, n). Each index must write only to its own slots;
// cross-index accumulation belongs after the loop, in index order.
template <typename Fn>
void parallel_for(int n, Fn&& fn) {
    const int threads = worker_threads();
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
#pragma omp parallel for schedule(static) num_threads(threads)
    for (int i = 0; i < n; ++i) fn(i);
}

}  // namespace ptycho
