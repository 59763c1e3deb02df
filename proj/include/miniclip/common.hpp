#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace miniclip {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes do not fit the operation.
struct ShapeError : Error {
    using Error::Error;
};

// Value outside the mathematical domain (log of non-positive, division by
// zero, zero-norm embedding rows).
struct DomainError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

// Invalid configuration detected at load time.
struct ConfigError : Error {
    using Error::Error;
};

// Dataset, vocabulary or file-format problems.
struct DataError : Error {
    using Error::Error;
};

using Shape = std::vector<int>;

inline int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Deterministic parallel map: [0, n) is split into contiguous chunks, each
// element is computed by exactly one worker with identical arithmetic, so the
// result is bit-equal for any thread count. Reductions stay single-threaded.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk_fn);

// Worker count used by parallel_for (MINICLIP_THREADS overrides hardware).
int thread_count();

}  // namespace miniclip
