#include "miniclip/nnqueue.hpp"

#include <cmath>
#include <cstring>

namespace miniclip {

FeatureQueue::FeatureQueue(int capacity, int dim) : capacity_(capacity), dim_(dim) {
    if (capacity <= 0 || dim <= 0)
        throw ConfigError("queue capacity and dim must be positive, got " + std::to_string(capacity) + ", " +
                          std::to_string(dim));
    storage_.assign(static_cast<size_t>(capacity) * dim, 0.0f);
}

void FeatureQueue::push_batch(std::span<const float> rows, int n, int dim) {
    if (dim != dim_)
        throw ShapeError("queue dim mismatch: pushing [" + std::to_string(n) + "x" + std::to_string(dim) +
                         "] into queue of dim " + std::to_string(dim_));
    if (static_cast<size_t>(n) * dim != rows.size())
        throw ShapeError("queue push size mismatch");
    for (int i = 0; i < n; ++i) {
        double sq = 0;
        for (int j = 0; j < dim; ++j) sq += static_cast<double>(rows[i * dim + j]) * rows[i * dim + j];
        if (std::abs(std::sqrt(sq) - 1.0) > 1e-5)
            throw DomainError("queue rows must be unit-norm; row " + std::to_string(i) + " has norm " +
                              std::to_string(std::sqrt(sq)));
    }
    for (int i = 0; i < n; ++i) {
        std::memcpy(storage_.data() + static_cast<size_t>(head_) * dim_, rows.data() + static_cast<size_t>(i) * dim_,
                    sizeof(float) * dim_);
        head_ = (head_ + 1) % capacity_;
        if (fill_ < capacity_) ++fill_;
    }
}

std::optional<NearestResult> FeatureQueue::nearest(std::span<const float> queries, int n, int dim) const {
    if (dim != dim_)
        throw ShapeError("queue dim mismatch: querying [" + std::to_string(n) + "x" + std::to_string(dim) +
                         "] against queue of dim " + std::to_string(dim_));
    if (static_cast<size_t>(n) * dim != queries.size())
        throw ShapeError("queue query size mismatch");
    if (fill_ == 0) return std::nullopt;

    NearestResult out;
    out.neighbors.resize(static_cast<size_t>(n) * dim_);
    out.indices.resize(n);
    out.similarities.resize(n);
    const int oldest = (head_ - fill_ + capacity_) % capacity_;
    parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t q = lo; q < hi; ++q) {
            const float* qrow = queries.data() + q * dim_;
            double best = -2.0;
            int best_age = 0;
            for (int j = 0; j < fill_; ++j) {
                const int slot = (oldest + j) % capacity_;
                const float* srow = storage_.data() + static_cast<size_t>(slot) * dim_;
                double acc = 0;
                for (int k = 0; k < dim_; ++k) acc += static_cast<double>(qrow[k]) * srow[k];
                if (acc > best) {  // strict: the oldest of equals wins
                    best = acc;
                    best_age = j;
                }
            }
            const int slot = (oldest + best_age) % capacity_;
            std::memcpy(out.neighbors.data() + q * dim_, storage_.data() + static_cast<size_t>(slot) * dim_,
                        sizeof(float) * dim_);
            out.indices[q] = best_age;
            out.similarities[q] = static_cast<float>(best);
        }
    });
    return out;
}

std::vector<float> FeatureQueue::snapshot() const {
    std::vector<float> rows(static_cast<size_t>(fill_) * dim_);
    const int oldest = (head_ - fill_ + capacity_) % capacity_;
    for (int j = 0; j < fill_; ++j) {
        const int slot = (oldest + j) % capacity_;
        std::memcpy(rows.data() + static_cast<size_t>(j) * dim_, storage_.data() + static_cast<size_t>(slot) * dim_,
                    sizeof(float) * dim_);
    }
    return rows;
}

FeatureQueue FeatureQueue::restore(int capacity, int dim, int fill, int head, std::vector<float> storage) {
    FeatureQueue q(capacity, dim);
    if (fill < 0 || fill > capacity || head < 0 || head >= capacity ||
        storage.size() != static_cast<size_t>(capacity) * dim)
        throw DataError("corrupt queue state in checkpoint");
    q.fill_ = fill;
    q.head_ = head;
    q.storage_ = std::move(storage);
    return q;
}

}  // namespace miniclip
