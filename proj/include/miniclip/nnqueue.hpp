#pragma once

// Fixed-capacity FIFO store of past text embeddings with exact cosine
// nearest-neighbor retrieval. Entries are plain values, never part of a
// gradient graph.

#include <optional>
#include <span>
#include <vector>

#include "miniclip/common.hpp"

namespace miniclip {

struct NearestResult {
    std::vector<float> neighbors;      // [n, dim], copies of the winning rows
    std::vector<int> indices;          // age-order index per query, 0 = oldest
    std::vector<float> similarities;   // cosine of the winning row per query
};

class FeatureQueue {
  public:
    FeatureQueue(int capacity, int dim);

    int capacity() const { return capacity_; }
    int dim() const { return dim_; }
    int fill() const { return fill_; }
    bool empty() const { return fill_ == 0; }

    // Appends unit rows in batch order, evicting the oldest entries once
    // full. Pushing more than `capacity` rows in one call keeps the last
    // `capacity` of them.
    void push_batch(std::span<const float> rows, int n, int dim);

    // Exact search: per query the stored row with the highest cosine
    // similarity; ties go to the oldest entry. Empty queue -> nullopt
    // (warm-up; the caller substitutes its own features).
    std::optional<NearestResult> nearest(std::span<const float> queries, int n, int dim) const;

    // Stored rows in age order, oldest first.
    std::vector<float> snapshot() const;

    // Raw ring state for checkpointing.
    const std::vector<float>& storage() const { return storage_; }
    int head() const { return head_; }
    static FeatureQueue restore(int capacity, int dim, int fill, int head, std::vector<float> storage);

  private:
    int capacity_;
    int dim_;
    int fill_ = 0;
    int head_ = 0;  // next write slot
    std::vector<float> storage_;
};

}  // namespace miniclip
