#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hashrec/binarize.hpp"
#include "hashrec/dataset.hpp"
#include "hashrec/dense.hpp"

namespace hashrec {

struct HammingNeighbor {
    Index item = 0;
    std::uint32_t distance = 0;

    friend bool operator==(const HammingNeighbor&, const HammingNeighbor&) = default;
};

struct ScoredItem {
    Index item = 0;
    double score = 0.0;

    friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

std::uint32_t hamming_distance(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);

/// Exact Hamming top-k over item codes by a word-parallel XOR/popcount scan.
/// Immutable after construction; queries may run concurrently.
class HammingIndex {
public:
    explicit HammingIndex(BinaryCodeMatrix codes);

    std::size_t size() const noexcept { return codes_.rows(); }
    std::size_t code_bits() const noexcept { return codes_.code_bits(); }
    const BinaryCodeMatrix& codes() const noexcept { return codes_; }

    /// Up to k items ordered by (distance, item id). `exclude` must be sorted;
    /// listed items are never returned.
    std::vector<HammingNeighbor> query_topk(std::span<const std::uint64_t> query, std::size_t k,
                                            std::span<const Index> exclude = {}) const;

private:
    BinaryCodeMatrix codes_;
};

HammingIndex build_index(BinaryCodeMatrix codes);

/// Top-k items by inner product with `query`, descending, ties by item id.
/// `exclude` must be sorted.
std::vector<ScoredItem> continuous_topk(const DenseMatrix& items, std::span<const double> query,
                                        std::size_t k, std::span<const Index> exclude = {});

}  // namespace hashrec
