#include "hashrec/index.hpp"

#include <algorithm>
#include <bit>

#include "hashrec/errors.hpp"

namespace hashrec {

std::uint32_t hamming_distance(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
    std::uint32_t d = 0;
    for (std::size_t w = 0; w < a.size(); ++w) d += static_cast<std::uint32_t>(std::popcount(a[w] ^ b[w]));
    return d;
}

HammingIndex::HammingIndex(BinaryCodeMatrix codes) : codes_(std::move(codes)) {}

HammingIndex build_index(BinaryCodeMatrix codes) { return HammingIndex(std::move(codes)); }

std::vector<HammingNeighbor> HammingIndex::query_topk(std::span<const std::uint64_t> query,
                                                      std::size_t k,
                                                      std::span<const Index> exclude) const {
    if (k == 0) throw ContractError("query_topk: k must be at least 1");
    if (query.size() != codes_.words_per_row()) {
        throw ContractError("query_topk: query width does not match index code width");
    }

    // distances are bounded by code_bits, so bucket by distance; scanning items
    // in id order keeps each bucket sorted by id
    const std::size_t bits = codes_.code_bits();
    std::vector<std::vector<Index>> buckets(bits + 1);
    std::size_t next_excluded = 0;
    for (std::size_t item = 0; item < codes_.rows(); ++item) {
        while (next_excluded < exclude.size() && exclude[next_excluded] < item) ++next_excluded;
        if (next_excluded < exclude.size() && exclude[next_excluded] == item) continue;
        buckets[hamming_distance(codes_.row(item), query)].push_back(static_cast<Index>(item));
    }

    std::vector<HammingNeighbor> out;
    out.reserve(std::min(k, codes_.rows()));
    for (std::uint32_t d = 0; d <= bits && out.size() < k; ++d) {
        for (Index item : buckets[d]) {
            if (out.size() == k) break;
            out.push_back({item, d});
        }
    }
    return out;
}

std::vector<ScoredItem> continuous_topk(const DenseMatrix& items, std::span<const double> query,
                                        std::size_t k, std::span<const Index> exclude) {
    if (k == 0) throw ContractError("continuous_topk: k must be at least 1");
    if (query.size() != items.cols()) throw ContractError("continuous_topk: query width mismatch");

    std::vector<ScoredItem> scored;
    scored.reserve(items.rows());
    std::size_t next_excluded = 0;
    for (std::size_t item = 0; item < items.rows(); ++item) {
        while (next_excluded < exclude.size() && exclude[next_excluded] < item) ++next_excluded;
        if (next_excluded < exclude.size() && exclude[next_excluded] == item) continue;
        scored.push_back({static_cast<Index>(item), dot(items.row(item), query)});
    }
    const auto better = [](const ScoredItem& a, const ScoredItem& b) {
        return a.score != b.score ? a.score > b.score : a.item < b.item;
    };
    const std::size_t n = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(), better);
    scored.resize(n);
    return scored;
}

}  // namespace hashrec
