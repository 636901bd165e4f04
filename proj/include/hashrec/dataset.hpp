#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace hashrec {

using Index = std::uint32_t;

struct Rating {
    Index user = 0;
    Index item = 0;
    std::uint8_t value = 0;  // 1..5 explicit, 1 implicit
    std::optional<std::int64_t> timestamp;

    friend bool operator==(const Rating&, const Rating&) = default;
};

/// Sparse users x items store. Entries are kept sorted by (user, item) and
/// a per-user offset table gives O(1) access to each user's row.
class RatingMatrix {
public:
    RatingMatrix() = default;

    /// Validates ids, duplicates and values; throws ContractError / RangeError.
    RatingMatrix(std::size_t num_users, std::size_t num_items, std::vector<Rating> entries);

    std::size_t num_users() const noexcept { return num_users_; }
    std::size_t num_items() const noexcept { return num_items_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }

    std::span<const Rating> entries() const noexcept { return entries_; }
    std::span<const Rating> user_row(Index user) const;

    /// Stored value or 0 when absent.
    std::uint8_t value(Index user, Index item) const;

    std::vector<std::size_t> user_counts() const;
    std::vector<std::size_t> item_counts() const;

    double density() const;

    friend bool operator==(const RatingMatrix& a, const RatingMatrix& b) {
        return a.num_users_ == b.num_users_ && a.num_items_ == b.num_items_ &&
               a.entries_ == b.entries_;
    }

private:
    std::size_t num_users_ = 0;
    std::size_t num_items_ = 0;
    std::vector<Rating> entries_;
    std::vector<std::size_t> row_offsets_{0};
};

/// Binary relation S: (user, item) is a member iff S_ab = 1.
class SimilarityMatrix {
public:
    SimilarityMatrix() = default;
    SimilarityMatrix(std::size_t num_users, std::size_t num_items,
                     std::vector<std::pair<Index, Index>> positives);

    std::size_t num_users() const noexcept { return num_users_; }
    std::size_t num_items() const noexcept { return num_items_; }
    std::size_t size() const noexcept { return items_.size(); }

    /// Sorted positive items of a user.
    std::span<const Index> positives_of(Index user) const;
    bool contains(Index user, Index item) const;

private:
    std::size_t num_users_ = 0;
    std::size_t num_items_ = 0;
    std::vector<Index> items_;
    std::vector<std::size_t> row_offsets_{0};
};

enum class RatingFormat { movielens_dat, tsv_triples };

enum class SplitProtocol { per_user, global };

/// Folds carry no timestamps; the split manifest does not persist them.
struct SplitPair {
    RatingMatrix train;
    RatingMatrix test;
    std::uint64_t seed = 0;
    double train_ratio = 0.8;
    SplitProtocol protocol = SplitProtocol::per_user;
};

struct DatasetStats {
    std::size_t users = 0;
    std::size_t items = 0;
    std::size_t ratings = 0;
    double density = 0.0;
};

RatingFormat parse_rating_format(const std::string& name);
std::string to_string(RatingFormat format);
SplitProtocol parse_split_protocol(const std::string& name);
std::string to_string(SplitProtocol protocol);

/// Reads ratings, re-indexing ids densely in first-appearance order.
/// Zero-valued lines are dropped since absence already encodes 0.
RatingMatrix load_ratings(const std::filesystem::path& path, RatingFormat format);
RatingMatrix parse_ratings(std::istream& in, RatingFormat format);

/// Drops users and items below the thresholds until nothing changes.
RatingMatrix filter_min_interactions(const RatingMatrix& r, std::size_t min_user,
                                     std::size_t min_item);

/// (a, b) is positive iff the stored value is strictly greater than threshold.
SimilarityMatrix derive_similarity(const RatingMatrix& r, int threshold);

SplitPair split_per_user(const RatingMatrix& r, double train_ratio, std::uint64_t seed);
SplitPair split_global(const RatingMatrix& r, double train_ratio, std::uint64_t seed);
SplitPair split(const RatingMatrix& r, SplitProtocol protocol, double train_ratio,
                std::uint64_t seed);

/// Keeps `count` uniformly chosen users (all of them if fewer exist) and
/// re-densifies both id spaces, dropping items left without ratings.
RatingMatrix subsample_users(const RatingMatrix& r, std::size_t count, std::uint64_t seed);

DatasetStats stats(const RatingMatrix& r);
/// Counts over the raw id range (largest user and item id) rather than the
/// dense ids; MovieLens tables report density this way.
DatasetStats id_range_stats(const std::filesystem::path& path, RatingFormat format);

/// Split manifest: `user\titem\tvalue\tfold` rows with a header carrying the
/// id-space sizes, so dense ids survive the round trip exactly.
void save_split(const std::filesystem::path& path, const SplitPair& split);
SplitPair load_split(const std::filesystem::path& path);

void save_similarity(const std::filesystem::path& path, const SimilarityMatrix& s);
SimilarityMatrix load_similarity(const std::filesystem::path& path);

/// Parameters of the latent-factor generator used for MovieLens-shaped
/// stand-in corpora.
struct SyntheticConfig {
    std::size_t users = 1200;
    std::size_t items = 3700;
    std::size_t latent_dim = 8;
    std::size_t min_per_user = 20;
    double mean_per_user = 165.0;
    double popularity_exponent = 0.9;
    double noise = 0.6;
    std::uint64_t seed = 1;
};

/// Ratings 1..5 from user/item factors with popularity-skewed exposure;
/// users choose items partly by taste, as in real rating logs.
RatingMatrix synthesize_ratings(const SyntheticConfig& cfg);
/// Writes `user::item::rating::timestamp` lines with 1-based ids.
void save_movielens_dat(const std::filesystem::path& path, const RatingMatrix& r);

}  // namespace hashrec
