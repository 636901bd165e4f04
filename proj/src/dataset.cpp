#include "hashrec/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <sstream>
#include <string_view>
#include <unordered_map>
#include <unordered_set>

#include "hashrec/errors.hpp"
#include "hashrec/rng.hpp"

namespace hashrec {

namespace {

bool entry_less(const Rating& a, const Rating& b) {
    return a.user != b.user ? a.user < b.user : a.item < b.item;
}

std::vector<std::size_t> build_offsets(std::size_t rows, std::span<const Index> row_of) {
    std::vector<std::size_t> offsets(rows + 1, 0);
    for (Index r : row_of) {
        ++offsets[r + 1];
    }
    std::partial_sum(offsets.begin(), offsets.end(), offsets.begin());
    return offsets;
}

// Re-densifies users and items that are kept, preserving relative order.
RatingMatrix compact(const RatingMatrix& r, const std::vector<bool>& keep_user,
                     const std::vector<bool>& keep_item) {
    std::vector<Index> user_map(r.num_users()), item_map(r.num_items());
    Index next = 0;
    for (std::size_t u = 0; u < r.num_users(); ++u) {
        user_map[u] = keep_user[u] ? next++ : 0;
    }
    const std::size_t users = next;
    next = 0;
    for (std::size_t i = 0; i < r.num_items(); ++i) {
        item_map[i] = keep_item[i] ? next++ : 0;
    }
    const std::size_t items = next;

    std::vector<Rating> out;
    out.reserve(r.size());
    for (const Rating& e : r.entries()) {
        if (keep_user[e.user] && keep_item[e.item]) {
            Rating copy = e;
            copy.user = user_map[e.user];
            copy.item = item_map[e.item];
            out.push_back(copy);
        }
    }
    return RatingMatrix(users, items, std::move(out));
}

class IdMap {
public:
    Index get(std::string_view key) {
        auto [it, inserted] = ids_.try_emplace(std::string(key), static_cast<Index>(ids_.size()));
        return it->second;
    }
    std::size_t size() const { return ids_.size(); }

private:
    std::unordered_map<std::string, Index> ids_;
};

template <typename T>
bool parse_number(std::string_view text, T& out) {
    while (!text.empty() && (text.front() == ' ' || text.front() == '\r')) text.remove_prefix(1);
    while (!text.empty() && (text.back() == ' ' || text.back() == '\r')) text.remove_suffix(1);
    if (text.empty()) return false;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
    return ec == std::errc() && ptr == text.data() + text.size();
}

std::vector<std::string_view> split_fields(std::string_view line, std::string_view sep) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(sep, start);
        if (pos == std::string_view::npos) {
            fields.push_back(line.substr(start));
            return fields;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + sep.size();
    }
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    return in;
}

std::size_t header_value(const std::string& line, const std::string& key) {
    const std::size_t pos = line.find(key + "=");
    if (pos == std::string::npos) throw ParseError(1, "missing header key " + key);
    std::size_t value = 0;
    std::string_view rest(line);
    rest.remove_prefix(pos + key.size() + 1);
    rest = rest.substr(0, rest.find(' '));
    if (!parse_number(rest, value)) throw ParseError(1, "bad header value for " + key);
    return value;
}

}  // namespace

RatingMatrix::RatingMatrix(std::size_t num_users, std::size_t num_items, std::vector<Rating> entries)
    : num_users_(num_users), num_items_(num_items), entries_(std::move(entries)) {
    for (const Rating& e : entries_) {
        if (e.user >= num_users_ || e.item >= num_items_) {
            throw ContractError("rating entry id out of range");
        }
        if (e.value == 0 || e.value > 5) {
            throw RangeError("stored rating must be in 1..5, got " + std::to_string(e.value));
        }
    }
    if (!std::is_sorted(entries_.begin(), entries_.end(), entry_less)) {
        std::stable_sort(entries_.begin(), entries_.end(), entry_less);
    }
    for (std::size_t k = 1; k < entries_.size(); ++k) {
        if (entries_[k].user == entries_[k - 1].user && entries_[k].item == entries_[k - 1].item) {
            throw ContractError("duplicate (user, item) pair");
        }
    }
    std::vector<Index> users(entries_.size());
    std::transform(entries_.begin(), entries_.end(), users.begin(),
                   [](const Rating& e) { return e.user; });
    row_offsets_ = build_offsets(num_users_, users);
}

std::span<const Rating> RatingMatrix::user_row(Index user) const {
    if (user >= num_users_) throw ContractError("user id out of range");
    return std::span<const Rating>(entries_).subspan(
        row_offsets_[user], row_offsets_[user + 1] - row_offsets_[user]);
}

std::uint8_t RatingMatrix::value(Index user, Index item) const {
    const auto row = user_row(user);
    auto it = std::lower_bound(row.begin(), row.end(), item,
                               [](const Rating& e, Index i) { return e.item < i; });
    return (it != row.end() && it->item == item) ? it->value : 0;
}

std::vector<std::size_t> RatingMatrix::user_counts() const {
    std::vector<std::size_t> counts(num_users_);
    for (std::size_t u = 0; u < num_users_; ++u) {
        counts[u] = row_offsets_[u + 1] - row_offsets_[u];
    }
    return counts;
}

std::vector<std::size_t> RatingMatrix::item_counts() const {
    std::vector<std::size_t> counts(num_items_, 0);
    for (const Rating& e : entries_) ++counts[e.item];
    return counts;
}

double RatingMatrix::density() const {
    if (num_users_ == 0 || num_items_ == 0) return 0.0;
    return static_cast<double>(entries_.size()) /
           (static_cast<double>(num_users_) * static_cast<double>(num_items_));
}

SimilarityMatrix::SimilarityMatrix(std::size_t num_users, std::size_t num_items,
                                   std::vector<std::pair<Index, Index>> positives)
    : num_users_(num_users), num_items_(num_items) {
    std::sort(positives.begin(), positives.end());
    positives.erase(std::unique(positives.begin(), positives.end()), positives.end());
    std::vector<Index> users;
    users.reserve(positives.size());
    items_.reserve(positives.size());
    for (auto [u, i] : positives) {
        if (u >= num_users_ || i >= num_items_) throw ContractError("similarity id out of range");
        users.push_back(u);
        items_.push_back(i);
    }
    row_offsets_ = build_offsets(num_users_, users);
}

std::span<const Index> SimilarityMatrix::positives_of(Index user) const {
    if (user >= num_users_) throw ContractError("user id out of range");
    return std::span<const Index>(items_).subspan(row_offsets_[user],
                                                  row_offsets_[user + 1] - row_offsets_[user]);
}

bool SimilarityMatrix::contains(Index user, Index item) const {
    const auto row = positives_of(user);
    return std::binary_search(row.begin(), row.end(), item);
}

RatingFormat parse_rating_format(const std::string& name) {
    if (name == "movielens_dat") return RatingFormat::movielens_dat;
    if (name == "tsv_triples") return RatingFormat::tsv_triples;
    throw ContractError("unknown rating format '" + name + "'");
}

std::string to_string(RatingFormat format) {
    return format == RatingFormat::movielens_dat ? "movielens_dat" : "tsv_triples";
}

SplitProtocol parse_split_protocol(const std::string& name) {
    if (name == "per_user") return SplitProtocol::per_user;
    if (name == "global") return SplitProtocol::global;
    throw ContractError("unknown split protocol '" + name + "'");
}

std::string to_string(SplitProtocol protocol) {
    return protocol == SplitProtocol::per_user ? "per_user" : "global";
}

RatingMatrix parse_ratings(std::istream& in, RatingFormat format) {
    IdMap users, items;
    std::vector<Rating> entries;
    std::unordered_set<std::uint64_t> seen;
    std::string line;
    std::size_t line_no = 0;
    const std::string_view sep = format == RatingFormat::movielens_dat ? "::" : "\t";

    while (std::getline(in, line)) {
        ++line_no;
        std::string_view view(line);
        if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
        if (view.empty()) continue;
        if (format == RatingFormat::tsv_triples && view.front() == '#') continue;

        const auto fields = split_fields(view, sep);
        const bool ok_arity = format == RatingFormat::movielens_dat
                                  ? fields.size() == 4
                                  : (fields.size() == 3 || fields.size() == 4);
        if (!ok_arity) {
            throw ParseError(line_no, "expected " +
                                          std::string(format == RatingFormat::movielens_dat
                                                          ? "UserID::MovieID::Rating::Timestamp"
                                                          : "user<TAB>item<TAB>value[<TAB>timestamp]"));
        }
        if (fields[0].empty() || fields[1].empty()) throw ParseError(line_no, "empty id");

        double raw = 0.0;
        if (!parse_number(fields[2], raw)) throw ParseError(line_no, "rating is not a number");
        if (raw != std::floor(raw) || raw < 0.0 || raw > 5.0) {
            throw RangeError("line " + std::to_string(line_no) + ": rating outside {0..5}");
        }
        Rating e;
        if (fields.size() == 4) {
            std::int64_t ts = 0;
            if (!parse_number(fields[3], ts)) throw ParseError(line_no, "bad timestamp");
            e.timestamp = ts;
        }
        // ids are assigned even for zero ratings so densification follows the file
        e.user = users.get(fields[0]);
        e.item = items.get(fields[1]);
        e.value = static_cast<std::uint8_t>(raw);
        if (!seen.insert((std::uint64_t(e.user) << 32) | e.item).second) {
            throw ParseError(line_no, "duplicate (user, item) pair");
        }
        if (e.value != 0) entries.push_back(e);
    }
    return RatingMatrix(users.size(), items.size(), std::move(entries));
}

RatingMatrix load_ratings(const std::filesystem::path& path, RatingFormat format) {
    auto in = open_in(path);
    return parse_ratings(in, format);
}

DatasetStats id_range_stats(const std::filesystem::path& path, RatingFormat format) {
    auto in = open_in(path);
    const std::string_view sep = format == RatingFormat::movielens_dat ? "::" : "\t";
    DatasetStats out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view view(line);
        if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
        if (view.empty() || view.front() == '#') continue;
        const auto fields = split_fields(view, sep);
        std::size_t user = 0, item = 0;
        double value = 0.0;
        if (fields.size() < 3 || !parse_number(fields[0], user) || !parse_number(fields[1], item) ||
            !parse_number(fields[2], value)) {
            throw ParseError(line_no, "id range needs numeric ids and ratings");
        }
        out.users = std::max(out.users, user);
        out.items = std::max(out.items, item);
        out.ratings += value != 0.0;
    }
    if (out.users > 0 && out.items > 0) {
        out.density = static_cast<double>(out.ratings) / (static_cast<double>(out.users) * out.items);
    }
    return out;
}

RatingMatrix filter_min_interactions(const RatingMatrix& r, std::size_t min_user,
                                     std::size_t min_item) {
    if (min_user == 0 && min_item == 0) return r;

    std::vector<bool> keep_user(r.num_users(), true), keep_item(r.num_items(), true);
    bool changed = true;
    while (changed) {
        changed = false;
        std::vector<std::size_t> uc(r.num_users(), 0), ic(r.num_items(), 0);
        for (const Rating& e : r.entries()) {
            if (keep_user[e.user] && keep_item[e.item]) {
                ++uc[e.user];
                ++ic[e.item];
            }
        }
        for (std::size_t u = 0; u < uc.size(); ++u) {
            if (keep_user[u] && uc[u] < min_user) {
                keep_user[u] = false;
                changed = true;
            }
        }
        for (std::size_t i = 0; i < ic.size(); ++i) {
            if (keep_item[i] && ic[i] < min_item) {
                keep_item[i] = false;
                changed = true;
            }
        }
    }
    // entities with no surviving entries are dropped too
    std::vector<bool> has_user(r.num_users(), false), has_item(r.num_items(), false);
    for (const Rating& e : r.entries()) {
        if (keep_user[e.user] && keep_item[e.item]) {
            has_user[e.user] = true;
            has_item[e.item] = true;
        }
    }
    RatingMatrix out = compact(r, has_user, has_item);
    if (out.empty()) throw EmptyDatasetError("filtering removed every rating");
    return out;
}

SimilarityMatrix derive_similarity(const RatingMatrix& r, int threshold) {
    if (threshold < 0 || threshold > 5) throw ContractError("similarity threshold must be in [0,5]");
    std::vector<std::pair<Index, Index>> positives;
    for (const Rating& e : r.entries()) {
        if (e.value > threshold) positives.emplace_back(e.user, e.item);
    }
    return SimilarityMatrix(r.num_users(), r.num_items(), std::move(positives));
}

namespace {

std::size_t train_count(std::size_t n, double ratio) {
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

void check_ratio(double ratio) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ContractError("train_ratio must be in (0,1)");
}

}  // namespace

SplitPair split_per_user(const RatingMatrix& r, double train_ratio, std::uint64_t seed) {
    check_ratio(train_ratio);
    Rng rng(seed);
    std::vector<Rating> train, test;
    for (Index u = 0; u < r.num_users(); ++u) {
        std::vector<Rating> row(r.user_row(u).begin(), r.user_row(u).end());
        for (Rating& e : row) e.timestamp.reset();
        rng.shuffle(std::span(row));
        std::size_t n_train = train_count(row.size(), train_ratio);
        if (row.size() >= 2) n_train = std::max<std::size_t>(n_train, 1);
        if (row.size() == 1) n_train = 1;
        train.insert(train.end(), row.begin(), row.begin() + n_train);
        test.insert(test.end(), row.begin() + n_train, row.end());
    }
    return SplitPair{RatingMatrix(r.num_users(), r.num_items(), std::move(train)),
                     RatingMatrix(r.num_users(), r.num_items(), std::move(test)), seed,
                     train_ratio, SplitProtocol::per_user};
}

SplitPair split_global(const RatingMatrix& r, double train_ratio, std::uint64_t seed) {
    check_ratio(train_ratio);
    Rng rng(seed);
    std::vector<Rating> all(r.entries().begin(), r.entries().end());
    for (Rating& e : all) e.timestamp.reset();
    rng.shuffle(std::span(all));
    const std::size_t n_train = train_count(all.size(), train_ratio);
    std::vector<Rating> train(all.begin(), all.begin() + n_train);
    std::vector<Rating> test(all.begin() + n_train, all.end());
    return SplitPair{RatingMatrix(r.num_users(), r.num_items(), std::move(train)),
                     RatingMatrix(r.num_users(), r.num_items(), std::move(test)), seed,
                     train_ratio, SplitProtocol::global};
}

SplitPair split(const RatingMatrix& r, SplitProtocol protocol, double train_ratio,
                std::uint64_t seed) {
    return protocol == SplitProtocol::per_user ? split_per_user(r, train_ratio, seed)
                                               : split_global(r, train_ratio, seed);
}

RatingMatrix subsample_users(const RatingMatrix& r, std::size_t count, std::uint64_t seed) {
    if (count >= r.num_users()) return r;
    std::vector<Index> order(r.num_users());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(std::span(order));
    std::vector<bool> keep_user(r.num_users(), false), keep_item(r.num_items(), false);
    for (std::size_t k = 0; k < count; ++k) keep_user[order[k]] = true;
    for (const Rating& e : r.entries()) {
        if (keep_user[e.user]) keep_item[e.item] = true;
    }
    return compact(r, keep_user, keep_item);
}

DatasetStats stats(const RatingMatrix& r) {
    return DatasetStats{r.num_users(), r.num_items(), r.size(), r.density()};
}

void save_split(const std::filesystem::path& path, const SplitPair& split) {
    auto out = open_out(path);
    out << "# hashrec-split users=" << split.train.num_users() << " items=" << split.train.num_items()
        << " seed=" << split.seed << " protocol=" << to_string(split.protocol) << '\n';
    out << "# train_ratio " << split.train_ratio << '\n';
    for (const auto* fold : {&split.train, &split.test}) {
        const char* name = fold == &split.train ? "train" : "test";
        for (const Rating& e : fold->entries()) {
            out << e.user << '\t' << e.item << '\t' << int(e.value) << '\t' << name << '\n';
        }
    }
    if (!out) throw IoError("write failed for " + path.string());
}

SplitPair load_split(const std::filesystem::path& path) {
    auto in = open_in(path);
    std::string header;
    if (!std::getline(in, header) || header.rfind("# hashrec-split", 0) != 0) {
        throw ParseError(1, "not a split manifest: " + path.string());
    }
    const std::size_t users = header_value(header, "users");
    const std::size_t items = header_value(header, "items");
    SplitPair out;
    out.seed = header_value(header, "seed");
    out.protocol = header.find("protocol=global") != std::string::npos ? SplitProtocol::global
                                                                         : SplitProtocol::per_user;
    std::vector<Rating> train, test;
    std::string line;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.rfind("# train_ratio ", 0) == 0) {
            out.train_ratio = std::stod(line.substr(14));
            continue;
        }
        if (line.empty() || line[0] == '#') continue;
        const auto f = split_fields(line, "\t");
        Rating e;
        unsigned value = 0;
        if (f.size() != 4 || !parse_number(f[0], e.user) || !parse_number(f[1], e.item) ||
            !parse_number(f[2], value)) {
            throw ParseError(line_no, "expected user<TAB>item<TAB>value<TAB>fold");
        }
        e.value = static_cast<std::uint8_t>(value);
        if (f[3] == "train") {
            train.push_back(e);
        } else if (f[3] == "test") {
            test.push_back(e);
        } else {
            throw ParseError(line_no, "fold must be train or test");
        }
    }
    out.train = RatingMatrix(users, items, std::move(train));
    out.test = RatingMatrix(users, items, std::move(test));
    return out;
}

void save_similarity(const std::filesystem::path& path, const SimilarityMatrix& s) {
    auto out = open_out(path);
    out << "# hashrec-similarity users=" << s.num_users() << " items=" << s.num_items() << '\n';
    for (Index u = 0; u < s.num_users(); ++u) {
        for (Index i : s.positives_of(u)) out << u << '\t' << i << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

SimilarityMatrix load_similarity(const std::filesystem::path& path) {
    auto in = open_in(path);
    std::string header;
    if (!std::getline(in, header) || header.rfind("# hashrec-similarity", 0) != 0) {
        throw ParseError(1, "not a similarity file: " + path.string());
    }
    const std::size_t users = header_value(header, "users");
    const std::size_t items = header_value(header, "items");
    std::vector<std::pair<Index, Index>> positives;
    std::string line;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto f = split_fields(line, "\t");
        Index u = 0, i = 0;
        if (f.size() != 2 || !parse_number(f[0], u) || !parse_number(f[1], i)) {
            throw ParseError(line_no, "expected user<TAB>item");
        }
        positives.emplace_back(u, i);
    }
    return SimilarityMatrix(users, items, std::move(positives));
}

RatingMatrix synthesize_ratings(const SyntheticConfig& cfg) {
    Rng rng(cfg.seed);
    const std::size_t d = cfg.latent_dim;
    std::vector<double> user_f(cfg.users * d), item_f(cfg.items * d);
    for (double& v : user_f) v = rng.normal();
    for (double& v : item_f) v = rng.normal();
    std::vector<double> user_bias(cfg.users), item_bias(cfg.items);
    for (double& v : user_bias) v = 0.3 * rng.normal();
    for (double& v : item_bias) v = 0.4 * rng.normal();

    // popularity by a shuffled power-law rank
    std::vector<std::size_t> rank(cfg.items);
    std::iota(rank.begin(), rank.end(), 0);
    rng.shuffle(std::span(rank));
    std::vector<double> log_pop(cfg.items);
    for (std::size_t i = 0; i < cfg.items; ++i) {
        log_pop[i] = -cfg.popularity_exponent * std::log(static_cast<double>(rank[i] + 1));
    }

    // rating cut points on the standardized score, roughly 6/11/26/35/22 %
    const double cuts[4] = {-1.55, -0.9, -0.17, 0.77};
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    const std::size_t cap = std::max<std::size_t>(cfg.min_per_user, cfg.items / 2);

    std::vector<Rating> entries;
    std::vector<std::pair<double, Index>> keys(cfg.items);
    std::vector<double> affinity(cfg.items);
    for (std::size_t u = 0; u < cfg.users; ++u) {
        const double extra = -std::log(1.0 - rng.uniform()) *
                             std::max(0.0, cfg.mean_per_user - double(cfg.min_per_user));
        const std::size_t n_u = std::min(cap, cfg.min_per_user + static_cast<std::size_t>(extra));
        for (std::size_t i = 0; i < cfg.items; ++i) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += user_f[u * d + k] * item_f[i * d + k];
            affinity[i] = dot * scale;
            // weighted sampling without replacement via exponential keys
            const double weight_log = log_pop[i] + 0.8 * affinity[i];
            const double e = -std::log(1.0 - rng.uniform());
            keys[i] = {std::log(e) - weight_log, static_cast<Index>(i)};
        }
        std::partial_sort(keys.begin(), keys.begin() + n_u, keys.end());
        for (std::size_t k = 0; k < n_u; ++k) {
            const Index i = keys[k].second;
            const double score = (affinity[i] + user_bias[u] + item_bias[i]) / 1.15 +
                                 cfg.noise * rng.normal();
            std::uint8_t value = 1;
            for (double c : cuts) value += score > c ? 1 : 0;
            Rating e;
            e.user = static_cast<Index>(u);
            e.item = i;
            e.value = value;
            e.timestamp = 978300000 + static_cast<std::int64_t>(k);
            entries.push_back(e);
        }
    }
    return RatingMatrix(cfg.users, cfg.items, std::move(entries));
}

void save_movielens_dat(const std::filesystem::path& path, const RatingMatrix& r) {
    auto out = open_out(path);
    for (const Rating& e : r.entries()) {
        out << (e.user + 1) << "::" << (e.item + 1) << "::" << int(e.value)
            << "::" << e.timestamp.value_or(0) << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace hashrec
