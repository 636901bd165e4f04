#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "hashrec/dataset.hpp"
#include "hashrec/errors.hpp"
#include "hashrec/rng.hpp"

using namespace hashrec;
namespace fs = std::filesystem;

namespace {

RatingMatrix parse(const std::string& text, RatingFormat format = RatingFormat::tsv_triples) {
    std::istringstream in(text);
    return parse_ratings(in, format);
}

RatingMatrix random_matrix(std::size_t m, std::size_t n, double p, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Rating> entries;
    for (Index u = 0; u < m; ++u) {
        for (Index i = 0; i < n; ++i) {
            if (rng.uniform() < p) entries.push_back({u, i, static_cast<std::uint8_t>(1 + rng.below(5)), {}});
        }
    }
    return RatingMatrix(m, n, std::move(entries));
}

using Triple = std::tuple<Index, Index, int>;

std::multiset<Triple> triples(const RatingMatrix& r) {
    std::multiset<Triple> out;
    for (const Rating& e : r.entries()) out.insert({e.user, e.item, e.value});
    return out;
}

// Brute-force fixed point over (raw user, raw item) pairs.
std::set<std::pair<Index, Index>> naive_filter(const RatingMatrix& r, std::size_t mu, std::size_t mi) {
    std::set<std::pair<Index, Index>> live;
    for (const Rating& e : r.entries()) live.insert({e.user, e.item});
    while (true) {
        std::map<Index, std::size_t> uc, ic;
        for (auto [u, i] : live) ++uc[u], ++ic[i];
        std::set<std::pair<Index, Index>> next;
        for (auto [u, i] : live) {
            if (uc[u] >= mu && ic[i] >= mi) next.insert({u, i});
        }
        if (next == live) return live;
        live = std::move(next);
    }
}

fs::path temp_file(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "hashrec_test_dataset";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("load re-indexes ids in first-appearance order") {
    const RatingMatrix r = parse("7\t1\t4\n7\t2\t3\n9\t1\t5\n");
    CHECK(r.num_users() == 2);
    CHECK(r.num_items() == 2);
    CHECK(r.size() == 3);
    CHECK(r.value(0, 0) == 4);
    CHECK(r.value(0, 1) == 3);
    CHECK(r.value(1, 0) == 5);
}

TEST_CASE("empty input gives an empty matrix") {
    const RatingMatrix r = parse("");
    CHECK(r.num_users() == 0);
    CHECK(r.num_items() == 0);
    CHECK(r.empty());
}

TEST_CASE("movielens format and comment lines") {
    const RatingMatrix r = parse("1::1193::5::978300760\n1::661::3::978302109\n2::1193::4::978298413\n",
                                 RatingFormat::movielens_dat);
    CHECK(r.num_users() == 2);
    CHECK(r.num_items() == 2);
    CHECK(r.user_row(0)[0].timestamp == 978300760);

    const RatingMatrix t = parse("# header\n5\t6\t1\n");
    CHECK(t.size() == 1);
}

TEST_CASE("malformed lines carry their line number") {
    try {
        parse("1\t2\t3\n1\t2\n");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
    try {
        parse("1\t2\t3\n4\t5\t4\n1\t2\t1\n");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);  // duplicate pair
    }
    CHECK_THROWS_AS(parse("1\t2\tx\n"), ParseError);
    CHECK_THROWS_AS(parse("1::2::3\n", RatingFormat::movielens_dat), ParseError);
}

TEST_CASE("ratings outside 0..5 are range errors") {
    CHECK_THROWS_AS(parse("1\t2\t6\n"), RangeError);
    CHECK_THROWS_AS(parse("1\t2\t-1\n"), RangeError);
    const RatingMatrix zero = parse("1\t2\t0\n3\t4\t2\n");
    CHECK(zero.size() == 1);  // 0 is absence and never stored
}

TEST_CASE("missing file is an I/O error naming the path") {
    try {
        load_ratings("/nonexistent/ratings.dat", RatingFormat::movielens_dat);
        FAIL("expected an I/O error");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("/nonexistent/ratings.dat") != std::string::npos);
    }
}

TEST_CASE("matrix constructor enforces invariants") {
    CHECK_THROWS_AS(RatingMatrix(1, 1, {{0, 1, 3, {}}}), ContractError);
    CHECK_THROWS_AS(RatingMatrix(1, 1, {{0, 0, 3, {}}, {0, 0, 4, {}}}), ContractError);
    CHECK_THROWS(RatingMatrix(1, 1, {{0, 0, 0, {}}}));
}

TEST_CASE("filter reaches the brute-force fixed point") {
    // dropping item 2 pushes user 1 below the user threshold
    const RatingMatrix r(3, 3,
                         {{0, 0, 5, {}}, {0, 1, 4, {}}, {1, 0, 3, {}}, {1, 2, 2, {}}, {2, 0, 1, {}}, {2, 1, 2, {}}});
    const RatingMatrix f = filter_min_interactions(r, 2, 2);
    CHECK(f.num_users() == 2);
    CHECK(f.num_items() == 2);
    CHECK(f.size() == 4);

    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const RatingMatrix rr = random_matrix(9, 8, 0.45, seed);
        const std::size_t mu = 1 + seed % 4, mi = 1 + (seed / 4) % 4;
        const auto expected = naive_filter(rr, mu, mi);
        if (expected.empty()) {
            CHECK_THROWS_AS(filter_min_interactions(rr, mu, mi), EmptyDatasetError);
            continue;
        }
        const RatingMatrix got = filter_min_interactions(rr, mu, mi);
        CHECK(got.size() == expected.size());
        for (std::size_t c : got.user_counts()) CHECK(c >= mu);
        for (std::size_t c : got.item_counts()) CHECK(c >= mi);
        CHECK(filter_min_interactions(got, mu, mi) == got);  // idempotent
    }
}

TEST_CASE("filter with zero thresholds is the identity") {
    const RatingMatrix r = random_matrix(6, 7, 0.5, 3);
    CHECK(filter_min_interactions(r, 0, 0) == r);
}

TEST_CASE("similarity thresholds strictly above the cut") {
    const RatingMatrix r(1, 3, {{0, 0, 4, {}}, {0, 1, 3, {}}, {0, 2, 1, {}}});
    const SimilarityMatrix s = derive_similarity(r, 3);
    CHECK(s.contains(0, 0));
    CHECK_FALSE(s.contains(0, 1));
    CHECK(derive_similarity(r, 0).size() == 3);  // implicit case
    CHECK_THROWS_AS(derive_similarity(r, 6), ContractError);

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const RatingMatrix rr = random_matrix(10, 12, 0.4, seed);
        std::size_t count = 0;
        for (const Rating& e : rr.entries()) count += e.value > 3;
        CHECK(derive_similarity(rr, 3).size() == count);
    }
}

TEST_CASE("per-user split sizes and degenerate users") {
    std::vector<Rating> entries;
    for (Index i = 0; i < 10; ++i) entries.push_back({0, i, 4, {}});
    entries.push_back({1, 0, 2, {}});
    entries.push_back({2, 0, 1, {}});
    entries.push_back({2, 1, 1, {}});
    const RatingMatrix r(3, 10, entries);
    const SplitPair sp = split_per_user(r, 0.8, 5);
    CHECK(sp.train.user_row(0).size() == 8);
    CHECK(sp.test.user_row(0).size() == 2);
    CHECK(sp.train.user_row(1).size() == 1);
    CHECK(sp.test.user_row(1).empty());
    CHECK(sp.train.user_row(2).size() == 1);  // floor(1.6) = 1
}

TEST_CASE("splits partition the source and are reproducible") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const RatingMatrix r = random_matrix(12, 15, 0.5, seed);
        for (SplitProtocol p : {SplitProtocol::per_user, SplitProtocol::global}) {
            const SplitPair a = split(r, p, 0.8, seed);
            const SplitPair b = split(r, p, 0.8, seed);
            CHECK(a.train == b.train);
            CHECK(a.test == b.test);
            std::multiset<Triple> joined = triples(a.train);
            for (const Triple& t : triples(a.test)) {
                CHECK(joined.count(t) == 0);
                joined.insert(t);
            }
            CHECK(joined == triples(r));
        }
    }
}

TEST_CASE("global split is exact in count and seed-dependent") {
    std::vector<Rating> entries;
    for (Index u = 0; u < 10; ++u) {
        for (Index i = 0; i < 10; ++i) entries.push_back({u, i, 3, {}});
    }
    const RatingMatrix r(10, 10, entries);
    const SplitPair a = split_global(r, 0.8, 1);
    const SplitPair b = split_global(r, 0.8, 2);
    CHECK(a.train.size() == 80);
    CHECK(a.test.size() == 20);
    CHECK(b.train.size() == 80);
    CHECK_FALSE(a.train == b.train);
}

TEST_CASE("split manifest round-trips exactly") {
    const RatingMatrix r = random_matrix(9, 11, 0.5, 4);
    const SplitPair sp = split_per_user(r, 0.8, 9);
    const fs::path path = temp_file("split.tsv");
    save_split(path, sp);
    const SplitPair back = load_split(path);
    CHECK(back.train == sp.train);
    CHECK(back.test == sp.test);
    CHECK(back.seed == sp.seed);

    const fs::path again = temp_file("split2.tsv");
    save_split(again, split_per_user(r, 0.8, 9));
    std::ifstream f1(path), f2(again);
    const std::string s1((std::istreambuf_iterator<char>(f1)), {});
    const std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);

    const SimilarityMatrix s = derive_similarity(sp.train, 3);
    save_similarity(temp_file("sim.tsv"), s);
    const SimilarityMatrix sb = load_similarity(temp_file("sim.tsv"));
    CHECK(sb.size() == s.size());
    for (Index u = 0; u < s.num_users(); ++u) {
        const auto a = s.positives_of(u);
        const auto b = sb.positives_of(u);
        CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
    }
}

TEST_CASE("movielens writer round-trips through the loader") {
    SyntheticConfig cfg;
    cfg.users = 40;
    cfg.items = 60;
    cfg.mean_per_user = 12;
    cfg.min_per_user = 5;
    const RatingMatrix r = synthesize_ratings(cfg);
    const fs::path path = temp_file("ratings.dat");
    save_movielens_dat(path, r);
    const RatingMatrix back = load_ratings(path, RatingFormat::movielens_dat);
    CHECK(back.size() == r.size());
    CHECK(triples(back).size() == triples(r).size());
    const DatasetStats ids = id_range_stats(path, RatingFormat::movielens_dat);
    CHECK(ids.ratings == r.size());
    CHECK(ids.users <= r.num_users());
}

TEST_CASE("subsample keeps the requested users and densifies") {
    const RatingMatrix r = random_matrix(30, 25, 0.3, 8);
    const RatingMatrix s = subsample_users(r, 10, 1);
    CHECK(s.num_users() == 10);
    for (std::size_t c : s.item_counts()) CHECK(c > 0);
    CHECK(subsample_users(r, 10, 1) == s);
    CHECK(subsample_users(r, 100, 1).num_users() == 30);
}

TEST_CASE("synthetic generator respects its configuration") {
    SyntheticConfig cfg;
    cfg.users = 100;
    cfg.items = 200;
    cfg.mean_per_user = 30;
    cfg.min_per_user = 10;
    const RatingMatrix r = synthesize_ratings(cfg);
    CHECK(r.num_users() == 100);
    for (std::size_t c : r.user_counts()) CHECK(c >= 10);
    for (const Rating& e : r.entries()) CHECK((e.value >= 1 && e.value <= 5));
    CHECK(synthesize_ratings(cfg) == r);
    const DatasetStats st = stats(r);
    CHECK(st.density == doctest::Approx(double(r.size()) / (100.0 * r.num_items())));
}
