#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>
#include <vector>

#include "hashrec/binarize.hpp"
#include "hashrec/errors.hpp"
#include "hashrec/eval.hpp"
#include "hashrec/rng.hpp"

using namespace hashrec;
namespace fs = std::filesystem;

namespace {

double oracle_ndcg(const std::vector<Index>& ranked, const std::set<Index>& relevant, std::size_t k) {
    double dcg = 0.0, idcg = 0.0;
    for (std::size_t i = 1; i <= k; ++i) {
        if (i <= ranked.size() && relevant.count(ranked[i - 1])) dcg += 1.0 / std::log2(double(i) + 1.0);
        if (i <= relevant.size()) idcg += 1.0 / std::log2(double(i) + 1.0);
    }
    return dcg / idcg;
}

double oracle_recall(const std::vector<Index>& ranked, const std::set<Index>& relevant, std::size_t k) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) hits += relevant.count(ranked[i]);
    return double(hits) / double(std::min(k, relevant.size()));
}

std::vector<Index> sorted_of(const std::set<Index>& s) { return {s.begin(), s.end()}; }

// Random split over a users x items universe plus the test similarity.
struct World {
    SplitPair split;
    SimilarityMatrix sim_test;
};

World random_world(std::size_t users, std::size_t items, Rng& rng) {
    std::vector<Rating> train, test;
    for (std::size_t u = 0; u < users; ++u)
        for (std::size_t i = 0; i < items; ++i) {
            const double p = rng.uniform();
            const auto value = std::uint8_t(1 + rng.below(5));
            if (p < 0.25) train.push_back({Index(u), Index(i), value, {}});
            else if (p < 0.35) test.push_back({Index(u), Index(i), value, {}});
        }
    World w;
    w.split.train = RatingMatrix(users, items, std::move(train));
    w.split.test = RatingMatrix(users, items, std::move(test));
    w.sim_test = derive_similarity(w.split.test, 3);
    return w;
}

DenseMatrix random_dense(std::size_t r, std::size_t c, Rng& rng) {
    DenseMatrix m(r, c);
    for (double& v : m.values()) v = rng.uniform(-1.0, 1.0);
    return m;
}

}  // namespace

TEST_CASE("ndcg examples") {
    const std::vector<Index> ranked{7, 3, 9};
    CHECK(ndcg_at_k(ranked, std::vector<Index>{7, 9}, 3) ==
          doctest::Approx((1.0 + 0.5) / (1.0 + 1.0 / std::log2(3.0))).epsilon(1e-12));
    CHECK(ndcg_at_k(ranked, std::vector<Index>{7, 9}, 3) == doctest::Approx(0.9197).epsilon(1e-4));
    CHECK(ndcg_at_k(ranked, std::vector<Index>{3, 7, 9, 11}, 3) == 1.0);
    CHECK(ndcg_at_k(ranked, std::vector<Index>{1, 2}, 2) == 0.0);
    CHECK_THROWS_AS(ndcg_at_k(ranked, std::vector<Index>{}, 2), ContractError);
    CHECK_THROWS_AS(ndcg_at_k(ranked, std::vector<Index>{7}, 0), ContractError);
}

TEST_CASE("recall examples") {
    std::vector<Index> relevant(10);
    std::iota(relevant.begin(), relevant.end(), 100);
    CHECK(recall_at_k(std::vector<Index>{100, 1, 101, 2, 102, 3}, relevant, 6) == doctest::Approx(0.5));
    CHECK(recall_at_k(std::vector<Index>{100, 1, 101, 2, 102, 3}, relevant, 6, RecallNorm::relevant) ==
          doctest::Approx(0.3));
    CHECK(recall_at_k(std::vector<Index>{4, 1, 5, 0, 2, 3}, std::vector<Index>{0, 5}, 6) == 1.0);
    CHECK(recall_at_k(std::vector<Index>{0, 1}, std::vector<Index>{0, 1}, 2) == 1.0);
}

TEST_CASE("metrics against the definition") {
    Rng rng(1);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 5 + rng.below(40);
        std::vector<Index> ranked(n);
        std::iota(ranked.begin(), ranked.end(), 0);
        for (std::size_t i = n; i > 1; --i) std::swap(ranked[i - 1], ranked[rng.below(i)]);
        ranked.resize(1 + rng.below(n));
        std::set<Index> relevant;
        const std::size_t nr = 1 + rng.below(n);
        while (relevant.size() < nr) relevant.insert(Index(rng.below(n)));
        const auto rel = sorted_of(relevant);
        for (std::size_t k = 1; k <= 12; ++k) {
            const double nd = ndcg_at_k(ranked, rel, k), rc = recall_at_k(ranked, rel, k);
            CHECK(std::abs(nd - oracle_ndcg(ranked, relevant, k)) <= 1e-12);
            CHECK(std::abs(rc - oracle_recall(ranked, relevant, k)) <= 1e-12);
            CHECK(nd >= 0.0);
            CHECK(nd <= 1.0 + 1e-15);
            CHECK(rc <= 1.0);
        }
        // relevant items first is ideal
        std::vector<Index> ideal = rel;
        for (Index i : ranked)
            if (!relevant.count(i)) ideal.push_back(i);
        for (std::size_t k = 1; k <= 12; ++k) CHECK(ndcg_at_k(ideal, rel, k) == doctest::Approx(1.0).epsilon(1e-15));
    }
}

TEST_CASE("graded ndcg uses ratings as gains") {
    const std::vector<Index> relevant{1, 2};
    const std::vector<double> gains{5.0, 4.0};
    CHECK(graded_ndcg_at_k(std::vector<Index>{1, 2}, relevant, gains, 2) == doctest::Approx(1.0));
    const double swapped = (4.0 + 5.0 / std::log2(3.0)) / (5.0 + 4.0 / std::log2(3.0));
    CHECK(graded_ndcg_at_k(std::vector<Index>{2, 1}, relevant, gains, 2) == doctest::Approx(swapped));
}

TEST_CASE("per-user scores match a single-user oracle") {
    Rng rng(2);
    const World w = random_world(20, 30, rng);
    const DenseMatrix uf = random_dense(20, 6, rng), itf = random_dense(30, 6, rng);
    const CodeSet codes = make_codes(ModelKind::ccsr, Variant::C, uf, itf, 1.0);
    const std::vector<std::size_t> ks{2, 6, 10};
    const MetricsReport rep = evaluate_codes(codes, w.split, w.sim_test, ks);

    std::size_t pos = 0, skipped = 0;
    for (Index u = 0; u < 20; ++u) {
        const auto rel_span = w.sim_test.positives_of(u);
        if (rel_span.empty()) {
            ++skipped;
            continue;
        }
        std::set<Index> relevant(rel_span.begin(), rel_span.end());
        std::vector<std::pair<double, Index>> scored;
        for (Index i = 0; i < 30; ++i) {
            const auto v = w.split.train.value(u, i);
            if (v > 3) continue;  // training positive
            double s = 0.0;
            for (std::size_t c = 0; c < 6; ++c) s += uf(u, c) * itf(i, c);
            scored.push_back({-s, i});
        }
        std::sort(scored.begin(), scored.end());
        std::vector<Index> ranked;
        for (const auto& [s, i] : scored) ranked.push_back(i);
        REQUIRE(pos < rep.users.size());
        CHECK(rep.users[pos] == u);
        for (std::size_t q = 0; q < ks.size(); ++q) {
            CHECK(std::abs(rep.user_ndcg[q][pos] - oracle_ndcg(ranked, relevant, ks[q])) <= 1e-12);
            CHECK(std::abs(rep.user_recall[q][pos] - oracle_recall(ranked, relevant, ks[q])) <= 1e-12);
        }
        ++pos;
    }
    CHECK(pos == rep.users.size());
    CHECK(skipped == rep.skipped_users);
    for (std::size_t q = 0; q < ks.size(); ++q) {
        const double mean = std::accumulate(rep.user_ndcg[q].begin(), rep.user_ndcg[q].end(), 0.0) / double(pos);
        CHECK(std::abs(rep.ndcg(ks[q]) - mean) <= 1e-12);
    }
}

TEST_CASE("excluding every training item is optional") {
    Rng rng(3);
    const World w = random_world(10, 15, rng);
    const DenseMatrix uf = random_dense(10, 4, rng), itf = random_dense(15, 4, rng);
    const CodeSet codes = make_codes(ModelKind::ccsr, Variant::C, uf, itf, 1.0);
    std::vector<std::pair<Index, std::vector<Index>>> seen;
    const Ranker spy = [&](Index u, std::span<const Index> exclude, std::size_t k) {
        seen.push_back({u, {exclude.begin(), exclude.end()}});
        return std::vector<Index>(std::min<std::size_t>(k, 1), 0);
    };
    const std::vector<std::size_t> ks{2};
    EvalOptions all;
    all.exclude_all_training = true;
    evaluate_rankings(spy, w.split, w.sim_test, ks, all);
    for (const auto& [u, ex] : seen) CHECK(ex.size() == w.split.train.user_row(u).size());
    seen.clear();
    evaluate_rankings(spy, w.split, w.sim_test, ks);
    for (const auto& [u, ex] : seen)
        for (Index i : ex) CHECK(w.split.train.value(u, i) > 3);
}

TEST_CASE("a model that puts each user next to its relevant item scores 1") {
    const std::size_t users = 12, items = 30, bits = 8;
    std::vector<Rating> test;
    std::vector<Index> target(users);
    for (std::size_t u = 0; u < users; ++u) {
        target[u] = Index((7 * u + 3) % items);
        test.push_back({Index(u), target[u], 5, {}});
    }
    SplitPair split;
    split.train = RatingMatrix(users, items, {});
    split.test = RatingMatrix(users, items, test);
    const SimilarityMatrix sim = derive_similarity(split.test, 3);
    DenseMatrix itf(items, bits), uf(users, bits);
    for (std::size_t i = 0; i < items; ++i)
        for (std::size_t b = 0; b < bits; ++b) itf(i, b) = (i >> b) & 1 ? 1.0 : -1.0;
    for (std::size_t u = 0; u < users; ++u)
        for (std::size_t b = 0; b < bits; ++b) uf(u, b) = itf(target[u], b);
    const std::vector<std::size_t> ks{2, 6, 10};
    for (Variant v : {Variant::S, Variant::C}) {
        const MetricsReport rep = evaluate_codes(make_codes(ModelKind::ccsr, v, uf, itf, 1.0), split, sim, ks);
        for (std::size_t k : ks) {
            CHECK(rep.ndcg(k) == 1.0);
            CHECK(rep.recall(k) == 1.0);
        }
    }
}

TEST_CASE("mode must match the variant") {
    Rng rng(4);
    const World w = random_world(6, 8, rng);
    TrainConfig cfg;
    cfg.code_dim = 3;
    cfg.epochs = 1;
    const TrainedModel m = train_cf(w.split.train, cfg);
    const std::vector<std::size_t> ks{2};
    CHECK_THROWS_AS(evaluate_model(m, Variant::C, w.split, w.sim_test, ks, EvalMode::hamming), ContractError);
    CHECK_THROWS_AS(evaluate_model(m, Variant::S, w.split, w.sim_test, ks, EvalMode::continuous), ContractError);
    CHECK_NOTHROW(evaluate_model(m, Variant::S, w.split, w.sim_test, ks, EvalMode::hamming));
    CHECK(natural_mode(Variant::ST) == EvalMode::continuous);
    CHECK(natural_mode(Variant::SST) == EvalMode::hamming);
}

TEST_CASE("cfcodereg codes use the median threshold") {
    DenseMatrix uf(4, 1), itf(3, 1);
    for (std::size_t r = 0; r < 4; ++r) uf(r, 0) = 0.5 + r;  // all positive
    for (std::size_t r = 0; r < 3; ++r) itf(r, 0) = 0.1 * r;
    const CodeSet c = make_codes(ModelKind::cfcodereg, Variant::S, uf, itf, 1.0);
    CHECK(c.user_codes == median_binarize(uf));
    CHECK(!c.user_codes.bit(0, 0));
    const CodeSet s = make_codes(ModelKind::ccsr, Variant::S, uf, itf, 1.0);
    CHECK(s.user_codes == sign_binarize(uf));
}

TEST_CASE("saturated codes have no st/sst gap") {
    Rng rng(5);
    const World w = random_world(25, 40, rng);
    const std::vector<std::size_t> ks{2, 6, 10};
    const DenseMatrix uf = sign_binarize(random_dense(25, 12, rng)).unpack();
    const DenseMatrix itf = sign_binarize(random_dense(40, 12, rng)).unpack();
    const GapReport g = st_sst_gap("toy", uf, itf, 200.0, w.split, w.sim_test, ks);
    for (const GapEntry& e : g.entries) {
        CHECK(e.ndcg_relative_drop == 0.0);
        CHECK(e.recall_relative_drop == 0.0);
    }
}

TEST_CASE("near-saturated codes have a negligible gap") {
    // items carry thermometer codes and every user the all-ones code, so
    // Hamming distances are distinct and perturbations of size < 0.01 cannot
    // reorder them
    Rng rng(6);
    const std::size_t bits = 40, items = 40, users = 30;
    const World w = random_world(users, items, rng);
    const auto near = [&](double sign) { return std::atanh(sign * rng.uniform(0.99, 0.9999)); };
    DenseMatrix uf(users, bits), itf(items, bits);
    for (double& v : uf.values()) v = near(1.0);
    for (std::size_t i = 0; i < items; ++i)
        for (std::size_t b = 0; b < bits; ++b) itf(i, b) = near(b < i ? 1.0 : -1.0);
    const std::vector<std::size_t> ks{2, 6, 10};
    const GapReport g = st_sst_gap("toy", uf, itf, 1.0, w.split, w.sim_test, ks);
    REQUIRE(g.entries.size() == 3);
    for (const GapEntry& e : g.entries) {
        CHECK(std::abs(e.ndcg_relative_drop) < 1e-3);
        CHECK(std::abs(e.recall_relative_drop) < 1e-3);
    }
}

TEST_CASE("chi-squared helpers") {
    CHECK(chi2_critical_05(3) == doctest::Approx(7.815).epsilon(1e-4));
    CHECK(chi2_critical_05(1) == doctest::Approx(3.841).epsilon(1e-4));
    // hand computation: rows {10,20},{20,10}; expected 15 each -> 4 * 25/15
    const auto [stat, dof] = pearson_chi2({{10, 20}, {20, 10}});
    CHECK(stat == doctest::Approx(100.0 / 15.0));
    CHECK(dof == 1);
    const auto [s2, d2] = pearson_chi2({{5, 0, 5}, {5, 0, 5}});
    CHECK(s2 == 0.0);
    CHECK(d2 == 1);
}

TEST_CASE("group analysis") {
    // users 0..99 rate 30 items, users 100..199 rate 10; values cycle 1..5
    const std::size_t users = 200, items = 60;
    std::vector<Rating> entries;
    for (std::size_t u = 0; u < users; ++u) {
        const std::size_t count = u < 100 ? 30 : 10;
        for (std::size_t j = 0; j < count; ++j)
            entries.push_back({Index(u), Index(j), std::uint8_t(1 + (u + j) % 5), {}});
    }
    const RatingMatrix r(users, items, entries);
    std::vector<Index> ids(users);
    std::iota(ids.begin(), ids.end(), 0);

    std::vector<double> a(users), b(users, 0.5);
    for (std::size_t u = 0; u < users; ++u) a[u] = u < 100 ? 0.9 : 0.1;
    const auto groups = chi_square_group_analysis(a, b, ids, r);
    REQUIRE(groups.size() == 3);
    CHECK(groups[0].characteristic == "num_ratings");
    CHECK(groups[0].better == 100);
    CHECK(groups[0].worse == 100);
    CHECK(groups[0].chi2 == doctest::Approx(200.0));
    CHECK(groups[0].significant);
    CHECK(groups[1].characteristic == "avg_rating");
    CHECK(groups[1].chi2 < 7.815);
    CHECK(!groups[1].significant);

    // swapping the group labels leaves the statistic alone
    const auto swapped = chi_square_group_analysis(b, a, ids, r);
    for (std::size_t g = 0; g < 3; ++g) CHECK(swapped[g].chi2 == doctest::Approx(groups[g].chi2));

    // alternate users, identical characteristics within each pair
    std::vector<Rating> paired;
    for (std::size_t u = 0; u < users; ++u) {
        const std::size_t count = 5 + (u / 2) % 20;
        for (std::size_t j = 0; j < count; ++j)
            paired.push_back({Index(u), Index(j), std::uint8_t(1 + (u / 2 + j) % 5), {}});
    }
    const RatingMatrix p(users, items, paired);
    for (std::size_t u = 0; u < users; ++u) a[u] = u % 2 ? 0.1 : 0.9;
    for (const GroupAnalysis& g : chi_square_group_analysis(a, b, ids, p)) {
        CHECK(g.chi2 == doctest::Approx(0.0));
        CHECK(!g.significant);
    }

    CHECK(chi_square_group_analysis(b, b, ids, r).empty());
}

TEST_CASE("metric csv round-trips and renders") {
    Rng rng(7);
    const World w = random_world(15, 20, rng);
    const std::vector<std::size_t> ks{2, 6};
    std::vector<MetricsReport> reports;
    reports.push_back(evaluate_baseline(ModelKind::top, w.split, w.sim_test, ks, 1));
    reports.back().model = "top";
    MetricsReport m = evaluate_codes(
        make_codes(ModelKind::ccsr, Variant::S, random_dense(15, 5, rng), random_dense(20, 5, rng), 1.0), w.split,
        w.sim_test, ks);
    m.model = "ccsr";
    m.variant = "S";
    m.code_bits = 5;
    reports.push_back(m);

    const fs::path p = fs::temp_directory_path() / "hashrec_eval_metrics.csv";
    write_metrics_csv(p, reports, "manifest.json");
    const std::vector<MetricRow> rows = read_metrics_csv(p);
    CHECK(rows.size() == 2 * ks.size() * 2);
    for (const MetricRow& row : rows) {
        const MetricsReport& src = row.model == "top" ? reports[0] : reports[1];
        const double expected = row.metric == "ndcg" ? src.ndcg(row.k) : src.recall(row.k);
        CHECK(std::abs(row.value - expected) < 1e-9);
    }
    const std::string table = render_table(rows, "ndcg");
    CHECK(table.find("ccsr-S") != std::string::npos);
    CHECK(table.find("top") != std::string::npos);
    fs::remove(p);
}
