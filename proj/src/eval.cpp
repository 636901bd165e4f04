#include "hashrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "hashrec/errors.hpp"
#include "hashrec/index.hpp"

namespace hashrec {

namespace {

bool contains_sorted(std::span<const Index> sorted, Index item) {
    return std::binary_search(sorted.begin(), sorted.end(), item);
}

double discount(std::size_t position) {  // position is 0-based
    return 1.0 / std::log2(static_cast<double>(position) + 2.0);
}

std::string format_value(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10f", v);
    return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

std::size_t position_of(std::span<const std::size_t> ks, std::size_t k) {
    const auto it = std::find(ks.begin(), ks.end(), k);
    if (it == ks.end()) throw ContractError("cutoff k=" + std::to_string(k) + " was not evaluated");
    return static_cast<std::size_t>(it - ks.begin());
}

std::vector<Index> exclusions(const SplitPair& split, Index user, const EvalOptions& options) {
    std::vector<Index> out;
    for (const Rating& e : split.train.user_row(user)) {
        if (options.exclude_all_training || e.value > options.similarity_threshold) out.push_back(e.item);
    }
    return out;  // user rows are sorted by item
}

double quantile(std::vector<double> sorted_values, double p) {
    // linear interpolation between closest ranks
    const double pos = p * static_cast<double>(sorted_values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted_values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted_values[lo] + frac * (sorted_values[hi] - sorted_values[lo]);
}

}  // namespace

std::string to_string(RecallNorm n) {
    return n == RecallNorm::min_k_relevant ? "min_k_relevant" : "relevant";
}

RecallNorm parse_recall_norm(const std::string& name) {
    if (name == "min_k_relevant") return RecallNorm::min_k_relevant;
    if (name == "relevant") return RecallNorm::relevant;
    throw ContractError("unknown recall normalization '" + name + "'");
}

double ndcg_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k) {
    if (k == 0) throw ContractError("ndcg_at_k: k must be at least 1");
    if (relevant.empty()) throw ContractError("ndcg_at_k: no relevant items");
    double dcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
        if (contains_sorted(relevant, ranked[i])) dcg += discount(i);
    }
    double idcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, relevant.size()); ++i) idcg += discount(i);
    return dcg / idcg;
}

double graded_ndcg_at_k(std::span<const Index> ranked, std::span<const Index> relevant,
                        std::span<const double> gains, std::size_t k) {
    if (k == 0) throw ContractError("graded_ndcg_at_k: k must be at least 1");
    if (relevant.empty() || gains.size() != relevant.size()) {
        throw ContractError("graded_ndcg_at_k: relevant items and gains must align");
    }
    double dcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
        const auto it = std::lower_bound(relevant.begin(), relevant.end(), ranked[i]);
        if (it != relevant.end() && *it == ranked[i]) dcg += gains[it - relevant.begin()] * discount(i);
    }
    std::vector<double> ideal(gains.begin(), gains.end());
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    double idcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, ideal.size()); ++i) idcg += ideal[i] * discount(i);
    return idcg > 0.0 ? dcg / idcg : 0.0;
}

double recall_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k,
                   RecallNorm norm) {
    if (k == 0) throw ContractError("recall_at_k: k must be at least 1");
    if (relevant.empty()) throw ContractError("recall_at_k: no relevant items");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) hits += contains_sorted(relevant, ranked[i]);
    const std::size_t denom = norm == RecallNorm::min_k_relevant ? std::min(k, relevant.size()) : relevant.size();
    return static_cast<double>(hits) / static_cast<double>(denom);
}

double MetricsReport::ndcg(std::size_t k) const { return mean_ndcg[position_of(ks, k)]; }
double MetricsReport::recall(std::size_t k) const { return mean_recall[position_of(ks, k)]; }

MetricsReport evaluate_rankings(const Ranker& ranker, const SplitPair& split, const SimilarityMatrix& sim_test,
                                std::span<const std::size_t> ks, const EvalOptions& options) {
    if (ks.empty()) throw ContractError("evaluate: no cutoffs given");
    if (sim_test.num_users() != split.test.num_users() || sim_test.num_items() != split.test.num_items()) {
        throw ContractError("evaluate: test similarity does not match the split");
    }
    const std::size_t k_max = *std::max_element(ks.begin(), ks.end());

    MetricsReport report;
    report.ks.assign(ks.begin(), ks.end());
    report.recall_norm = options.recall_norm;
    report.gain = options.gain;
    report.user_ndcg.resize(ks.size());
    report.user_recall.resize(ks.size());

    for (Index u = 0; u < split.test.num_users(); ++u) {
        const auto relevant = sim_test.positives_of(u);
        if (relevant.empty()) {
            ++report.skipped_users;
            continue;
        }
        const std::vector<Index> exclude = exclusions(split, u, options);
        const std::vector<Index> ranked = ranker(u, exclude, k_max);
        std::vector<double> gains;
        if (options.gain == Gain::graded) {
            for (Index i : relevant) gains.push_back(split.test.value(u, i));
        }
        report.users.push_back(u);
        for (std::size_t q = 0; q < ks.size(); ++q) {
            const double ndcg = options.gain == Gain::graded ? graded_ndcg_at_k(ranked, relevant, gains, ks[q])
                                                             : ndcg_at_k(ranked, relevant, ks[q]);
            report.user_ndcg[q].push_back(ndcg);
            report.user_recall[q].push_back(recall_at_k(ranked, relevant, ks[q], options.recall_norm));
        }
    }

    for (std::size_t q = 0; q < ks.size(); ++q) {
        const double n = static_cast<double>(report.users.size());
        const auto mean = [n](const std::vector<double>& v) {
            return n > 0 ? std::accumulate(v.begin(), v.end(), 0.0) / n : 0.0;
        };
        report.mean_ndcg.push_back(mean(report.user_ndcg[q]));
        report.mean_recall.push_back(mean(report.user_recall[q]));
    }
    return report;
}

EvalMode natural_mode(Variant v) {
    return (v == Variant::S || v == Variant::SST) ? EvalMode::hamming : EvalMode::continuous;
}

CodeSet make_codes(ModelKind kind, Variant variant, const DenseMatrix& user_features,
                   const DenseMatrix& item_features, double alpha) {
    if (user_features.cols() != item_features.cols()) throw ShapeError("make_codes: feature widths differ");
    CodeSet codes;
    codes.variant = variant;
    codes.mode = natural_mode(variant);
    codes.code_bits = user_features.cols();
    switch (variant) {
        case Variant::S:
            if (kind == ModelKind::cfcodereg) {
                codes.user_codes = median_binarize(user_features);
                codes.item_codes = median_binarize(item_features);
            } else {
                codes.user_codes = sign_binarize(user_features);
                codes.item_codes = sign_binarize(item_features);
            }
            break;
        case Variant::SST:
            codes.user_codes = sst_binarize(user_features, alpha);
            codes.item_codes = sst_binarize(item_features, alpha);
            break;
        case Variant::ST:
            codes.user_features = scaled_tanh(user_features, alpha);
            codes.item_features = scaled_tanh(item_features, alpha);
            break;
        case Variant::C:
            codes.user_features = user_features;
            codes.item_features = item_features;
            break;
    }
    return codes;
}

MetricsReport evaluate_codes(const CodeSet& codes, const SplitPair& split, const SimilarityMatrix& sim_test,
                             std::span<const std::size_t> ks, const EvalOptions& options) {
    Ranker ranker;
    std::optional<HammingIndex> index;
    if (codes.mode == EvalMode::hamming) {
        if (codes.user_codes.rows() != split.test.num_users() || codes.item_codes.rows() != split.test.num_items()) {
            throw ContractError("evaluate: code tables do not match the split's entity counts");
        }
        index.emplace(codes.item_codes);
        ranker = [&](Index u, std::span<const Index> exclude, std::size_t k) {
            std::vector<Index> items;
            for (const HammingNeighbor& n : index->query_topk(codes.user_codes.row(u), k, exclude)) {
                items.push_back(n.item);
            }
            return items;
        };
    } else {
        if (codes.user_features.rows() != split.test.num_users() ||
            codes.item_features.rows() != split.test.num_items()) {
            throw ContractError("evaluate: feature tables do not match the split's entity counts");
        }
        ranker = [&](Index u, std::span<const Index> exclude, std::size_t k) {
            std::vector<Index> items;
            for (const ScoredItem& s : continuous_topk(codes.item_features, codes.user_features.row(u), k, exclude)) {
                items.push_back(s.item);
            }
            return items;
        };
    }
    MetricsReport report = evaluate_rankings(ranker, split, sim_test, ks, options);
    report.variant = to_string(codes.variant);
    report.code_bits = codes.code_bits;
    return report;
}

MetricsReport evaluate_model(const TrainedModel& model, Variant variant, const SplitPair& split,
                             const SimilarityMatrix& sim_test, std::span<const std::size_t> ks,
                             EvalMode mode, const EvalOptions& options) {
    if (!model.trained) throw ContractError("evaluate: model has not been trained");
    if (is_baseline(model.kind)) throw ContractError("evaluate: use evaluate_baseline for baselines");
    if (mode != natural_mode(variant)) {
        throw ContractError("evaluate: variant " + to_string(variant) + " cannot be ranked in " +
                            (mode == EvalMode::hamming ? "hamming" : "continuous") + " mode");
    }
    if (uses_tanh_schedule(variant) != uses_tanh_schedule(model.config.binarization)) {
        throw ContractError("evaluate: variant " + to_string(variant) + " does not match a model trained for " +
                            to_string(model.config.binarization));
    }
    const DenseMatrix fu = is_autoencoder(model.kind) ? encode(model, Side::users, split.train)
                                                      : encode(model, Side::users);
    const DenseMatrix fi = is_autoencoder(model.kind) ? encode(model, Side::items, split.train)
                                                      : encode(model, Side::items);
    MetricsReport report = evaluate_codes(make_codes(model.kind, variant, fu, fi, model.final_alpha), split,
                                          sim_test, ks, options);
    report.model = to_string(model.kind);
    return report;
}

MetricsReport evaluate_baseline(ModelKind kind, const SplitPair& split, const SimilarityMatrix& sim_test,
                                std::span<const std::size_t> ks, std::uint64_t seed,
                                const EvalOptions& options) {
    if (!is_baseline(kind)) throw ContractError("evaluate_baseline: not a baseline kind");
    const std::size_t n = split.train.num_items();
    const std::vector<Index> order =
        kind == ModelKind::random ? baseline_random(n, n, seed) : baseline_top(split.train, n);
    Ranker ranker = [&](Index, std::span<const Index> exclude, std::size_t k) {
        std::vector<Index> items;
        for (Index i : order) {
            if (items.size() == k) break;
            if (!contains_sorted(exclude, i)) items.push_back(i);
        }
        return items;
    };
    MetricsReport report = evaluate_rankings(ranker, split, sim_test, ks, options);
    report.model = to_string(kind);
    report.variant = "-";
    report.code_bits = 0;
    return report;
}

GapReport st_sst_gap(const std::string& model, const DenseMatrix& user_features,
                     const DenseMatrix& item_features, double alpha, const SplitPair& split,
                     const SimilarityMatrix& sim_test, std::span<const std::size_t> ks,
                     const EvalOptions& options) {
    const ModelKind kind = ModelKind::ccsr;  // median thresholding never applies to ST/SST
    const MetricsReport st =
        evaluate_codes(make_codes(kind, Variant::ST, user_features, item_features, alpha), split, sim_test, ks, options);
    const MetricsReport sst =
        evaluate_codes(make_codes(kind, Variant::SST, user_features, item_features, alpha), split, sim_test, ks, options);
    GapReport report;
    report.model = model;
    report.code_bits = user_features.cols();
    report.alpha = alpha;
    const auto drop = [](double a, double b) { return a > 0.0 ? (a - b) / a : 0.0; };
    for (std::size_t q = 0; q < ks.size(); ++q) {
        GapEntry e;
        e.k = ks[q];
        e.ndcg_st = st.mean_ndcg[q];
        e.ndcg_sst = sst.mean_ndcg[q];
        e.recall_st = st.mean_recall[q];
        e.recall_sst = sst.mean_recall[q];
        e.ndcg_relative_drop = drop(e.ndcg_st, e.ndcg_sst);
        e.recall_relative_drop = drop(e.recall_st, e.recall_sst);
        report.entries.push_back(e);
    }
    return report;
}

GapReport st_sst_gap(const TrainedModel& model_st, const SplitPair& split, const SimilarityMatrix& sim_test,
                     std::span<const std::size_t> ks, const EvalOptions& options) {
    if (!is_autoencoder(model_st.kind) || !uses_tanh_schedule(model_st.config.binarization)) {
        throw ContractError("st_sst_gap: model was not trained with the scaled tanh schedule");
    }
    const DenseMatrix fu = encode(model_st, Side::users, split.train);
    const DenseMatrix fi = encode(model_st, Side::items, split.train);
    return st_sst_gap(to_string(model_st.kind), fu, fi, model_st.final_alpha, split, sim_test, ks, options);
}

double chi2_critical_05(std::size_t dof) {
    static constexpr double table[] = {0.0,    3.841,  5.991,  7.815,  9.488,  11.070,
                                       12.592, 14.067, 15.507, 16.919, 18.307};
    if (dof == 0 || dof > 10) throw ContractError("chi2 critical value tabulated for 1..10 dof");
    return table[dof];
}

std::pair<double, std::size_t> pearson_chi2(const std::vector<std::vector<double>>& table) {
    if (table.size() != 2 || table[0].size() != table[1].size()) {
        throw ContractError("pearson_chi2 expects a 2 x C table");
    }
    const std::size_t cols = table[0].size();
    std::vector<double> col_tot(cols, 0.0);
    double row_tot[2] = {0.0, 0.0};
    for (std::size_t r = 0; r < 2; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            row_tot[r] += table[r][c];
            col_tot[c] += table[r][c];
        }
    }
    const double total = row_tot[0] + row_tot[1];
    double chi2 = 0.0;
    std::size_t used = 0;
    for (std::size_t c = 0; c < cols; ++c) {
        if (col_tot[c] == 0.0) continue;
        ++used;
        for (std::size_t r = 0; r < 2; ++r) {
            const double expected = row_tot[r] * col_tot[c] / total;
            if (expected > 0.0) chi2 += (table[r][c] - expected) * (table[r][c] - expected) / expected;
        }
    }
    return {chi2, used > 0 ? used - 1 : 0};
}

std::vector<GroupAnalysis> chi_square_group_analysis(std::span<const double> scores_a,
                                                     std::span<const double> scores_b,
                                                     std::span<const Index> users,
                                                     const RatingMatrix& ratings) {
    if (scores_a.size() != scores_b.size() || scores_a.size() != users.size()) {
        throw ContractError("group analysis: score vectors must align with users");
    }
    std::vector<bool> better(users.size());
    std::size_t n_better = 0;
    for (std::size_t k = 0; k < users.size(); ++k) {
        better[k] = scores_a[k] > scores_b[k];
        n_better += better[k];
    }
    if (n_better == 0 || n_better == users.size()) return {};

    std::vector<double> count(users.size()), mean(users.size()), stdev(users.size());
    for (std::size_t k = 0; k < users.size(); ++k) {
        const auto row = ratings.user_row(users[k]);
        count[k] = static_cast<double>(row.size());
        double s = 0.0, s2 = 0.0;
        for (const Rating& e : row) {
            s += e.value;
            s2 += double(e.value) * e.value;
        }
        const double n = std::max<double>(1.0, count[k]);
        mean[k] = s / n;
        stdev[k] = std::sqrt(std::max(0.0, s2 / n - mean[k] * mean[k]));
    }

    std::vector<GroupAnalysis> out;
    const std::pair<const char*, const std::vector<double>*> characteristics[] = {
        {"num_ratings", &count}, {"avg_rating", &mean}, {"std_rating", &stdev}};
    for (const auto& [name, values] : characteristics) {
        std::vector<double> sorted = *values;
        std::sort(sorted.begin(), sorted.end());
        GroupAnalysis g;
        g.characteristic = name;
        g.bin_edges = {quantile(sorted, 0.25), quantile(sorted, 0.5), quantile(sorted, 0.75)};
        std::vector<std::vector<double>> table(2, std::vector<double>(4, 0.0));
        for (std::size_t k = 0; k < users.size(); ++k) {
            std::size_t bin = 0;
            for (double edge : g.bin_edges) bin += (*values)[k] > edge;
            table[better[k] ? 0 : 1][bin] += 1.0;
        }
        const auto [chi2, dof] = pearson_chi2(table);
        g.chi2 = chi2;
        g.dof = dof;
        g.significant = dof > 0 && chi2 > chi2_critical_05(dof);
        g.better = n_better;
        g.worse = users.size() - n_better;
        out.push_back(std::move(g));
    }
    return out;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsReport> reports,
                       const std::string& manifest) {
    auto out = open_out(path);
    if (!manifest.empty()) out << "# manifest: " << manifest << '\n';
    for (const MetricsReport& r : reports) {
        out << "# " << r.model << ' ' << r.variant << ' ' << r.code_bits << ": evaluated_users=" << r.users.size()
            << " skipped_users=" << r.skipped_users << " recall_norm=" << to_string(r.recall_norm)
            << " gain=" << (r.gain == Gain::binary ? "binary" : "graded") << '\n';
    }
    out << "model,variant,code_bits,k,metric,value\n";
    for (const MetricsReport& r : reports) {
        for (std::size_t q = 0; q < r.ks.size(); ++q) {
            out << r.model << ',' << r.variant << ',' << r.code_bits << ',' << r.ks[q] << ",ndcg,"
                << format_value(r.mean_ndcg[q]) << '\n';
            out << r.model << ',' << r.variant << ',' << r.code_bits << ',' << r.ks[q] << ",recall,"
                << format_value(r.mean_recall[q]) << '\n';
        }
    }
    if (!out) throw IoError("write failed for " + path.string());
}

void write_per_user_csv(const std::filesystem::path& path, std::span<const MetricsReport> reports,
                        const std::string& manifest) {
    auto out = open_out(path);
    if (!manifest.empty()) out << "# manifest: " << manifest << '\n';
    out << "model,variant,code_bits,user,k,ndcg,recall\n";
    for (const MetricsReport& r : reports) {
        for (std::size_t q = 0; q < r.ks.size(); ++q) {
            for (std::size_t p = 0; p < r.users.size(); ++p) {
                out << r.model << ',' << r.variant << ',' << r.code_bits << ',' << r.users[p] << ',' << r.ks[q]
                    << ',' << format_value(r.user_ndcg[q][p]) << ',' << format_value(r.user_recall[q][p]) << '\n';
            }
        }
    }
    if (!out) throw IoError("write failed for " + path.string());
}

void write_gap_csv(const std::filesystem::path& path, std::span<const GapReport> reports,
                   const std::string& manifest) {
    auto out = open_out(path);
    if (!manifest.empty()) out << "# manifest: " << manifest << '\n';
    out << "model,code_bits,alpha,k,ndcg_st,ndcg_sst,ndcg_relative_drop,recall_st,recall_sst,recall_relative_drop\n";
    for (const GapReport& r : reports) {
        for (const GapEntry& e : r.entries) {
            out << r.model << ',' << r.code_bits << ',' << format_value(r.alpha) << ',' << e.k << ','
                << format_value(e.ndcg_st) << ',' << format_value(e.ndcg_sst) << ','
                << format_value(e.ndcg_relative_drop) << ',' << format_value(e.recall_st) << ','
                << format_value(e.recall_sst) << ',' << format_value(e.recall_relative_drop) << '\n';
        }
    }
    if (!out) throw IoError("write failed for " + path.string());
}

void write_groups_csv(const std::filesystem::path& path, std::span<const GroupAnalysis> groups,
                      const std::string& manifest) {
    auto out = open_out(path);
    if (!manifest.empty()) out << "# manifest: " << manifest << '\n';
    out << "characteristic,chi2,significant,group_sizes\n";
    for (const GroupAnalysis& g : groups) {
        out << g.characteristic << ',' << format_value(g.chi2) << ',' << (g.significant ? "true" : "false") << ','
            << g.better << '/' << g.worse << '\n';
    }
    out << "# bin edges (pooled quartiles)\n";
    for (const GroupAnalysis& g : groups) {
        out << "# " << g.characteristic << " dof=" << g.dof;
        for (double e : g.bin_edges) out << ' ' << format_value(e);
        out << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::vector<MetricRow> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#' || line.rfind("model,", 0) == 0) continue;
        std::stringstream ss(line);
        MetricRow row;
        std::string bits, k, value;
        if (!std::getline(ss, row.model, ',') || !std::getline(ss, row.variant, ',') || !std::getline(ss, bits, ',') ||
            !std::getline(ss, k, ',') || !std::getline(ss, row.metric, ',') || !std::getline(ss, value)) {
            throw ParseError(line_no, "expected model,variant,code_bits,k,metric,value");
        }
        try {
            row.code_bits = std::stoul(bits);
            row.k = std::stoul(k);
            row.value = std::stod(value);
        } catch (const std::exception&) {
            throw ParseError(line_no, "bad number in metrics row");
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string render_table(std::span<const MetricRow> rows, const std::string& metric) {
    std::vector<std::string> row_names;
    std::set<std::size_t> ks, bits;
    std::map<std::tuple<std::string, std::size_t, std::size_t>, double> cells;
    std::map<std::pair<std::string, std::size_t>, double> flat;  // code-length independent rows
    for (const MetricRow& r : rows) {
        if (r.metric != metric) continue;
        const std::string name = r.variant == "-" ? r.model : r.model + "-" + r.variant;
        if (std::find(row_names.begin(), row_names.end(), name) == row_names.end()) row_names.push_back(name);
        ks.insert(r.k);
        if (r.code_bits == 0) {
            flat[{name, r.k}] = r.value;
        } else {
            bits.insert(r.code_bits);
            cells[{name, r.k, r.code_bits}] = r.value;
        }
    }
    if (bits.empty()) bits.insert(0);

    std::size_t name_width = 6;
    for (const auto& n : row_names) name_width = std::max(name_width, n.size());
    std::ostringstream out;
    char buf[32];
    out << std::string(name_width, ' ');
    for (std::size_t k : ks) {
        for (std::size_t b : bits) {
            std::snprintf(buf, sizeof buf, " %9s", ("@" + std::to_string(k) + "/" + std::to_string(b)).c_str());
            out << buf;
        }
    }
    out << '\n';
    for (const auto& name : row_names) {
        out << name << std::string(name_width - name.size(), ' ');
        for (std::size_t k : ks) {
            for (std::size_t b : bits) {
                auto it = cells.find({name, k, b});
                auto fit = flat.find({name, k});
                if (it != cells.end()) {
                    std::snprintf(buf, sizeof buf, " %9.4f", it->second);
                } else if (fit != flat.end()) {
                    std::snprintf(buf, sizeof buf, " %9.4f", fit->second);
                } else {
                    std::snprintf(buf, sizeof buf, " %9s", "-");
                }
                out << buf;
            }
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace hashrec
