#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hashrec/binarize.hpp"
#include "hashrec/dataset.hpp"
#include "hashrec/dense.hpp"
#include "hashrec/models.hpp"

namespace hashrec {

struct RankedList {
    Index user = 0;
    std::vector<Index> items;
    std::vector<double> scores;  // Hamming distances or inner products
};

enum class RecallNorm {
    min_k_relevant,  // |hits| / min(k, |relevant|)
    relevant,        // |hits| / |relevant|
};

enum class Gain { binary, graded };

std::string to_string(RecallNorm n);
RecallNorm parse_recall_norm(const std::string& name);

/// Binary-relevance NDCG with log2(i+1) discounts; `relevant` must be sorted
/// and non-empty.
double ndcg_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k);

/// Graded NDCG: gain of an item is its test rating, ideal ordering by rating.
/// `relevant` and `gains` are aligned, `relevant` sorted.
double graded_ndcg_at_k(std::span<const Index> ranked, std::span<const Index> relevant,
                        std::span<const double> gains, std::size_t k);

double recall_at_k(std::span<const Index> ranked, std::span<const Index> relevant, std::size_t k,
                   RecallNorm norm = RecallNorm::min_k_relevant);

enum class EvalMode { hamming, continuous };

struct EvalOptions {
    RecallNorm recall_norm = RecallNorm::min_k_relevant;
    Gain gain = Gain::binary;
    /// Candidates drop the user's training positives; true drops every
    /// training-rated item instead.
    bool exclude_all_training = false;
    int similarity_threshold = 3;
};

/// Produces a ranking of at most k items for a user, never returning any of
/// the sorted `exclude` items.
using Ranker = std::function<std::vector<Index>(Index user, std::span<const Index> exclude, std::size_t k)>;

struct MetricsReport {
    std::string model;
    std::string variant;
    std::size_t code_bits = 0;
    std::vector<std::size_t> ks;
    std::vector<double> mean_ndcg;    // aligned with ks
    std::vector<double> mean_recall;  // aligned with ks
    std::vector<Index> users;         // evaluated users
    std::vector<std::vector<double>> user_ndcg;    // [k index][user position]
    std::vector<std::vector<double>> user_recall;  // [k index][user position]
    std::size_t skipped_users = 0;    // no relevant test item
    RecallNorm recall_norm = RecallNorm::min_k_relevant;
    Gain gain = Gain::binary;

    double ndcg(std::size_t k) const;
    double recall(std::size_t k) const;
};

/// Shared protocol: every test user with a relevant test item is ranked over
/// all items minus the excluded training items, then scored at each k.
MetricsReport evaluate_rankings(const Ranker& ranker, const SplitPair& split, const SimilarityMatrix& sim_test,
                                std::span<const std::size_t> ks, const EvalOptions& options = {});

/// Continuous features turned into the representation a variant is ranked by.
struct CodeSet {
    Variant variant = Variant::S;
    EvalMode mode = EvalMode::hamming;
    std::size_t code_bits = 0;
    BinaryCodeMatrix user_codes;  // hamming mode
    BinaryCodeMatrix item_codes;
    DenseMatrix user_features;    // continuous mode
    DenseMatrix item_features;
};

/// S -> sign (median threshold for CFcodeReg), SST -> sign(tanh(alpha f)),
/// ST -> tanh(alpha f) continuous, C -> f continuous.
CodeSet make_codes(ModelKind kind, Variant variant, const DenseMatrix& user_features,
                   const DenseMatrix& item_features, double alpha);

EvalMode natural_mode(Variant v);

MetricsReport evaluate_codes(const CodeSet& codes, const SplitPair& split, const SimilarityMatrix& sim_test,
                             std::span<const std::size_t> ks, const EvalOptions& options = {});

/// Encodes both sides and evaluates under `variant`. A mode that does not
/// match the variant (e.g. hamming on C) is a ContractError.
MetricsReport evaluate_model(const TrainedModel& model, Variant variant, const SplitPair& split,
                             const SimilarityMatrix& sim_test, std::span<const std::size_t> ks,
                             EvalMode mode, const EvalOptions& options = {});

/// Random and Top serve one list to every user, skipping excluded items.
MetricsReport evaluate_baseline(ModelKind kind, const SplitPair& split, const SimilarityMatrix& sim_test,
                                std::span<const std::size_t> ks, std::uint64_t seed,
                                const EvalOptions& options = {});

struct GapEntry {
    std::size_t k = 0;
    double ndcg_st = 0.0;
    double ndcg_sst = 0.0;
    double recall_st = 0.0;
    double recall_sst = 0.0;
    double ndcg_relative_drop = 0.0;    // (st - sst) / st
    double recall_relative_drop = 0.0;
};

struct GapReport {
    std::string model;
    std::size_t code_bits = 0;
    double alpha = 1.0;
    std::vector<GapEntry> entries;
};

/// Evaluates one ST-trained model twice: continuous tanh(alpha f) codes and
/// their signs.
GapReport st_sst_gap(const TrainedModel& model_st, const SplitPair& split, const SimilarityMatrix& sim_test,
                     std::span<const std::size_t> ks, const EvalOptions& options = {});
GapReport st_sst_gap(const std::string& model, const DenseMatrix& user_features,
                     const DenseMatrix& item_features, double alpha, const SplitPair& split,
                     const SimilarityMatrix& sim_test, std::span<const std::size_t> ks,
                     const EvalOptions& options = {});

struct GroupAnalysis {
    std::string characteristic;  // num_ratings, avg_rating, std_rating
    double chi2 = 0.0;
    std::size_t dof = 0;
    bool significant = false;    // at the 0.05 level
    std::size_t better = 0;      // users with score_a > score_b
    std::size_t worse = 0;
    std::vector<double> bin_edges;
};

/// Critical value of the chi-squared distribution at the 0.05 level.
double chi2_critical_05(std::size_t dof);

/// Pearson chi-squared over a 2 x C contingency table; columns whose
/// expected count is zero are dropped. Returns {statistic, dof}.
std::pair<double, std::size_t> pearson_chi2(const std::vector<std::vector<double>>& table);

/// Splits users into score_a > score_b and the rest, bins each user
/// characteristic at pooled quartiles and tests independence. Returns an
/// empty vector (analysis skipped) when either group is empty.
std::vector<GroupAnalysis> chi_square_group_analysis(std::span<const double> scores_a,
                                                     std::span<const double> scores_b,
                                                     std::span<const Index> users,
                                                     const RatingMatrix& ratings);

// CSV outputs. A non-empty `manifest` is written as a leading `# manifest:` line;
// readers skip `#` lines.
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsReport> reports,
                       const std::string& manifest = {});
void write_per_user_csv(const std::filesystem::path& path, std::span<const MetricsReport> reports,
                        const std::string& manifest = {});
void write_gap_csv(const std::filesystem::path& path, std::span<const GapReport> reports,
                   const std::string& manifest = {});
void write_groups_csv(const std::filesystem::path& path, std::span<const GroupAnalysis> groups,
                      const std::string& manifest = {});

struct MetricRow {
    std::string model;
    std::string variant;
    std::size_t code_bits = 0;
    std::size_t k = 0;
    std::string metric;
    double value = 0.0;
};

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

/// Rows = model-variant, columns = k x code length, as plain aligned text.
std::string render_table(std::span<const MetricRow> rows, const std::string& metric);

}  // namespace hashrec
