#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hashrec/dataset.hpp"
#include "hashrec/eval.hpp"
#include "hashrec/models.hpp"

namespace hashrec {

inline constexpr const char* kSoftwareVersion = "hashrec 0.1.0";

struct DatasetSpec {
    std::string name = "dataset";
    std::string source = "file";  // file | synthetic
    std::filesystem::path path;
    RatingFormat format = RatingFormat::movielens_dat;
    SyntheticConfig synthetic;
    std::size_t min_user = 0;
    std::size_t min_item = 0;
    std::size_t subsample_users = 0;  // 0 keeps everyone
    int similarity_threshold = 3;
    SplitProtocol protocol = SplitProtocol::per_user;
    double train_ratio = 0.8;
    std::uint64_t seed = 1;
};

/// One training run: a model kind, whether it trains under the tanh schedule,
/// and a code length. Several variants can be read off the same run.
struct GridCell {
    ModelKind kind = ModelKind::ccsr;
    bool tanh_schedule = false;
    std::size_t code_dim = 0;
    std::vector<Variant> variants;

    /// e.g. "ccsr-plain-40", "aecf-st-5"
    std::string id() const;
};

struct ExperimentConfig {
    DatasetSpec dataset;
    std::vector<std::string> models;  // "random", "top", "ccsr-S", "aecf-ST", ...
    std::vector<std::size_t> code_lengths{5, 10, 20, 40};
    TrainConfig train;
    std::map<std::string, std::map<std::string, std::string>> overrides;  // per model kind
    std::vector<std::size_t> ks{2, 6, 10};
    EvalOptions eval;
    std::filesystem::path out_dir = "run";

    std::vector<GridCell> cells() const;
    std::vector<ModelKind> baselines() const;
    /// Global [train] keys, then the kind's overrides, then the cell itself.
    TrainConfig resolve(const GridCell& cell) const;
    /// Sets the split seed and the training seed together.
    void set_seed(std::uint64_t seed);
};

ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical text of the config, parseable by parse_config.
std::string render_config(const ExperimentConfig& cfg);

/// Applies one `key = value` to a TrainConfig; unknown keys are errors.
void apply_train_key(TrainConfig& cfg, const std::string& key, const std::string& value);

/// Seed of a grid cell, derived from the training seed and the cell id.
std::uint64_t cell_seed(std::uint64_t seed, const std::string& cell_id);

/// Records every stage run against an output directory in `manifest.json`.
/// Stages are appended when they start and finalized when they end.
class RunManifest {
public:
    explicit RunManifest(std::filesystem::path out_dir);

    void begin(const std::string& stage, const ExperimentConfig& cfg);
    void add_output(const std::filesystem::path& file);
    void add_fingerprint(const std::string& key, const std::string& value);
    void finish(bool ok, const std::string& message = {});

    static std::filesystem::path path_in(const std::filesystem::path& out_dir);

private:
    void write() const;

    std::filesystem::path out_dir_;
    std::string document_;  // serialized JSON kept between writes
    std::size_t stage_index_ = 0;
    double started_ = 0.0;
};

/// FNV-1a over a file's bytes, as 16 hex digits.
std::string file_checksum(const std::filesystem::path& path);

// Artifact locations inside an output directory.
std::filesystem::path split_path(const std::filesystem::path& out);
std::filesystem::path similarity_path(const std::filesystem::path& out, const std::string& fold);
std::filesystem::path checkpoint_path(const std::filesystem::path& out, const std::string& cell_id);
std::filesystem::path code_path(const std::filesystem::path& out, const std::string& cell_id, Variant v,
                                Side side);
std::filesystem::path reports_dir(const std::filesystem::path& out);

void save_model(const std::filesystem::path& out, const std::string& cell_id, const TrainedModel& model,
                const SplitPair& split);
TrainedModel load_model(const std::filesystem::path& out, const std::string& cell_id);

/// Selects grid cells by id; an empty selector keeps all of them. Unknown
/// ids are errors.
std::vector<GridCell> select_cells(const ExperimentConfig& cfg, const std::vector<std::string>& selector);

/// Runs `fn` over indices [0, count) on up to `jobs` threads; the first
/// failure is rethrown after every worker stops.
void run_parallel(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn);

void cmd_prepare(const ExperimentConfig& cfg, std::ostream& log);
void cmd_train(const ExperimentConfig& cfg, const std::vector<std::string>& selector, std::size_t jobs,
               std::ostream& log);
void cmd_encode(const ExperimentConfig& cfg, const std::vector<std::string>& selector, std::ostream& log);
void cmd_evaluate(const ExperimentConfig& cfg, std::ostream& log);
void cmd_report(const ExperimentConfig& cfg, std::ostream& log);
void cmd_gapstudy(const ExperimentConfig& cfg, std::ostream& log);
/// Compares per-user NDCG@k of two continuous-feature models at each code
/// length present for both.
void cmd_groups(const ExperimentConfig& cfg, const std::string& model_a, const std::string& model_b,
                std::size_t k, std::ostream& log);

}  // namespace hashrec
