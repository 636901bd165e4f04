// hashrec: prepare -> train -> encode -> evaluate -> report, plus the ST/SST
// gap study and the chi-squared group analysis.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hashrec/errors.hpp"
#include "hashrec/experiment.hpp"

namespace {

constexpr int kUserError = 1;
constexpr int kInternalError = 2;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
    std::string out;
};

void add_common(CLI::App* cmd, Common& common) {
    cmd->add_option("--config", common.config, "Experiment config (INI sections)")->required()->check(
        CLI::ExistingFile);
    cmd->add_option("--seed", common.seed, "Master seed; overrides the split and training seeds");
    cmd->add_option("--jobs", common.jobs, "Grid cells trained in parallel")->check(CLI::PositiveNumber);
    cmd->add_option("--out", common.out, "Output directory; overrides [output] dir");
}

hashrec::ExperimentConfig resolve(const Common& common) {
    hashrec::ExperimentConfig cfg = hashrec::load_config(common.config);
    if (common.seed) cfg.set_seed(*common.seed);
    if (!common.out.empty()) cfg.out_dir = common.out;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hashing-based recommender experiments"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(hashrec::kSoftwareVersion));

    Common common;
    std::vector<std::string> cells;
    std::string model_a = "ccsr";
    std::string model_b = "aecf";
    std::size_t k = 10;

    auto* prepare = app.add_subcommand("prepare", "Load, filter and split the dataset");
    auto* train = app.add_subcommand("train", "Train grid cells and write checkpoints");
    auto* encode = app.add_subcommand("encode", "Turn checkpoints into code and embedding files");
    auto* evaluate = app.add_subcommand("evaluate", "Score every grid entry and write metric CSVs");
    auto* report = app.add_subcommand("report", "Render the metric tables");
    auto* gapstudy = app.add_subcommand("gapstudy", "Compare ST and SST codes of tanh-trained cells");
    auto* groups = app.add_subcommand("groups", "Chi-squared analysis of users where one model wins");
    for (CLI::App* cmd : {prepare, train, encode, evaluate, report, gapstudy, groups}) add_common(cmd, common);
    for (CLI::App* cmd : {train, encode}) {
        cmd->add_option("--cell", cells, "Restrict to these cell ids, e.g. ccsr-plain-40");
    }
    groups->add_option("--model-a", model_a, "First model kind (continuous features)");
    groups->add_option("--model-b", model_b, "Second model kind (continuous features)");
    groups->add_option("--k", k, "NDCG cutoff used to split users")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kUserError;
    }

    try {
        const hashrec::ExperimentConfig cfg = resolve(common);
        if (prepare->parsed()) hashrec::cmd_prepare(cfg, std::cout);
        if (train->parsed()) hashrec::cmd_train(cfg, cells, common.jobs, std::cout);
        if (encode->parsed()) hashrec::cmd_encode(cfg, cells, std::cout);
        if (evaluate->parsed()) hashrec::cmd_evaluate(cfg, std::cout);
        if (report->parsed()) hashrec::cmd_report(cfg, std::cout);
        if (gapstudy->parsed()) hashrec::cmd_gapstudy(cfg, std::cout);
        if (groups->parsed()) hashrec::cmd_groups(cfg, model_a, model_b, k, std::cout);
    } catch (const hashrec::ShapeError& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kInternalError;
    } catch (const hashrec::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUserError;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kInternalError;
    }
    return EXIT_SUCCESS;
}
