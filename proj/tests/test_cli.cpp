#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include "hashrec/errors.hpp"
#include "hashrec/experiment.hpp"

using namespace hashrec;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(# tiny grid
[experiment]
seed = 5

[dataset]
name = tiny
source = synthetic
synthetic_users = 40
synthetic_items = 60
synthetic_mean_per_user = 15
synthetic_min_per_user = 6

[grid]
models = random, top, cf-S, cfcodereg-S, ccsr-S, ccsr-C, ccsr-ST, ccsr-SST, aecf-C
code_lengths = 4

[train]
epochs = 2
batch_size = 16

[train.aecf]
hidden = 16, 8

[eval]
ks = 2, 6
)";

ExperimentConfig parse(const std::string& text) {
    std::istringstream in(text);
    return parse_config(in);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("hashrec_cli_" + name);
    fs::remove_all(d);
    return d;
}

void run_pipeline(ExperimentConfig cfg, const fs::path& out, std::size_t jobs) {
    cfg.out_dir = out;
    std::ostringstream log;
    cmd_prepare(cfg, log);
    cmd_train(cfg, {}, jobs, log);
    cmd_encode(cfg, {}, log);
    cmd_evaluate(cfg, log);
    cmd_report(cfg, log);
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(HASHREC_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config parsing") {
    const ExperimentConfig cfg = parse(kTinyConfig);
    CHECK(cfg.dataset.synthetic.users == 40);
    CHECK(cfg.code_lengths == std::vector<std::size_t>{4});
    CHECK(cfg.ks == std::vector<std::size_t>{2, 6});
    CHECK(cfg.baselines().size() == 2);
    // ST and SST share one run
    std::size_t st_runs = 0;
    for (const GridCell& c : cfg.cells()) st_runs += c.tanh_schedule;
    CHECK(st_runs == 1);
    CHECK(cfg.resolve(cfg.cells().front()).seed == cell_seed(cfg.train.seed, cfg.cells().front().id()));

    const ExperimentConfig again = parse(render_config(cfg));
    CHECK(render_config(again) == render_config(cfg));
    CHECK(again.cells().size() == cfg.cells().size());
}

TEST_CASE("bad configs are rejected with a message") {
    CHECK_THROWS_AS(parse("[train]\nepochs = 3\nbogus = 1\n"), ContractError);
    CHECK_THROWS_AS(parse("[grid]\nmodels = cf-ST\n"), ContractError);
    CHECK_THROWS_AS(parse("[grid]\nmodels = nosuchmodel-S\n"), Error);
    CHECK_THROWS_AS(parse("[eval]\nks = two\n"), Error);
    try {
        parse("[train]\nbogus = 1\n");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("bogus") != std::string::npos);
    }
}

TEST_CASE("per-kind overrides apply after the global section") {
    const ExperimentConfig cfg = parse("[dataset]\nsource = synthetic\n[grid]\nmodels = aecf-S, ccsr-S\ncode_lengths = 8\n"
                                       "[train]\nepochs = 4\n"
                                       "[train.aecf]\nepochs = 9\n");
    for (const GridCell& c : cfg.cells()) {
        const TrainConfig t = cfg.resolve(c);
        CHECK(t.code_dim == 8);
        CHECK(*t.epochs == (c.kind == ModelKind::aecf ? 9u : 4u));
    }
}

TEST_CASE("pipeline output is byte-identical across runs and job counts") {
    const ExperimentConfig cfg = parse(kTinyConfig);
    const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
    run_pipeline(cfg, a, 1);
    run_pipeline(cfg, b, 2);
    for (const char* f : {"reports/metrics.csv", "reports/per_user.csv", "reports/table.txt", "data/split.tsv"}) {
        INFO(f);
        REQUIRE(fs::exists(a / f));
        CHECK(slurp(a / f) == slurp(b / f));
    }
    std::ostringstream log;
    ExperimentConfig ca = cfg;
    ca.out_dir = a;
    cmd_gapstudy(ca, log);
    CHECK(fs::exists(a / "reports/gap.csv"));
    CHECK(fs::exists(RunManifest::path_in(a)));

    ExperimentConfig other = cfg;
    other.set_seed(6);
    const fs::path c = fresh_dir("det_c");
    run_pipeline(other, c, 1);
    CHECK(slurp(a / "reports/metrics.csv") != slurp(c / "reports/metrics.csv"));
    for (const fs::path& d : {a, b, c}) fs::remove_all(d);
}

TEST_CASE("a baseline-only grid reports two rows") {
    ExperimentConfig cfg = parse(kTinyConfig);
    cfg.models = {"random", "top"};
    const fs::path out = fresh_dir("baselines");
    run_pipeline(cfg, out, 1);
    const std::vector<MetricRow> rows = read_metrics_csv(out / "reports/metrics.csv");
    std::set<std::string> models;
    for (const MetricRow& r : rows) models.insert(r.model);
    CHECK(models == std::set<std::string>{"random", "top"});
    std::istringstream table(slurp(out / "reports/table.txt"));
    std::size_t data_rows = 0;
    for (std::string line; std::getline(table, line);)
        data_rows += line.rfind("random", 0) == 0 || line.rfind("top", 0) == 0;
    CHECK(data_rows == 4);  // NDCG and Recall tables
    fs::remove_all(out);
}

TEST_CASE("missing inputs give actionable errors") {
    ExperimentConfig cfg = parse(kTinyConfig);
    cfg.out_dir = fresh_dir("missing");
    std::ostringstream log;
    try {
        cmd_train(cfg, {}, 1, log);
        FAIL("train without prepare succeeded");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("hashrec prepare") != std::string::npos);
    }
    cmd_prepare(cfg, log);
    try {
        cmd_evaluate(cfg, log);
        FAIL("evaluate without train succeeded");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("hashrec encode") != std::string::npos);
    }
    CHECK_THROWS_AS(cmd_train(cfg, {"ccsr-plain-99"}, 1, log), ContractError);
    fs::remove_all(cfg.out_dir);

    cfg.dataset.source = "file";
    cfg.dataset.path = "/nonexistent/ratings.dat";
    try {
        cmd_prepare(cfg, log);
        FAIL("prepare on a missing file succeeded");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("/nonexistent/ratings.dat") != std::string::npos);
    }
    fs::remove_all(cfg.out_dir);
}

TEST_CASE("command line exit codes") {
    const fs::path dir = fresh_dir("exe");
    fs::create_directories(dir);
    {
        std::ofstream(dir / "tiny.ini") << kTinyConfig;
        std::ofstream(dir / "bad.ini") << "[train]\nbogus = 1\n";
    }
    const std::string cfg = (dir / "tiny.ini").string();
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("") == 1);
    CHECK(run_cli("prepare") == 1);
    CHECK(run_cli("prepare --config " + (dir / "bad.ini").string()) == 1);
    CHECK(run_cli("train --config " + cfg + " --out " + (dir / "run").string()) == 1);
    CHECK(run_cli("prepare --config " + cfg + " --out " + (dir / "run").string()) == 0);
    CHECK(run_cli("train --config " + cfg + " --out " + (dir / "run").string() + " --cell cf-plain-4") == 0);
    CHECK(fs::exists(checkpoint_path(dir / "run", "cf-plain-4")));
    fs::remove_all(dir);
}

TEST_CASE("shipped configs parse") {
    std::size_t seen = 0;
    for (const auto& entry : fs::directory_iterator(fs::path(HASHREC_SOURCE_DIR) / "configs")) {
        if (entry.path().extension() != ".ini") continue;
        INFO(entry.path().string());
        CHECK_NOTHROW(load_config(entry.path()));
        ++seen;
    }
    CHECK(seen >= 3);
}
