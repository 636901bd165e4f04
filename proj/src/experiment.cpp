#include "hashrec/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "hashrec/errors.hpp"
#include "hashrec/io.hpp"
#include "json.hpp"

namespace hashrec {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        if (!part.empty()) out.push_back(part);
    }
    return out;
}

template <typename T>
T to_number(const std::string& key, const std::string& text) {
    T value{};
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || end != text.data() + text.size()) {
        throw ContractError("config: '" + key + "' expects a number, got '" + text + "'");
    }
    return value;
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& text) {
    std::vector<std::size_t> out;
    for (const auto& part : split_list(text)) out.push_back(to_number<std::size_t>(key, part));
    return out;
}

std::string join(const std::vector<std::size_t>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) out += (i ? ", " : "") + std::to_string(values[i]);
    return out;
}

std::string number_text(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

// Model grid entry such as "ccsr-ST": kind plus optional variant.
std::pair<ModelKind, std::optional<Variant>> parse_grid_entry(const std::string& entry) {
    const auto dash = entry.find('-');
    const ModelKind kind = parse_model_kind(entry.substr(0, dash));
    if (dash == std::string::npos) {
        if (!is_baseline(kind)) throw ContractError("grid: '" + entry + "' needs a variant, e.g. " + entry + "-S");
        return {kind, std::nullopt};
    }
    if (is_baseline(kind)) throw ContractError("grid: baseline '" + entry + "' takes no variant");
    const Variant v = parse_variant(entry.substr(dash + 1));
    if (is_factorization(kind) && uses_tanh_schedule(v)) {
        throw ContractError("grid: " + entry + " is not defined; factorization models have no tanh schedule");
    }
    return {kind, v};
}

void apply_dataset_key(DatasetSpec& d, const std::string& key, const std::string& value) {
    if (key == "name") d.name = value;
    else if (key == "source") {
        if (value != "file" && value != "synthetic") throw ContractError("config: source must be file or synthetic");
        d.source = value;
    }
    else if (key == "path") d.path = value;
    else if (key == "format") d.format = parse_rating_format(value);
    else if (key == "min_user") d.min_user = to_number<std::size_t>(key, value);
    else if (key == "min_item") d.min_item = to_number<std::size_t>(key, value);
    else if (key == "subsample_users") d.subsample_users = to_number<std::size_t>(key, value);
    else if (key == "similarity_threshold") d.similarity_threshold = to_number<int>(key, value);
    else if (key == "protocol") d.protocol = parse_split_protocol(value);
    else if (key == "train_ratio") d.train_ratio = to_number<double>(key, value);
    else if (key == "seed") d.seed = to_number<std::uint64_t>(key, value);
    else if (key == "synthetic_users") d.synthetic.users = to_number<std::size_t>(key, value);
    else if (key == "synthetic_items") d.synthetic.items = to_number<std::size_t>(key, value);
    else if (key == "synthetic_latent_dim") d.synthetic.latent_dim = to_number<std::size_t>(key, value);
    else if (key == "synthetic_min_per_user") d.synthetic.min_per_user = to_number<std::size_t>(key, value);
    else if (key == "synthetic_mean_per_user") d.synthetic.mean_per_user = to_number<double>(key, value);
    else if (key == "synthetic_popularity_exponent") d.synthetic.popularity_exponent = to_number<double>(key, value);
    else if (key == "synthetic_noise") d.synthetic.noise = to_number<double>(key, value);
    else if (key == "synthetic_seed") d.synthetic.seed = to_number<std::uint64_t>(key, value);
    else throw ContractError("config: unknown [dataset] key '" + key + "'");
}

void apply_eval_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "ks") {
        cfg.ks = to_sizes(key, value);
        if (cfg.ks.empty() || std::count(cfg.ks.begin(), cfg.ks.end(), 0u) > 0) {
            throw ContractError("config: ks must list positive cutoffs");
        }
    } else if (key == "recall_norm") {
        cfg.eval.recall_norm = parse_recall_norm(value);
    } else if (key == "candidates") {
        if (value == "unseen_positives") cfg.eval.exclude_all_training = false;
        else if (value == "unseen") cfg.eval.exclude_all_training = true;
        else throw ContractError("config: candidates must be unseen_positives or unseen");
    } else if (key == "gain") {
        if (value == "binary") cfg.eval.gain = Gain::binary;
        else if (value == "graded") cfg.eval.gain = Gain::graded;
        else throw ContractError("config: gain must be binary or graded");
    } else {
        throw ContractError("config: unknown [eval] key '" + key + "'");
    }
}

json train_config_json(const TrainConfig& c) {
    json j;
    j["code_dim"] = c.code_dim;
    j["epochs"] = c.epochs ? json(*c.epochs) : json(nullptr);
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate ? json(*c.learning_rate) : json(nullptr);
    j["lambda"] = c.lambda;
    j["lambda_ae"] = c.lambda_ae;
    j["lambda_b"] = c.lambda_b;
    j["dropout"] = c.dropout_rate ? json(*c.dropout_rate) : json(nullptr);
    j["binarization"] = to_string(c.binarization);
    j["final_alpha"] = c.final_alpha;
    j["negative_ratio"] = c.negative_ratio;
    j["hidden"] = c.hidden ? json(*c.hidden) : json(nullptr);
    j["input_scale"] = c.input_scale;
    j["code_reg_target"] = to_string(c.code_reg_target);
    j["similarity_threshold"] = c.similarity_threshold;
    j["seed"] = c.seed;
    return j;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.code_dim = j.at("code_dim").get<std::size_t>();
    if (!j.at("epochs").is_null()) c.epochs = j.at("epochs").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    if (!j.at("learning_rate").is_null()) c.learning_rate = j.at("learning_rate").get<double>();
    c.lambda = j.at("lambda").get<double>();
    c.lambda_ae = j.at("lambda_ae").get<double>();
    c.lambda_b = j.at("lambda_b").get<double>();
    if (!j.at("dropout").is_null()) c.dropout_rate = j.at("dropout").get<double>();
    c.binarization = parse_variant(j.at("binarization").get<std::string>());
    c.final_alpha = j.at("final_alpha").get<double>();
    c.negative_ratio = j.at("negative_ratio").get<double>();
    if (!j.at("hidden").is_null()) c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    c.input_scale = j.at("input_scale").get<double>();
    c.code_reg_target = parse_code_reg_target(j.at("code_reg_target").get<std::string>());
    c.similarity_threshold = j.at("similarity_threshold").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

std::string iso_time_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

double steady_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

json read_json(const fs::path& path, const std::string& producer) {
    std::ifstream in(path);
    if (!in) throw IoError(path.string() + " not found; run `hashrec " + producer + "` first");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw IoError("malformed " + path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text)) throw IoError("cannot write " + path.string());
}

void require_file(const fs::path& path, const std::string& producer) {
    if (!fs::exists(path)) throw IoError(path.string() + " not found; run `hashrec " + producer + "` first");
}

struct PreparedData {
    SplitPair split;
    SimilarityMatrix sim_test;
};

PreparedData load_prepared(const fs::path& out) {
    require_file(split_path(out), "prepare");
    require_file(similarity_path(out, "test"), "prepare");
    return {load_split(split_path(out)), load_similarity(similarity_path(out, "test"))};
}

const std::string kManifestRef = "../manifest.json";

std::string render_wide_csv(std::span<const MetricRow> rows) {
    std::vector<std::string> names;
    std::set<std::pair<std::size_t, std::size_t>> columns;
    std::map<std::tuple<std::string, std::string, std::size_t, std::size_t>, double> cells;
    for (const MetricRow& r : rows) {
        const std::string name = r.variant == "-" ? r.model : r.model + "-" + r.variant;
        if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
        columns.insert({r.k, r.code_bits});
        cells[{name, r.metric, r.k, r.code_bits}] = r.value;
    }
    std::ostringstream out;
    out << "row,metric";
    for (const auto& [k, bits] : columns) out << ",k" << k << "_r" << bits;
    out << '\n';
    for (const std::string metric : {"ndcg", "recall"}) {
        for (const auto& name : names) {
            out << name << ',' << metric;
            for (const auto& [k, bits] : columns) {
                const auto it = cells.find({name, metric, k, bits});
                out << ',';
                if (it != cells.end()) {
                    char buf[32];
                    std::snprintf(buf, sizeof buf, "%.6f", it->second);
                    out << buf;
                }
            }
            out << '\n';
        }
    }
    return out.str();
}

}  // namespace

std::string GridCell::id() const {
    return to_string(kind) + (tanh_schedule ? "-st-" : "-plain-") + std::to_string(code_dim);
}

std::vector<GridCell> ExperimentConfig::cells() const {
    std::vector<GridCell> out;
    for (std::size_t r : code_lengths) {
        for (const std::string& entry : models) {
            const auto [kind, variant] = parse_grid_entry(entry);
            if (!variant) continue;
            const bool st = uses_tanh_schedule(*variant);
            auto it = std::find_if(out.begin(), out.end(), [&](const GridCell& c) {
                return c.kind == kind && c.tanh_schedule == st && c.code_dim == r;
            });
            if (it == out.end()) {
                out.push_back(GridCell{kind, st, r, {}});
                it = out.end() - 1;
            }
            if (std::find(it->variants.begin(), it->variants.end(), *variant) == it->variants.end()) {
                it->variants.push_back(*variant);
            }
        }
    }
    return out;
}

std::vector<ModelKind> ExperimentConfig::baselines() const {
    std::vector<ModelKind> out;
    for (const std::string& entry : models) {
        const auto [kind, variant] = parse_grid_entry(entry);
        if (!variant && std::find(out.begin(), out.end(), kind) == out.end()) out.push_back(kind);
    }
    return out;
}

TrainConfig ExperimentConfig::resolve(const GridCell& cell) const {
    TrainConfig c = train;
    if (const auto it = overrides.find(to_string(cell.kind)); it != overrides.end()) {
        for (const auto& [key, value] : it->second) apply_train_key(c, key, value);
    }
    c.code_dim = cell.code_dim;
    c.binarization = cell.tanh_schedule ? Variant::ST : Variant::S;
    c.similarity_threshold = dataset.similarity_threshold;
    c.seed = cell_seed(train.seed, cell.id());
    return c;
}

void ExperimentConfig::set_seed(std::uint64_t seed) {
    dataset.seed = seed;
    train.seed = seed;
}

void apply_train_key(TrainConfig& c, const std::string& key, const std::string& value) {
    if (key == "epochs") c.epochs = to_number<std::size_t>(key, value);
    else if (key == "batch_size") c.batch_size = to_number<std::size_t>(key, value);
    else if (key == "learning_rate") c.learning_rate = to_number<double>(key, value);
    else if (key == "lambda") c.lambda = to_number<double>(key, value);
    else if (key == "lambda_ae") c.lambda_ae = to_number<double>(key, value);
    else if (key == "lambda_b") c.lambda_b = to_number<double>(key, value);
    else if (key == "dropout") c.dropout_rate = to_number<double>(key, value);
    else if (key == "final_alpha") c.final_alpha = to_number<double>(key, value);
    else if (key == "negative_ratio") c.negative_ratio = to_number<double>(key, value);
    else if (key == "hidden") c.hidden = to_sizes(key, value);
    else if (key == "input_scale") c.input_scale = to_number<double>(key, value);
    else if (key == "code_reg_target") c.code_reg_target = parse_code_reg_target(value);
    else if (key == "seed") c.seed = to_number<std::uint64_t>(key, value);
    else throw ContractError("config: unknown training key '" + key + "'");

    if (c.dropout_rate && (*c.dropout_rate < 0.0 || *c.dropout_rate >= 1.0)) {
        throw ContractError("config: dropout must be in [0, 1)");
    }
    if (c.batch_size == 0) throw ContractError("config: batch_size must be at least 1");
}

std::uint64_t cell_seed(std::uint64_t seed, const std::string& cell_id) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : cell_id) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    std::uint64_t z = seed ^ h;  // splitmix64 finalizer
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

ExperimentConfig parse_config(std::istream& in) {
    // ini_parser only knows ';' comments
    std::stringstream cleaned;
    std::string line;
    while (std::getline(in, line)) {
        const std::string t = trim(line);
        if (!t.empty() && t.front() == '#') continue;
        cleaned << line << '\n';
    }
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::read_ini(cleaned, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ParseError(e.line(), e.message());
    }

    ExperimentConfig cfg;
    std::optional<std::uint64_t> master_seed;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) {
            throw ContractError("config: key '" + section + "' must be inside a section");
        }
        for (const auto& [raw_key, node] : body) {
            const std::string key = trim(raw_key);
            const std::string value = trim(node.data());
            if (section == "experiment") {
                if (key != "seed") throw ContractError("config: unknown [experiment] key '" + key + "'");
                master_seed = to_number<std::uint64_t>(key, value);
            } else if (section == "dataset") {
                apply_dataset_key(cfg.dataset, key, value);
            } else if (section == "grid") {
                if (key == "models") cfg.models = split_list(value);
                else if (key == "code_lengths") cfg.code_lengths = to_sizes(key, value);
                else throw ContractError("config: unknown [grid] key '" + key + "'");
            } else if (section == "train") {
                apply_train_key(cfg.train, key, value);
            } else if (section.rfind("train.", 0) == 0) {
                const std::string kind = section.substr(6);
                parse_model_kind(kind);
                TrainConfig probe;
                apply_train_key(probe, key, value);
                cfg.overrides[kind][key] = value;
            } else if (section == "eval") {
                apply_eval_key(cfg, key, value);
            } else if (section == "output") {
                if (key != "dir") throw ContractError("config: unknown [output] key '" + key + "'");
                cfg.out_dir = value;
            } else {
                throw ContractError("config: unknown section [" + section + "]");
            }
        }
    }
    if (master_seed) cfg.set_seed(*master_seed);
    cfg.eval.similarity_threshold = cfg.dataset.similarity_threshold;

    if (cfg.dataset.source == "file" && cfg.dataset.path.empty()) {
        throw ContractError("config: [dataset] path is required when source = file");
    }
    if (!(cfg.dataset.train_ratio > 0.0 && cfg.dataset.train_ratio < 1.0)) {
        throw ContractError("config: train_ratio must be in (0, 1)");
    }
    if (cfg.dataset.similarity_threshold < 0 || cfg.dataset.similarity_threshold > 5) {
        throw ContractError("config: similarity_threshold must be in [0, 5]");
    }
    for (std::size_t r : cfg.code_lengths) {
        if (r == 0) throw ContractError("config: code lengths must be positive");
    }
    for (const GridCell& cell : cfg.cells()) cfg.resolve(cell);  // every cell must resolve
    return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    return parse_config(in);
}

std::string render_config(const ExperimentConfig& cfg) {
    const DatasetSpec& d = cfg.dataset;
    const TrainConfig& t = cfg.train;
    std::ostringstream out;
    out << "[dataset]\n"
        << "name = " << d.name << '\n'
        << "source = " << d.source << '\n';
    if (!d.path.empty()) out << "path = " << d.path.string() << '\n';
    out << "format = " << to_string(d.format) << '\n'
        << "min_user = " << d.min_user << '\n'
        << "min_item = " << d.min_item << '\n'
        << "subsample_users = " << d.subsample_users << '\n'
        << "similarity_threshold = " << d.similarity_threshold << '\n'
        << "protocol = " << to_string(d.protocol) << '\n'
        << "train_ratio = " << number_text(d.train_ratio) << '\n'
        << "seed = " << d.seed << '\n';
    if (d.source == "synthetic") {
        const SyntheticConfig& s = d.synthetic;
        out << "synthetic_users = " << s.users << '\n'
            << "synthetic_items = " << s.items << '\n'
            << "synthetic_latent_dim = " << s.latent_dim << '\n'
            << "synthetic_min_per_user = " << s.min_per_user << '\n'
            << "synthetic_mean_per_user = " << number_text(s.mean_per_user) << '\n'
            << "synthetic_popularity_exponent = " << number_text(s.popularity_exponent) << '\n'
            << "synthetic_noise = " << number_text(s.noise) << '\n'
            << "synthetic_seed = " << s.seed << '\n';
    }
    out << "\n[grid]\nmodels = ";
    for (std::size_t i = 0; i < cfg.models.size(); ++i) out << (i ? ", " : "") << cfg.models[i];
    out << "\ncode_lengths = " << join(cfg.code_lengths) << "\n\n[train]\n";
    if (t.epochs) out << "epochs = " << *t.epochs << '\n';
    out << "batch_size = " << t.batch_size << '\n';
    if (t.learning_rate) out << "learning_rate = " << number_text(*t.learning_rate) << '\n';
    out << "lambda = " << number_text(t.lambda) << '\n'
        << "lambda_ae = " << number_text(t.lambda_ae) << '\n'
        << "lambda_b = " << number_text(t.lambda_b) << '\n';
    if (t.dropout_rate) out << "dropout = " << number_text(*t.dropout_rate) << '\n';
    out << "final_alpha = " << number_text(t.final_alpha) << '\n'
        << "negative_ratio = " << number_text(t.negative_ratio) << '\n';
    if (t.hidden) out << "hidden = " << join(*t.hidden) << '\n';
    out << "input_scale = " << number_text(t.input_scale) << '\n'
        << "code_reg_target = " << to_string(t.code_reg_target) << '\n'
        << "seed = " << t.seed << '\n';
    for (const auto& [kind, keys] : cfg.overrides) {
        out << "\n[train." << kind << "]\n";
        for (const auto& [key, value] : keys) out << key << " = " << value << '\n';
    }
    out << "\n[eval]\nks = " << join(cfg.ks) << '\n'
        << "recall_norm = " << to_string(cfg.eval.recall_norm) << '\n'
        << "candidates = " << (cfg.eval.exclude_all_training ? "unseen" : "unseen_positives") << '\n'
        << "gain = " << (cfg.eval.gain == Gain::binary ? "binary" : "graded") << '\n'
        << "\n[output]\ndir = " << cfg.out_dir.string() << '\n';
    return out.str();
}

RunManifest::RunManifest(fs::path out_dir) : out_dir_(std::move(out_dir)) {}

fs::path RunManifest::path_in(const fs::path& out_dir) { return out_dir / "manifest.json"; }

void RunManifest::begin(const std::string& stage, const ExperimentConfig& cfg) {
    fs::create_directories(out_dir_);
    json doc;
    const fs::path path = path_in(out_dir_);
    if (fs::exists(path)) {
        doc = read_json(path, "prepare");
    } else {
        doc["software"] = kSoftwareVersion;
        doc["stages"] = json::array();
        doc["fingerprints"] = json::object();
    }
    json entry;
    entry["stage"] = stage;
    entry["status"] = "running";
    entry["started_at"] = iso_time_now();
    entry["software"] = kSoftwareVersion;
    entry["config"] = render_config(cfg);
    entry["threads"] = 1;
    entry["loss_reduction"] = "sum";
    entry["similarity_threshold_scope"] = "train similarity and test relevance";
    entry["outputs"] = json::array();
    doc["stages"].push_back(entry);
    stage_index_ = doc["stages"].size() - 1;
    started_ = steady_seconds();
    document_ = doc.dump(2);
    write();
}

void RunManifest::add_output(const fs::path& file) {
    json doc = json::parse(document_);
    doc["stages"][stage_index_]["outputs"].push_back(fs::relative(file, out_dir_).generic_string());
    document_ = doc.dump(2);
}

void RunManifest::add_fingerprint(const std::string& key, const std::string& value) {
    json doc = json::parse(document_);
    doc["fingerprints"][key] = value;
    document_ = doc.dump(2);
}

void RunManifest::finish(bool ok, const std::string& message) {
    if (document_.empty()) return;
    json doc = json::parse(document_);
    json& entry = doc["stages"][stage_index_];
    entry["status"] = ok ? "finished" : "failed";
    entry["finished_at"] = iso_time_now();
    entry["wall_seconds"] = steady_seconds() - started_;
    if (!message.empty()) entry["message"] = message;
    document_ = doc.dump(2);
    write();
}

void RunManifest::write() const { write_text(path_in(out_dir_), document_ + "\n"); }

std::string file_checksum(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

fs::path split_path(const fs::path& out) { return out / "data" / "split.tsv"; }
fs::path similarity_path(const fs::path& out, const std::string& fold) {
    return out / "data" / ("similarity_" + fold + ".tsv");
}
fs::path checkpoint_path(const fs::path& out, const std::string& cell_id) {
    return out / "checkpoints" / (cell_id + ".hrnn");
}
fs::path code_path(const fs::path& out, const std::string& cell_id, Variant v, Side side) {
    const std::string ext = natural_mode(v) == EvalMode::hamming ? ".hrbc" : ".hrnn";
    return out / "codes" / (cell_id + "-" + to_string(v) + (side == Side::users ? "-users" : "-items") + ext);
}
fs::path reports_dir(const fs::path& out) { return out / "reports"; }

void save_model(const fs::path& out, const std::string& cell_id, const TrainedModel& model,
                const SplitPair& split) {
    const fs::path ckpt = checkpoint_path(out, cell_id);
    fs::create_directories(ckpt.parent_path());
    std::vector<const DenseMatrix*> tensors{&model.user_embeddings, &model.item_embeddings};
    std::size_t user_tensors = 0, item_tensors = 0;
    if (model.user_encoder && model.item_encoder) {
        for (const DenseMatrix* t : parameter_tensors(*model.user_encoder)) tensors.push_back(t), ++user_tensors;
        for (const DenseMatrix* t : parameter_tensors(*model.item_encoder)) tensors.push_back(t), ++item_tensors;
    }
    save_tensors(ckpt, tensors);

    json j;
    j["manifest"] = kManifestRef;
    j["cell"] = cell_id;
    j["kind"] = to_string(model.kind);
    j["config"] = train_config_json(model.config);
    j["final_alpha"] = model.final_alpha;
    j["loss_history"] = model.loss_history;
    j["warnings"] = model.warnings;
    j["diverged"] = model.diverged;
    j["tensors"] = {{"embeddings", 2}, {"user_encoder", user_tensors}, {"item_encoder", item_tensors}};
    j["data"] = {{"users", split.train.num_users()},
                 {"items", split.train.num_items()},
                 {"train_entries", split.train.size()},
                 {"test_entries", split.test.size()},
                 {"split_seed", split.seed},
                 {"similarity_threshold", model.config.similarity_threshold}};
    j["checksum"] = file_checksum(ckpt);
    write_text(fs::path(ckpt).replace_extension(".json"), j.dump(2) + "\n");
}

TrainedModel load_model(const fs::path& out, const std::string& cell_id) {
    const fs::path ckpt = checkpoint_path(out, cell_id);
    require_file(ckpt, "train");
    const json j = read_json(fs::path(ckpt).replace_extension(".json"), "train");
    std::vector<DenseMatrix> tensors = load_tensors(ckpt);

    TrainedModel m;
    m.kind = parse_model_kind(j.at("kind").get<std::string>());
    m.config = train_config_from_json(j.at("config"));
    m.final_alpha = j.at("final_alpha").get<double>();
    m.loss_history = j.at("loss_history").get<std::vector<double>>();
    m.warnings = j.at("warnings").get<std::vector<std::string>>();
    m.diverged = j.at("diverged").get<bool>();
    const std::size_t nu = j.at("tensors").at("user_encoder").get<std::size_t>();
    const std::size_t ni = j.at("tensors").at("item_encoder").get<std::size_t>();
    if (tensors.size() != 2 + nu + ni) throw IoError(ckpt.string() + ": tensor count disagrees with its manifest");
    m.user_embeddings = std::move(tensors[0]);
    m.item_embeddings = std::move(tensors[1]);
    if (nu > 0) {
        const std::size_t users = j.at("data").at("users").get<std::size_t>();
        const std::size_t items = j.at("data").at("items").get<std::size_t>();
        Rng rng(0);
        AutoencoderParams ue = make_autoencoder(autoencoder_shape(m.kind, m.config, items), rng);
        AutoencoderParams ie = make_autoencoder(autoencoder_shape(m.kind, m.config, users), rng);
        auto ut = parameter_tensors(ue);
        auto it = parameter_tensors(ie);
        if (ut.size() != nu || it.size() != ni) throw IoError(ckpt.string() + ": encoder layout mismatch");
        for (std::size_t k = 0; k < nu; ++k) {
            if (!ut[k]->same_shape(tensors[2 + k])) throw IoError(ckpt.string() + ": encoder shape mismatch");
            *ut[k] = std::move(tensors[2 + k]);
        }
        for (std::size_t k = 0; k < ni; ++k) {
            if (!it[k]->same_shape(tensors[2 + nu + k])) throw IoError(ckpt.string() + ": encoder shape mismatch");
            *it[k] = std::move(tensors[2 + nu + k]);
        }
        m.user_encoder = std::move(ue);
        m.item_encoder = std::move(ie);
    }
    m.trained = true;
    return m;
}

std::vector<GridCell> select_cells(const ExperimentConfig& cfg, const std::vector<std::string>& selector) {
    const std::vector<GridCell> all = cfg.cells();
    if (selector.empty()) return all;
    std::vector<GridCell> out;
    for (const std::string& id : selector) {
        const auto it = std::find_if(all.begin(), all.end(), [&](const GridCell& c) { return c.id() == id; });
        if (it == all.end()) {
            std::string known;
            for (const GridCell& c : all) known += " " + c.id();
            throw ContractError("no grid cell '" + id + "'; known cells:" + known);
        }
        out.push_back(*it);
    }
    return out;
}

void run_parallel(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, count));
    if (jobs == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr first;
    std::mutex mu;
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
        workers.emplace_back([&] {
            while (!failed) {
                const std::size_t i = next++;
                if (i >= count) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!first) first = std::current_exception();
                    failed = true;
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (first) std::rethrow_exception(first);
}

namespace {

// Runs a stage body inside begin/finish so failures are recorded too.
template <typename Body>
void staged(const ExperimentConfig& cfg, const std::string& stage, Body body) {
    RunManifest manifest(cfg.out_dir);
    manifest.begin(stage, cfg);
    try {
        body(manifest);
    } catch (const std::exception& e) {
        manifest.finish(false, e.what());
        throw;
    }
    manifest.finish(true);
}

void print_stats_row(std::ostream& log, const std::string& name, const DatasetStats& s) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-22s %8zu %8zu %10zu %8.2f%%\n", name.c_str(), s.users, s.items, s.ratings,
                  100.0 * s.density);
    log << buf;
}

}  // namespace

void cmd_prepare(const ExperimentConfig& cfg, std::ostream& log) {
    staged(cfg, "prepare", [&](RunManifest& manifest) {
        const DatasetSpec& d = cfg.dataset;
        std::optional<DatasetStats> id_range;
        RatingMatrix ratings = [&] {
            if (d.source == "synthetic") return synthesize_ratings(d.synthetic);
            if (!fs::exists(d.path)) throw IoError("dataset file not found: " + d.path.string());
            if (d.format == RatingFormat::movielens_dat) id_range = id_range_stats(d.path, d.format);
            return load_ratings(d.path, d.format);
        }();
        if (d.source == "file") manifest.add_fingerprint("source_checksum", file_checksum(d.path));
        const DatasetStats loaded = stats(ratings);
        ratings = filter_min_interactions(ratings, d.min_user, d.min_item);
        const DatasetStats filtered = stats(ratings);
        if (d.subsample_users > 0) ratings = subsample_users(ratings, d.subsample_users, d.seed);
        const SplitPair sp = split(ratings, d.protocol, d.train_ratio, d.seed);

        char header[160];
        std::snprintf(header, sizeof header, "%-22s %8s %8s %10s %9s\n", "Dataset", "#Users", "#Items", "#Ratings",
                      "Density");
        log << header;
        if (id_range) print_stats_row(log, d.name + " (id range)", *id_range);
        print_stats_row(log, d.name, loaded);
        if (d.min_user > 0 || d.min_item > 0) print_stats_row(log, d.name + " (filtered)", filtered);
        if (d.subsample_users > 0) print_stats_row(log, d.name + " (subsample)", stats(ratings));

        const fs::path out = cfg.out_dir;
        fs::create_directories(split_path(out).parent_path());
        save_split(split_path(out), sp);
        save_similarity(similarity_path(out, "train"), derive_similarity(sp.train, d.similarity_threshold));
        save_similarity(similarity_path(out, "test"), derive_similarity(sp.test, d.similarity_threshold));
        for (const fs::path& p : {split_path(out), similarity_path(out, "train"), similarity_path(out, "test")}) {
            manifest.add_output(p);
        }
        manifest.add_fingerprint("split_checksum", file_checksum(split_path(out)));
        manifest.add_fingerprint("users", std::to_string(sp.train.num_users()));
        manifest.add_fingerprint("items", std::to_string(sp.train.num_items()));
        manifest.add_fingerprint("train_entries", std::to_string(sp.train.size()));
        manifest.add_fingerprint("test_entries", std::to_string(sp.test.size()));
        manifest.add_fingerprint("split_seed", std::to_string(sp.seed));
        log << "split: " << sp.train.size() << " train / " << sp.test.size() << " test entries -> "
            << split_path(out).string() << '\n';
    });
}

void cmd_train(const ExperimentConfig& cfg, const std::vector<std::string>& selector, std::size_t jobs,
               std::ostream& log) {
    staged(cfg, "train", [&](RunManifest& manifest) {
        const std::vector<GridCell> cells = select_cells(cfg, selector);
        if (cells.empty()) {
            log << "no trainable cells in the grid\n";
            return;
        }
        require_file(split_path(cfg.out_dir), "prepare");
        const SplitPair sp = load_split(split_path(cfg.out_dir));
        std::mutex mu;
        run_parallel(cells.size(), jobs, [&](std::size_t c) {
            const GridCell& cell = cells[c];
            const auto t0 = steady_seconds();
            const TrainedModel model = train_model(cell.kind, sp.train, cfg.resolve(cell));
            save_model(cfg.out_dir, cell.id(), model, sp);
            std::lock_guard lock(mu);
            manifest.add_output(checkpoint_path(cfg.out_dir, cell.id()));
            char buf[200];
            std::snprintf(buf, sizeof buf, "trained %-22s epochs %3zu final loss %.6g  %.1fs%s\n", cell.id().c_str(),
                          model.loss_history.size(), model.loss_history.empty() ? 0.0 : model.loss_history.back(),
                          steady_seconds() - t0, model.diverged ? "  (diverged, kept last finite state)" : "");
            log << buf;
            for (const std::string& w : model.warnings) log << "  warning: " << w << '\n';
        });
    });
}

void cmd_encode(const ExperimentConfig& cfg, const std::vector<std::string>& selector, std::ostream& log) {
    staged(cfg, "encode", [&](RunManifest& manifest) {
        for (const GridCell& cell : select_cells(cfg, selector)) {
            const TrainedModel model = load_model(cfg.out_dir, cell.id());
            for (Variant v : cell.variants) {
                const CodeSet codes =
                    make_codes(model.kind, v, model.user_embeddings, model.item_embeddings, model.final_alpha);
                const fs::path up = code_path(cfg.out_dir, cell.id(), v, Side::users);
                const fs::path ip = code_path(cfg.out_dir, cell.id(), v, Side::items);
                fs::create_directories(up.parent_path());
                if (codes.mode == EvalMode::hamming) {
                    save_codes(up, codes.user_codes);
                    save_codes(ip, codes.item_codes);
                } else {
                    save_tensors(up, std::span<const DenseMatrix>(&codes.user_features, 1));
                    save_tensors(ip, std::span<const DenseMatrix>(&codes.item_features, 1));
                }
                manifest.add_output(up);
                manifest.add_output(ip);
                log << "encoded " << cell.id() << " " << to_string(v) << '\n';
            }
        }
    });
}

void cmd_evaluate(const ExperimentConfig& cfg, std::ostream& log) {
    staged(cfg, "evaluate", [&](RunManifest& manifest) {
        const PreparedData data = load_prepared(cfg.out_dir);
        std::vector<MetricsReport> reports;
        for (ModelKind kind : cfg.baselines()) {
            reports.push_back(evaluate_baseline(kind, data.split, data.sim_test, cfg.ks,
                                                cell_seed(cfg.train.seed, to_string(kind)), cfg.eval));
        }
        for (const GridCell& cell : cfg.cells()) {
            for (Variant v : cell.variants) {
                CodeSet codes;
                codes.variant = v;
                codes.mode = natural_mode(v);
                codes.code_bits = cell.code_dim;
                const fs::path up = code_path(cfg.out_dir, cell.id(), v, Side::users);
                const fs::path ip = code_path(cfg.out_dir, cell.id(), v, Side::items);
                require_file(up, "encode");
                require_file(ip, "encode");
                if (codes.mode == EvalMode::hamming) {
                    codes.user_codes = load_codes(up);
                    codes.item_codes = load_codes(ip);
                } else {
                    auto ut = load_tensors(up);
                    auto it = load_tensors(ip);
                    if (ut.size() != 1 || it.size() != 1) throw IoError("expected one tensor in " + up.string());
                    codes.user_features = std::move(ut[0]);
                    codes.item_features = std::move(it[0]);
                }
                MetricsReport r = evaluate_codes(codes, data.split, data.sim_test, cfg.ks, cfg.eval);
                r.model = to_string(cell.kind);
                reports.push_back(std::move(r));
            }
        }
        if (reports.empty()) throw ContractError("the grid lists no models to evaluate");
        const fs::path dir = reports_dir(cfg.out_dir);
        fs::create_directories(dir);
        write_metrics_csv(dir / "metrics.csv", reports, kManifestRef);
        write_per_user_csv(dir / "per_user.csv", reports, kManifestRef);
        manifest.add_output(dir / "metrics.csv");
        manifest.add_output(dir / "per_user.csv");
        for (const MetricsReport& r : reports) {
            log << "evaluated " << r.model << ' ' << r.variant << ' ' << r.code_bits << "  users "
                << r.users.size() << " (skipped " << r.skipped_users << ")\n";
        }
    });
}

void cmd_report(const ExperimentConfig& cfg, std::ostream& log) {
    staged(cfg, "report", [&](RunManifest& manifest) {
        const fs::path dir = reports_dir(cfg.out_dir);
        require_file(dir / "metrics.csv", "evaluate");
        const std::vector<MetricRow> rows = read_metrics_csv(dir / "metrics.csv");
        std::string text;
        for (const std::string metric : {"ndcg", "recall"}) {
            text += (metric == "ndcg" ? "NDCG@k" : "Recall@k");
            text += " (columns @k/code length)\n" + render_table(rows, metric) + "\n";
        }
        log << text;
        write_text(dir / "table.txt", text);
        write_text(dir / "table.csv", "# manifest: " + kManifestRef + "\n" + render_wide_csv(rows));
        manifest.add_output(dir / "table.txt");
        manifest.add_output(dir / "table.csv");
    });
}

void cmd_gapstudy(const ExperimentConfig& cfg, std::ostream& log) {
    staged(cfg, "gapstudy", [&](RunManifest& manifest) {
        const PreparedData data = load_prepared(cfg.out_dir);
        std::vector<GapReport> gaps;
        for (const GridCell& cell : cfg.cells()) {
            if (!cell.tanh_schedule) continue;
            const TrainedModel model = load_model(cfg.out_dir, cell.id());
            gaps.push_back(st_sst_gap(to_string(model.kind), model.user_embeddings, model.item_embeddings,
                                      model.final_alpha, data.split, data.sim_test, cfg.ks, cfg.eval));
        }
        if (gaps.empty()) throw ContractError("gapstudy needs ST or SST entries in [grid] models");
        const fs::path dir = reports_dir(cfg.out_dir);
        fs::create_directories(dir);
        write_gap_csv(dir / "gap.csv", gaps, kManifestRef);
        manifest.add_output(dir / "gap.csv");
        for (const GapReport& g : gaps) {
            for (const GapEntry& e : g.entries) {
                char buf[200];
                std::snprintf(buf, sizeof buf, "%-6s r=%-3zu k=%-3zu NDCG ST %.4f SST %.4f (drop %+.2f%%)\n",
                              g.model.c_str(), g.code_bits, e.k, e.ndcg_st, e.ndcg_sst, 100.0 * e.ndcg_relative_drop);
                log << buf;
            }
        }
    });
}

void cmd_groups(const ExperimentConfig& cfg, const std::string& model_a, const std::string& model_b, std::size_t k,
                std::ostream& log) {
    staged(cfg, "groups", [&](RunManifest& manifest) {
        const ModelKind ka = parse_model_kind(model_a);
        const ModelKind kb = parse_model_kind(model_b);
        const PreparedData data = load_prepared(cfg.out_dir);
        const std::vector<std::size_t> ks{k};
        std::size_t compared = 0;
        for (std::size_t r : cfg.code_lengths) {
            const std::string id_a = GridCell{ka, false, r, {}}.id();
            const std::string id_b = GridCell{kb, false, r, {}}.id();
            if (!fs::exists(checkpoint_path(cfg.out_dir, id_a)) || !fs::exists(checkpoint_path(cfg.out_dir, id_b))) {
                continue;
            }
            const auto scores = [&](const std::string& id) {
                const TrainedModel m = load_model(cfg.out_dir, id);
                const CodeSet codes = make_codes(m.kind, Variant::C, m.user_embeddings, m.item_embeddings, 1.0);
                return evaluate_codes(codes, data.split, data.sim_test, ks, cfg.eval);
            };
            const MetricsReport a = scores(id_a);
            const MetricsReport b = scores(id_b);
            const auto groups =
                chi_square_group_analysis(a.user_ndcg[0], b.user_ndcg[0], a.users, data.split.train);
            const fs::path dir = reports_dir(cfg.out_dir);
            fs::create_directories(dir);
            const fs::path file = dir / ("groups-" + model_a + "-vs-" + model_b + "-r" + std::to_string(r) + ".csv");
            write_groups_csv(file, groups, kManifestRef);
            manifest.add_output(file);
            ++compared;
            if (groups.empty()) {
                log << "r=" << r << ": one group is empty, chi-squared analysis skipped\n";
                continue;
            }
            for (const GroupAnalysis& g : groups) {
                char buf[200];
                std::snprintf(buf, sizeof buf, "r=%-3zu %-12s chi2 %8.3f dof %zu %s (better %zu / worse %zu)\n", r,
                              g.characteristic.c_str(), g.chi2, g.dof, g.significant ? "significant" : "n.s.",
                              g.better, g.worse);
                log << buf;
            }
        }
        if (compared == 0) {
            throw ContractError("groups needs trained " + model_a + " and " + model_b +
                                " checkpoints at a shared code length; run `hashrec train` first");
        }
    });
}

}  // namespace hashrec
