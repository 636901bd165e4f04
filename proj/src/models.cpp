#include "hashrec/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "hashrec/binarize.hpp"
#include "hashrec/errors.hpp"
#include "hashrec/losses.hpp"

namespace hashrec {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

void note_epoch(TrainedModel& model, std::size_t epoch, double loss, const EpochCallback& on_epoch) {
    if (!model.loss_history.empty()) {
        const double prev = model.loss_history.back();
        if (prev > 0.0 && loss > 1.5 * prev) {
            std::ostringstream msg;
            msg << "epoch " << epoch << ": loss rose from " << prev << " to " << loss;
            model.warnings.push_back(msg.str());
        }
    }
    model.loss_history.push_back(loss);
    if (on_epoch) on_epoch(epoch, loss);
}

void mark_diverged(TrainedModel& model, std::size_t epoch, const std::string& why) {
    model.diverged = true;
    model.warnings.push_back("diverged at epoch " + std::to_string(epoch) + ": " + why +
                             "; keeping the last finite state");
}

// ---------------------------------------------------------------- factorization

struct FactorProblem {
    std::vector<double> targets;  // per training entry
    std::vector<std::size_t> user_counts;
    std::vector<std::size_t> item_counts;
    double slope = 1.0;           // d prediction / d <u,i>
    double offset = 0.0;          // prediction = offset + slope * <u,i>
    bool clamp = false;
};

double factor_loss(const RatingMatrix& train, const FactorProblem& p, double lambda,
                   const DenseMatrix& fu, const DenseMatrix& fi) {
    double total = 0.0;
    const auto entries = train.entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const double pred = p.offset + p.slope * dot(fu.row(entries[k].user), fi.row(entries[k].item));
        const double residual = p.targets[k] - pred;
        total += residual * residual;
    }
    return total + lambda * (squared_norm(fu) + squared_norm(fi));
}

// One SGD sweep updating only `side`. The regularizer of a row is spread
// evenly over that row's entries so a full sweep applies exactly 2*lambda*F.
void factor_sweep(const RatingMatrix& train, const FactorProblem& p, double lambda, double lr,
                  DenseMatrix& fu, DenseMatrix& fi, Side side, Rng& rng) {
    const auto entries = train.entries();
    std::vector<std::size_t> order(entries.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span(order));
    const std::size_t r = fu.cols();
    std::vector<double> grad(r);
    for (std::size_t k : order) {
        const Rating& e = entries[k];
        auto u = fu.row(e.user);
        auto i = fi.row(e.item);
        const double residual = p.targets[k] - (p.offset + p.slope * dot(u, i));
        auto target = side == Side::users ? u : i;
        const auto partner = side == Side::users ? i : u;
        const double count = static_cast<double>(side == Side::users ? p.user_counts[e.user]
                                                                     : p.item_counts[e.item]);
        for (std::size_t c = 0; c < r; ++c) {
            grad[c] = -2.0 * residual * p.slope * partner[c] + 2.0 * lambda * target[c] / count;
        }
        for (std::size_t c = 0; c < r; ++c) {
            double v = target[c] - lr * grad[c];
            if (p.clamp) v = std::clamp(v, -1.0, 1.0);
            target[c] = v;
        }
    }
}

TrainedModel train_factorization(ModelKind kind, const RatingMatrix& train, const TrainConfig& cfg,
                                 FactorProblem problem, const EpochCallback& on_epoch) {
    if (cfg.code_dim == 0) throw ContractError("code_dim must be at least 1");
    if (cfg.lambda < 0.0) throw ContractError("lambda must be non-negative");
    if (uses_tanh_schedule(cfg.binarization)) {
        throw ContractError("scaled tanh variants apply to autoencoder models only");
    }
    TrainedModel model;
    model.kind = kind;
    model.config = cfg;

    Rng rng(cfg.seed);
    const std::size_t r = cfg.code_dim;
    const double init = 0.1 / std::sqrt(static_cast<double>(r));
    DenseMatrix fu(train.num_users(), r), fi(train.num_items(), r);
    for (double& v : fu.values()) v = rng.uniform(-init, init);
    for (double& v : fi.values()) v = rng.uniform(-init, init);

    problem.user_counts = train.user_counts();
    problem.item_counts = train.item_counts();

    const std::size_t epochs = cfg.resolved_epochs(kind);
    const double lr = cfg.resolved_learning_rate(kind);
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        DenseMatrix keep_u = fu, keep_i = fi;
        factor_sweep(train, problem, cfg.lambda, lr, fu, fi, Side::users, rng);
        factor_sweep(train, problem, cfg.lambda, lr, fu, fi, Side::items, rng);
        const double loss = factor_loss(train, problem, cfg.lambda, fu, fi);
        if (!std::isfinite(loss) || !fu.all_finite() || !fi.all_finite()) {
            fu = std::move(keep_u);
            fi = std::move(keep_i);
            mark_diverged(model, epoch, "non-finite loss");
            break;
        }
        note_epoch(model, epoch, loss, on_epoch);
    }
    model.user_embeddings = std::move(fu);
    model.item_embeddings = std::move(fi);
    model.trained = true;
    return model;
}

// ---------------------------------------------------------------- autoencoders

enum class Interaction { similarity, rating };

struct StepPairs {
    std::vector<std::size_t> user_local;  // row in the user batch
    std::vector<std::size_t> item_local;  // row in the item batch
    std::vector<double> labels;
    std::vector<double> ratings;
    std::vector<std::size_t> items;       // distinct item ids, ascending
};

// Builds the pairs of one user batch. Similarity: all positives of each user
// plus negative_ratio times as many uniformly drawn non-positives. Rating:
// every observed training entry of each user.
StepPairs collect_pairs(std::span<const std::size_t> users, const RatingMatrix& train,
                        const SimilarityMatrix* sim, Interaction interaction, double negative_ratio,
                        Rng& rng, std::vector<std::int64_t>& item_slot) {
    struct Raw {
        std::size_t user_local;
        Index item;
        double label;
        double rating;
    };
    std::vector<Raw> raw;
    const std::size_t n_items = train.num_items();
    for (std::size_t b = 0; b < users.size(); ++b) {
        const Index u = static_cast<Index>(users[b]);
        if (interaction == Interaction::rating) {
            for (const Rating& e : train.user_row(u)) raw.push_back({b, e.item, 1.0, double(e.value)});
            continue;
        }
        const auto positives = sim->positives_of(u);
        for (Index i : positives) raw.push_back({b, i, 1.0, 0.0});
        if (positives.size() >= n_items) continue;
        const auto wanted = static_cast<std::size_t>(std::llround(negative_ratio * double(positives.size())));
        const std::size_t available = n_items - positives.size();
        const std::size_t n_neg = std::min(wanted, available);
        for (std::size_t k = 0; k < n_neg; ++k) {
            Index candidate;
            do {
                candidate = static_cast<Index>(rng.below(n_items));
            } while (std::binary_search(positives.begin(), positives.end(), candidate));
            raw.push_back({b, candidate, 0.0, 0.0});
        }
    }

    StepPairs pairs;
    for (const Raw& p : raw) {
        if (item_slot[p.item] < 0) {
            item_slot[p.item] = 0;
            pairs.items.push_back(p.item);
        }
    }
    std::sort(pairs.items.begin(), pairs.items.end());
    for (std::size_t k = 0; k < pairs.items.size(); ++k) item_slot[pairs.items[k]] = static_cast<std::int64_t>(k);
    for (const Raw& p : raw) {
        pairs.user_local.push_back(p.user_local);
        pairs.item_local.push_back(static_cast<std::size_t>(item_slot[p.item]));
        pairs.labels.push_back(p.label);
        pairs.ratings.push_back(p.rating);
    }
    for (std::size_t item : pairs.items) item_slot[item] = -1;
    return pairs;
}

// Applies tanh(alpha * f) in place and returns the elementwise derivative.
DenseMatrix apply_scaled_tanh(DenseMatrix& codes, double alpha) {
    DenseMatrix deriv(codes.rows(), codes.cols());
    double* c = codes.data();
    double* d = deriv.data();
    for (std::size_t k = 0; k < codes.size(); ++k) {
        c[k] = std::tanh(alpha * c[k]);
        d[k] = alpha * (1.0 - c[k] * c[k]);
    }
    return deriv;
}

void multiply_in_place(DenseMatrix& a, const DenseMatrix& b) {
    double* x = a.data();
    const double* y = b.data();
    for (std::size_t k = 0; k < a.size(); ++k) x[k] *= y[k];
}

DenseMatrix encode_all(const AutoencoderParams& params, const DenseMatrix& inputs) {
    constexpr std::size_t kChunk = 1024;
    DenseMatrix out(inputs.rows(), params.code_dim);
    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < inputs.rows(); start += kChunk) {
        rows.resize(std::min(kChunk, inputs.rows() - start));
        std::iota(rows.begin(), rows.end(), start);
        const ForwardResult f = forward(params, gather_rows(inputs, rows), Mode::eval, 0);
        for (std::size_t k = 0; k < rows.size(); ++k) {
            std::copy(f.code.row(k).begin(), f.code.row(k).end(), out.row(start + k).begin());
        }
    }
    return out;
}

TrainedModel train_twin_autoencoders(ModelKind kind, const RatingMatrix& train, const SimilarityMatrix* sim,
                                     const TrainConfig& cfg, Interaction interaction,
                                     const EpochCallback& on_epoch) {
    if (cfg.code_dim == 0) throw ContractError("code_dim must be at least 1");
    if (cfg.lambda_ae < 0.0 || cfg.lambda_b < 0.0) throw ContractError("loss weights must be non-negative");
    if (cfg.batch_size == 0) throw ContractError("batch_size must be at least 1");
    if (train.num_users() == 0 || train.num_items() == 0) throw EmptyDatasetError("empty training fold");

    TrainedModel model;
    model.kind = kind;
    model.config = cfg;

    Rng rng(cfg.seed);
    const DenseMatrix x_all = user_inputs(train, cfg.input_scale);
    const DenseMatrix y_all = item_inputs(train, cfg.input_scale);

    AutoencoderParams user_ae = make_autoencoder(autoencoder_shape(kind, cfg, train.num_items()), rng);
    AutoencoderParams item_ae = make_autoencoder(autoencoder_shape(kind, cfg, train.num_users()), rng);

    const double lr = cfg.resolved_learning_rate(kind);
    OptimizerState user_opt = make_optimizer(OptimizerKind::adam, lr);
    OptimizerState item_opt = make_optimizer(OptimizerKind::adam, lr);

    const std::size_t epochs = cfg.resolved_epochs(kind);
    const bool st = uses_tanh_schedule(cfg.binarization);
    // epoch e (0-based) trains at alpha(e + 1), so the last epoch sits at final_alpha
    const AlphaSchedule schedule =
        (st && epochs > 0) ? AlphaSchedule::reaching(cfg.final_alpha, epochs) : AlphaSchedule{};
    model.final_alpha = st ? schedule.at(epochs) : 1.0;

    std::vector<std::size_t> order(train.num_users());
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::int64_t> item_slot(train.num_items(), -1);

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const double alpha = schedule.at(epoch + 1);
        const AutoencoderParams keep_user = user_ae;
        const AutoencoderParams keep_item = item_ae;
        rng.shuffle(std::span(order));
        double epoch_loss = 0.0;
        bool failed = false;

        for (std::size_t start = 0; start < order.size() && !failed; start += cfg.batch_size) {
            const std::span<const std::size_t> users(order.data() + start,
                                                     std::min(cfg.batch_size, order.size() - start));
            const std::uint64_t step_seed = mix(cfg.seed, epoch * 1000003ULL + start);
            StepPairs pairs = collect_pairs(users, train, sim, interaction, cfg.negative_ratio, rng, item_slot);
            if (pairs.labels.empty()) continue;

            const DenseMatrix x = gather_rows(x_all, users);
            const DenseMatrix y = gather_rows(y_all, pairs.items);
            ForwardResult fu = forward(user_ae, x, Mode::train, mix(step_seed, 1));
            ForwardResult fi = forward(item_ae, y, Mode::train, mix(step_seed, 2));

            DenseMatrix cu = fu.code, ci = fi.code;
            DenseMatrix du_tanh, di_tanh;
            if (st) {
                du_tanh = apply_scaled_tanh(cu, alpha);
                di_tanh = apply_scaled_tanh(ci, alpha);
            }

            PairBatch batch{gather_rows(cu, pairs.user_local), gather_rows(ci, pairs.item_local),
                            pairs.labels, std::nullopt};
            DenseMatrix grad_cu(cu.rows(), cu.cols()), grad_ci(ci.rows(), ci.cols());
            DenseMatrix grad_x_hat, grad_y_hat;
            double step_loss = 0.0;
            if (interaction == Interaction::similarity) {
                CcsrAuxTerms aux{cu, ci, x, fu.reconstruction, y, fi.reconstruction};
                LossValue loss = ccsr_total_loss(batch, aux, cfg.lambda_b, cfg.lambda_ae);
                step_loss = loss.value;
                scatter_add_rows(grad_cu, pairs.user_local, loss.gradients[0]);
                scatter_add_rows(grad_ci, pairs.item_local, loss.gradients[1]);
                axpy(grad_cu, 1.0, loss.gradients[2]);
                axpy(grad_ci, 1.0, loss.gradients[3]);
                grad_x_hat = std::move(loss.gradients[4]);
                grad_y_hat = std::move(loss.gradients[5]);
            } else {
                batch.ratings = pairs.ratings;
                LossValue rating = rating_reconstruction_loss(batch);
                LossValue ae = ae_loss(x, fu.reconstruction, y, fi.reconstruction);
                step_loss = rating.value + cfg.lambda_ae * ae.value;
                scatter_add_rows(grad_cu, pairs.user_local, rating.gradients[0]);
                scatter_add_rows(grad_ci, pairs.item_local, rating.gradients[1]);
                grad_x_hat = std::move(ae.gradients[0]);
                grad_y_hat = std::move(ae.gradients[1]);
                for (double& v : grad_x_hat.values()) v *= cfg.lambda_ae;
                for (double& v : grad_y_hat.values()) v *= cfg.lambda_ae;
            }
            if (st) {
                multiply_in_place(grad_cu, du_tanh);
                multiply_in_place(grad_ci, di_tanh);
            }
            if (!std::isfinite(step_loss)) {
                failed = true;
                break;
            }
            try {
                const Gradients gu = backward(user_ae, fu.cache, grad_cu, grad_x_hat);
                const Gradients gi = backward(item_ae, fi.cache, grad_ci, grad_y_hat);
                optimizer_step(user_opt, user_ae, gu);
                optimizer_step(item_opt, item_ae, gi);
            } catch (const TrainingDiverged&) {
                failed = true;
                break;
            }
            epoch_loss += step_loss;
        }

        if (failed) {
            user_ae = keep_user;
            item_ae = keep_item;
            mark_diverged(model, epoch, "non-finite loss or gradient");
            break;
        }
        note_epoch(model, epoch, epoch_loss, on_epoch);
    }

    model.user_embeddings = encode_all(user_ae, x_all);
    model.item_embeddings = encode_all(item_ae, y_all);
    model.user_encoder = std::move(user_ae);
    model.item_encoder = std::move(item_ae);
    model.trained = true;
    return model;
}

}  // namespace

std::string to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::random:
            return "random";
        case ModelKind::top:
            return "top";
        case ModelKind::cf:
            return "cf";
        case ModelKind::cfcodereg:
            return "cfcodereg";
        case ModelKind::aecf:
            return "aecf";
        case ModelKind::ccsr:
            return "ccsr";
    }
    return "?";
}

ModelKind parse_model_kind(const std::string& name) {
    for (ModelKind k : {ModelKind::random, ModelKind::top, ModelKind::cf, ModelKind::cfcodereg,
                        ModelKind::aecf, ModelKind::ccsr}) {
        if (to_string(k) == name) return k;
    }
    throw ContractError("unknown model kind '" + name + "'");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::S:
            return "S";
        case Variant::ST:
            return "ST";
        case Variant::SST:
            return "SST";
        case Variant::C:
            return "C";
    }
    return "?";
}

Variant parse_variant(const std::string& name) {
    for (Variant v : {Variant::S, Variant::ST, Variant::SST, Variant::C}) {
        if (to_string(v) == name) return v;
    }
    throw ContractError("unknown binarization variant '" + name + "'");
}

std::string to_string(CodeRegTarget t) {
    switch (t) {
        case CodeRegTarget::scaled:
            return "scaled";
        case CodeRegTarget::similarity:
            return "similarity";
        case CodeRegTarget::raw:
            return "raw";
    }
    return "?";
}

CodeRegTarget parse_code_reg_target(const std::string& name) {
    for (CodeRegTarget t : {CodeRegTarget::scaled, CodeRegTarget::similarity, CodeRegTarget::raw}) {
        if (to_string(t) == name) return t;
    }
    throw ContractError("unknown cfcodereg target '" + name + "'");
}

bool is_autoencoder(ModelKind kind) { return kind == ModelKind::aecf || kind == ModelKind::ccsr; }
bool is_factorization(ModelKind kind) { return kind == ModelKind::cf || kind == ModelKind::cfcodereg; }
bool is_baseline(ModelKind kind) { return kind == ModelKind::random || kind == ModelKind::top; }
bool uses_tanh_schedule(Variant v) { return v == Variant::ST || v == Variant::SST; }

std::size_t TrainConfig::resolved_epochs(ModelKind kind) const {
    if (epochs) return *epochs;
    return is_autoencoder(kind) ? 30 : 100;
}

double TrainConfig::resolved_learning_rate(ModelKind kind) const {
    if (learning_rate) return *learning_rate;
    return is_autoencoder(kind) ? 1e-3 : 0.01;
}

double TrainConfig::resolved_dropout() const {
    if (dropout_rate) return *dropout_rate;
    return code_dim <= 20 ? 0.6 : 0.8;
}

std::vector<std::size_t> TrainConfig::resolved_hidden(ModelKind kind) const {
    if (hidden) return *hidden;
    if (kind == ModelKind::aecf) return {512, 256, 128};
    return {128};
}

AutoencoderShape autoencoder_shape(ModelKind kind, const TrainConfig& cfg, std::size_t input_dim) {
    AutoencoderShape shape;
    shape.input_dim = input_dim;
    shape.hidden = cfg.resolved_hidden(kind);
    shape.code_dim = cfg.code_dim;
    shape.dropout_rate = cfg.resolved_dropout();
    return shape;
}

TrainedModel train_cf(const RatingMatrix& train, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    FactorProblem p;
    for (const Rating& e : train.entries()) p.targets.push_back(e.value);
    return train_factorization(ModelKind::cf, train, cfg, std::move(p), on_epoch);
}

TrainedModel train_cfcodereg(const RatingMatrix& train, const TrainConfig& cfg,
                             const EpochCallback& on_epoch) {
    FactorProblem p;
    for (const Rating& e : train.entries()) {
        switch (cfg.code_reg_target) {
            case CodeRegTarget::scaled:
                p.targets.push_back((e.value - 1.0) / 4.0);
                break;
            case CodeRegTarget::similarity:
                p.targets.push_back(e.value > cfg.similarity_threshold ? 1.0 : 0.0);
                break;
            case CodeRegTarget::raw:
                p.targets.push_back(e.value);
                break;
        }
    }
    p.slope = 1.0 / (2.0 * static_cast<double>(std::max<std::size_t>(cfg.code_dim, 1)));
    p.offset = 0.5;
    p.clamp = true;
    return train_factorization(ModelKind::cfcodereg, train, cfg, std::move(p), on_epoch);
}

TrainedModel train_aecf(const RatingMatrix& train, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    return train_twin_autoencoders(ModelKind::aecf, train, nullptr, cfg, Interaction::rating, on_epoch);
}

TrainedModel train_ccsr(const RatingMatrix& train, const SimilarityMatrix& sim, const TrainConfig& cfg,
                        const EpochCallback& on_epoch) {
    if (sim.num_users() != train.num_users() || sim.num_items() != train.num_items()) {
        throw ContractError("similarity matrix does not match the training fold");
    }
    return train_twin_autoencoders(ModelKind::ccsr, train, &sim, cfg, Interaction::similarity, on_epoch);
}

TrainedModel train_model(ModelKind kind, const RatingMatrix& train, const TrainConfig& cfg,
                         const EpochCallback& on_epoch) {
    switch (kind) {
        case ModelKind::cf:
            return train_cf(train, cfg, on_epoch);
        case ModelKind::cfcodereg:
            return train_cfcodereg(train, cfg, on_epoch);
        case ModelKind::aecf:
            return train_aecf(train, cfg, on_epoch);
        case ModelKind::ccsr:
            return train_ccsr(train, derive_similarity(train, cfg.similarity_threshold), cfg, on_epoch);
        case ModelKind::random:
        case ModelKind::top:
            break;
    }
    TrainedModel model;
    model.kind = kind;
    model.config = cfg;
    model.trained = true;
    return model;
}

DenseMatrix user_inputs(const RatingMatrix& r, double scale) {
    DenseMatrix x(r.num_users(), r.num_items());
    for (const Rating& e : r.entries()) x(e.user, e.item) = scale * e.value;
    return x;
}

DenseMatrix item_inputs(const RatingMatrix& r, double scale) {
    DenseMatrix y(r.num_items(), r.num_users());
    for (const Rating& e : r.entries()) y(e.item, e.user) = scale * e.value;
    return y;
}

DenseMatrix encode(const TrainedModel& model, Side side, const RatingMatrix& train) {
    if (!model.trained) throw ContractError("encode: model has not been trained");
    if (!is_autoencoder(model.kind)) return encode(model, side);
    const auto& params = side == Side::users ? model.user_encoder : model.item_encoder;
    if (!params) throw ContractError("encode: autoencoder parameters missing");
    const DenseMatrix inputs = side == Side::users ? user_inputs(train, model.config.input_scale)
                                                   : item_inputs(train, model.config.input_scale);
    return encode_all(*params, inputs);
}

DenseMatrix encode(const TrainedModel& model, Side side) {
    if (!model.trained) throw ContractError("encode: model has not been trained");
    if (is_baseline(model.kind)) throw ContractError("encode: baselines have no embeddings");
    return side == Side::users ? model.user_embeddings : model.item_embeddings;
}

std::vector<Index> baseline_random(std::size_t n_items, std::size_t k, std::uint64_t seed) {
    if (k > n_items) throw ContractError("baseline_random: k exceeds item count");
    std::vector<Index> items(n_items);
    std::iota(items.begin(), items.end(), 0);
    Rng rng(seed);
    rng.shuffle(std::span(items));
    items.resize(k);
    return items;
}

std::vector<Index> baseline_top(const RatingMatrix& train, std::size_t k) {
    if (k > train.num_items()) throw ContractError("baseline_top: k exceeds item count");
    const std::vector<std::size_t> counts = train.item_counts();
    std::vector<Index> items(train.num_items());
    std::iota(items.begin(), items.end(), 0);
    std::stable_sort(items.begin(), items.end(),
                     [&](Index a, Index b) { return counts[a] > counts[b]; });
    items.resize(k);
    return items;
}

}  // namespace hashrec
