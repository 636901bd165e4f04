#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hashrec/dataset.hpp"
#include "hashrec/dense.hpp"
#include "hashrec/nn.hpp"

namespace hashrec {

enum class ModelKind { random, top, cf, cfcodereg, aecf, ccsr };

/// S: sign after training. ST: scaled tanh during training, continuous
/// output. SST: sign of the ST output. C: raw continuous features.
enum class Variant { S, ST, SST, C };

/// How CFcodeReg turns stored ratings into regression targets.
enum class CodeRegTarget {
    scaled,      // (R - 1) / 4, in [0, 1]
    similarity,  // 1 if R > threshold else 0
    raw,
};

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);
std::string to_string(Variant v);
Variant parse_variant(const std::string& name);
std::string to_string(CodeRegTarget t);
CodeRegTarget parse_code_reg_target(const std::string& name);

bool is_autoencoder(ModelKind kind);
bool is_factorization(ModelKind kind);
bool is_baseline(ModelKind kind);
/// ST and SST share one training run that applies the tanh schedule.
bool uses_tanh_schedule(Variant v);

struct TrainConfig {
    std::size_t code_dim = 40;
    std::optional<std::size_t> epochs;         // 30 for autoencoders, 100 for MF
    std::size_t batch_size = 256;
    std::optional<double> learning_rate;       // Adam 1e-3 for autoencoders, SGD 0.01 for MF
    double lambda = 0.4;
    double lambda_ae = 0.1;
    double lambda_b = 0.0001;
    std::optional<double> dropout_rate;        // 0.6 for r <= 20, 0.8 above
    Variant binarization = Variant::S;
    double final_alpha = 200.0;
    double negative_ratio = 1.0;
    std::optional<std::vector<std::size_t>> hidden;  // {512,256,128} AECF, {128} CCSR
    double input_scale = 1.0;
    CodeRegTarget code_reg_target = CodeRegTarget::scaled;
    int similarity_threshold = 3;
    std::uint64_t seed = 1;

    std::size_t resolved_epochs(ModelKind kind) const;
    double resolved_learning_rate(ModelKind kind) const;
    double resolved_dropout() const;
    std::vector<std::size_t> resolved_hidden(ModelKind kind) const;
};

/// Layer layout of one side's autoencoder; `input_dim` is the other side's count.
AutoencoderShape autoencoder_shape(ModelKind kind, const TrainConfig& cfg, std::size_t input_dim);

struct TrainedModel {
    ModelKind kind = ModelKind::cf;
    TrainConfig config;
    DenseMatrix user_embeddings;  // continuous features, one row per user
    DenseMatrix item_embeddings;
    std::optional<AutoencoderParams> user_encoder;
    std::optional<AutoencoderParams> item_encoder;
    std::vector<double> loss_history;
    std::vector<std::string> warnings;
    double final_alpha = 1.0;  // alpha at the last epoch of the tanh schedule
    bool trained = false;
    bool diverged = false;
};

/// Called after each epoch with (epoch index, epoch loss).
using EpochCallback = std::function<void(std::size_t, double)>;

TrainedModel train_cf(const RatingMatrix& train, const TrainConfig& cfg, const EpochCallback& on_epoch = {});
TrainedModel train_cfcodereg(const RatingMatrix& train, const TrainConfig& cfg,
                             const EpochCallback& on_epoch = {});
TrainedModel train_aecf(const RatingMatrix& train, const TrainConfig& cfg, const EpochCallback& on_epoch = {});
/// `sim` must come from the training fold only.
TrainedModel train_ccsr(const RatingMatrix& train, const SimilarityMatrix& sim, const TrainConfig& cfg,
                        const EpochCallback& on_epoch = {});

/// Dispatches on kind; baselines produce an untrained-but-valid model.
TrainedModel train_model(ModelKind kind, const RatingMatrix& train, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {});

/// Dense autoencoder inputs: rows of R (users) or of R^T (items), scaled.
DenseMatrix user_inputs(const RatingMatrix& r, double scale);
DenseMatrix item_inputs(const RatingMatrix& r, double scale);

enum class Side { users, items };

/// Continuous features from an eval-mode pass. Autoencoder kinds need the
/// training ratings they were fitted on; MF kinds return the stored factors.
DenseMatrix encode(const TrainedModel& model, Side side, const RatingMatrix& train);
DenseMatrix encode(const TrainedModel& model, Side side);

/// Seeded uniform sample without replacement; the same list for every user.
std::vector<Index> baseline_random(std::size_t n_items, std::size_t k, std::uint64_t seed);
/// Items by training rating count, descending; ties by id ascending.
std::vector<Index> baseline_top(const RatingMatrix& train, std::size_t k);

}  // namespace hashrec
