#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hashrec/dense.hpp"
#include "hashrec/rng.hpp"

namespace hashrec {

enum class Activation { identity, sigmoid, tanh };

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);

/// y = x * weight + bias; weight is fan_in x fan_out, bias is 1 x fan_out.
struct DenseLayer {
    DenseMatrix weight;
    DenseMatrix bias;
};

/// Encoder/decoder pair. Hidden layers use `hidden`, the last encoder layer
/// uses `code_activation` and the last decoder layer `output_activation`.
/// Dropout is applied to the input of the last encoder layer.
struct AutoencoderParams {
    std::vector<DenseLayer> encoder;
    std::vector<DenseLayer> decoder;
    Activation hidden = Activation::tanh;
    Activation code_activation = Activation::identity;
    Activation output_activation = Activation::identity;
    double dropout_rate = 0.0;
    std::size_t code_dim = 0;
    // bumped by every parameter update; forward caches remember it
    std::uint64_t generation = 0;

    std::size_t input_dim() const { return encoder.empty() ? 0 : encoder.front().weight.rows(); }
};

struct AutoencoderShape {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden;  // encoder hidden widths; the decoder mirrors them
    std::size_t code_dim = 0;
    Activation hidden_activation = Activation::tanh;
    Activation code_activation = Activation::identity;
    Activation output_activation = Activation::identity;
    double dropout_rate = 0.0;
};

/// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
AutoencoderParams make_autoencoder(const AutoencoderShape& shape, Rng& rng);

/// Flat view over every weight and bias: encoder layers then decoder layers,
/// weight before bias within a layer.
std::vector<DenseMatrix*> parameter_tensors(AutoencoderParams& params);
std::vector<const DenseMatrix*> parameter_tensors(const AutoencoderParams& params);

enum class Mode { train, eval };

struct ForwardCache {
    std::uint64_t generation = 0;
    const AutoencoderParams* owner = nullptr;
    std::vector<DenseMatrix> inputs;   // input of each layer (after dropout for the masked one)
    std::vector<DenseMatrix> outputs;  // post-activation output of each layer
    DenseMatrix dropout_mask;          // empty when no dropout was applied
    std::size_t dropout_layer = 0;
};

struct ForwardResult {
    DenseMatrix code;
    DenseMatrix reconstruction;
    ForwardCache cache;
};

/// Runs encoder then decoder. In train mode inverted dropout (keep
/// probability 1 - rate, survivors scaled by 1/keep) is drawn from `seed`;
/// eval mode is deterministic.
ForwardResult forward(const AutoencoderParams& params, const DenseMatrix& x, Mode mode,
                      std::uint64_t seed);

/// Gradients for every tensor, in parameter_tensors order.
using Gradients = std::vector<DenseMatrix>;

/// Back-propagates upstream gradients on the code and on the reconstruction.
/// Either may be empty (0x0) to mean zero.
Gradients backward(const AutoencoderParams& params, const ForwardCache& cache,
                   const DenseMatrix& grad_code, const DenseMatrix& grad_reconstruction);

enum class OptimizerKind { sgd, adam };

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    std::vector<DenseMatrix> first_moment;
    std::vector<DenseMatrix> second_moment;
};

OptimizerState make_optimizer(OptimizerKind kind, double learning_rate);

/// Applies one update in place. Throws TrainingDiverged on a non-finite
/// gradient, leaving the parameters untouched.
void optimizer_step(OptimizerState& state, std::span<DenseMatrix* const> params,
                    std::span<const DenseMatrix> grads);
void optimizer_step(OptimizerState& state, AutoencoderParams& params, const Gradients& grads);

/// Loss value and gradient at a flat parameter vector.
using LossAndGradient = std::function<double(std::span<const double> point, std::vector<double>* grad)>;

struct FiniteDiffReport {
    double max_relative_error = 0.0;
    std::size_t coordinates_checked = 0;
    std::size_t worst_coordinate = 0;
};

/// Central differences on up to `sample` coordinates (all of them when the
/// vector is shorter). Relative error is |analytic - numeric| / max(1e-8, |numeric|).
FiniteDiffReport finite_diff_check(const LossAndGradient& loss, std::span<const double> point,
                                   double epsilon, std::size_t sample = 200,
                                   std::uint64_t seed = 0);

/// Copies tensors into one flat vector and back.
std::vector<double> flatten(std::span<const DenseMatrix* const> tensors);
void unflatten(std::span<const double> flat, std::span<DenseMatrix* const> tensors);

}  // namespace hashrec
