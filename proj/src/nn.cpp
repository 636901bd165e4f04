#include "hashrec/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hashrec/errors.hpp"

namespace hashrec {

namespace {

// rating rows are mostly zeros; below this density the first layer skips them
constexpr double kSparseInputDensity = 0.3;

double activate(Activation a, double z) {
    switch (a) {
        case Activation::sigmoid:
            return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        case Activation::tanh:
            return std::tanh(z);
        case Activation::identity:
            break;
    }
    return z;
}

// derivative expressed through the activation output
double derivative_from_output(Activation a, double y) {
    switch (a) {
        case Activation::sigmoid:
            return y * (1.0 - y);
        case Activation::tanh:
            return 1.0 - y * y;
        case Activation::identity:
            break;
    }
    return 1.0;
}

Activation layer_activation(const AutoencoderParams& p, std::size_t layer) {
    const std::size_t n_enc = p.encoder.size();
    const std::size_t n_all = n_enc + p.decoder.size();
    if (layer + 1 == n_enc) return p.code_activation;
    if (layer + 1 == n_all) return p.output_activation;
    return p.hidden;
}

const DenseLayer& layer_at(const AutoencoderParams& p, std::size_t layer) {
    return layer < p.encoder.size() ? p.encoder[layer] : p.decoder[layer - p.encoder.size()];
}

DenseLayer make_layer(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    DenseLayer layer{DenseMatrix(fan_in, fan_out), DenseMatrix(1, fan_out)};
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& w : layer.weight.values()) w = rng.uniform(-limit, limit);
    return layer;
}

}  // namespace

std::string to_string(Activation a) {
    switch (a) {
        case Activation::sigmoid:
            return "sigmoid";
        case Activation::tanh:
            return "tanh";
        case Activation::identity:
            break;
    }
    return "identity";
}

Activation parse_activation(const std::string& name) {
    if (name == "sigmoid") return Activation::sigmoid;
    if (name == "tanh") return Activation::tanh;
    if (name == "identity") return Activation::identity;
    throw ContractError("unknown activation '" + name + "'");
}

AutoencoderParams make_autoencoder(const AutoencoderShape& shape, Rng& rng) {
    if (shape.input_dim == 0 || shape.code_dim == 0) {
        throw ContractError("autoencoder needs positive input and code widths");
    }
    if (shape.dropout_rate < 0.0 || shape.dropout_rate >= 1.0) {
        throw ContractError("dropout rate must be in [0,1)");
    }
    std::vector<std::size_t> widths{shape.input_dim};
    widths.insert(widths.end(), shape.hidden.begin(), shape.hidden.end());
    widths.push_back(shape.code_dim);

    AutoencoderParams p;
    p.hidden = shape.hidden_activation;
    p.code_activation = shape.code_activation;
    p.output_activation = shape.output_activation;
    p.dropout_rate = shape.dropout_rate;
    p.code_dim = shape.code_dim;
    for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
        p.encoder.push_back(make_layer(widths[k], widths[k + 1], rng));
    }
    for (std::size_t k = widths.size() - 1; k > 0; --k) {
        p.decoder.push_back(make_layer(widths[k], widths[k - 1], rng));
    }
    return p;
}

std::vector<DenseMatrix*> parameter_tensors(AutoencoderParams& params) {
    std::vector<DenseMatrix*> out;
    for (auto* layers : {&params.encoder, &params.decoder}) {
        for (DenseLayer& l : *layers) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
    }
    return out;
}

std::vector<const DenseMatrix*> parameter_tensors(const AutoencoderParams& params) {
    std::vector<const DenseMatrix*> out;
    for (const auto* layers : {&params.encoder, &params.decoder}) {
        for (const DenseLayer& l : *layers) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
    }
    return out;
}

ForwardResult forward(const AutoencoderParams& params, const DenseMatrix& x, Mode mode,
                      std::uint64_t seed) {
    if (params.encoder.empty() || params.decoder.empty()) {
        throw ContractError("autoencoder has no layers");
    }
    if (x.cols() != params.input_dim()) {
        throw ShapeError("forward: input has " + std::to_string(x.cols()) + " columns, expected " +
                         std::to_string(params.input_dim()));
    }

    ForwardResult result;
    ForwardCache& cache = result.cache;
    cache.generation = params.generation;
    cache.owner = &params;
    cache.dropout_layer = params.encoder.size() - 1;

    const std::size_t n_layers = params.encoder.size() + params.decoder.size();
    DenseMatrix current = x;
    for (std::size_t l = 0; l < n_layers; ++l) {
        if (l == cache.dropout_layer && mode == Mode::train && params.dropout_rate > 0.0) {
            const double keep = 1.0 - params.dropout_rate;
            Rng rng(seed);
            cache.dropout_mask = DenseMatrix(current.rows(), current.cols());
            for (double& m : cache.dropout_mask.values()) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
            double* c = current.data();
            const double* m = cache.dropout_mask.data();
            for (std::size_t k = 0; k < current.size(); ++k) c[k] *= m[k];
        }
        const DenseLayer& layer = layer_at(params, l);
        DenseMatrix out = (l == 0 && density(current) < kSparseInputDensity)
                              ? sparse_matmul(current, layer.weight)
                              : matmul(current, layer.weight);
        const Activation act = layer_activation(params, l);
        const std::size_t width = out.cols();
        for (std::size_t r = 0; r < out.rows(); ++r) {
            auto row = out.row(r);
            for (std::size_t c = 0; c < width; ++c) row[c] = activate(act, row[c] + layer.bias(0, c));
        }
        cache.inputs.push_back(std::move(current));
        current = out;
        cache.outputs.push_back(std::move(out));
    }
    result.code = cache.outputs[params.encoder.size() - 1];
    result.reconstruction = cache.outputs.back();
    return result;
}

Gradients backward(const AutoencoderParams& params, const ForwardCache& cache,
                   const DenseMatrix& grad_code, const DenseMatrix& grad_reconstruction) {
    if (cache.owner != &params || cache.generation != params.generation) {
        throw ContractError("backward: cache does not belong to the current parameters");
    }
    const std::size_t n_enc = params.encoder.size();
    const std::size_t n_layers = n_enc + params.decoder.size();
    if (cache.outputs.size() != n_layers) throw ContractError("backward: incomplete cache");

    const DenseMatrix& code = cache.outputs[n_enc - 1];
    const DenseMatrix& recon = cache.outputs.back();
    const bool has_code_grad = grad_code.size() != 0;
    const bool has_recon_grad = grad_reconstruction.size() != 0;
    if (has_code_grad && !grad_code.same_shape(code)) throw ShapeError("backward: grad_code shape");
    if (has_recon_grad && !grad_reconstruction.same_shape(recon)) {
        throw ShapeError("backward: grad_reconstruction shape");
    }

    Gradients grads(2 * n_layers);
    DenseMatrix upstream = has_recon_grad ? grad_reconstruction : DenseMatrix(recon.rows(), recon.cols());
    for (std::size_t l = n_layers; l-- > 0;) {
        if (l == n_enc - 1 && has_code_grad) axpy(upstream, 1.0, grad_code);

        const DenseLayer& layer = layer_at(params, l);
        const Activation act = layer_activation(params, l);
        const DenseMatrix& out = cache.outputs[l];
        DenseMatrix delta = std::move(upstream);
        if (act != Activation::identity) {
            double* d = delta.data();
            const double* y = out.data();
            for (std::size_t k = 0; k < delta.size(); ++k) d[k] *= derivative_from_output(act, y[k]);
        }

        const DenseMatrix& input = cache.inputs[l];
        grads[2 * l] = (l == 0 && density(input) < kSparseInputDensity) ? sparse_matmul_tn(input, delta)
                                                                         : matmul_tn(input, delta);
        DenseMatrix bias_grad(1, delta.cols());
        for (std::size_t r = 0; r < delta.rows(); ++r) {
            const auto row = delta.row(r);
            for (std::size_t c = 0; c < row.size(); ++c) bias_grad(0, c) += row[c];
        }
        grads[2 * l + 1] = std::move(bias_grad);

        if (l == 0) break;
        upstream = matmul_nt(delta, layer.weight);
        if (l == cache.dropout_layer && cache.dropout_mask.size() != 0) {
            double* u = upstream.data();
            const double* m = cache.dropout_mask.data();
            for (std::size_t k = 0; k < upstream.size(); ++k) u[k] *= m[k];
        }
    }
    return grads;
}

OptimizerState make_optimizer(OptimizerKind kind, double learning_rate) {
    OptimizerState state;
    state.kind = kind;
    state.learning_rate = learning_rate;
    return state;
}

void optimizer_step(OptimizerState& state, std::span<DenseMatrix* const> params,
                    std::span<const DenseMatrix> grads) {
    if (params.size() != grads.size()) throw ShapeError("optimizer_step: tensor count mismatch");
    for (std::size_t t = 0; t < params.size(); ++t) {
        if (!params[t]->same_shape(grads[t])) throw ShapeError("optimizer_step: tensor shape mismatch");
        if (!grads[t].all_finite()) {
            throw TrainingDiverged("non-finite gradient in tensor " + std::to_string(t) + " at step " +
                                   std::to_string(state.step + 1));
        }
    }

    if (state.kind == OptimizerKind::sgd) {
        for (std::size_t t = 0; t < params.size(); ++t) axpy(*params[t], -state.learning_rate, grads[t]);
        ++state.step;
        return;
    }

    if (state.first_moment.empty()) {
        for (const DenseMatrix* p : params) {
            state.first_moment.emplace_back(p->rows(), p->cols());
            state.second_moment.emplace_back(p->rows(), p->cols());
        }
    }
    if (state.first_moment.size() != params.size()) throw ShapeError("optimizer_step: state mismatch");

    ++state.step;
    const double step = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(state.beta1, step);
    const double correction2 = 1.0 - std::pow(state.beta2, step);
    for (std::size_t t = 0; t < params.size(); ++t) {
        double* p = params[t]->data();
        double* m = state.first_moment[t].data();
        double* v = state.second_moment[t].data();
        const double* g = grads[t].data();
        for (std::size_t k = 0; k < params[t]->size(); ++k) {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            const double m_hat = m[k] / correction1;
            const double v_hat = v[k] / correction2;
            p[k] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
        }
    }
}

void optimizer_step(OptimizerState& state, AutoencoderParams& params, const Gradients& grads) {
    const auto tensors = parameter_tensors(params);
    optimizer_step(state, tensors, grads);
    ++params.generation;
}

std::vector<double> flatten(std::span<const DenseMatrix* const> tensors) {
    std::vector<double> flat;
    for (const DenseMatrix* t : tensors) flat.insert(flat.end(), t->values().begin(), t->values().end());
    return flat;
}

void unflatten(std::span<const double> flat, std::span<DenseMatrix* const> tensors) {
    std::size_t offset = 0;
    for (DenseMatrix* t : tensors) {
        if (offset + t->size() > flat.size()) throw ShapeError("unflatten: vector too short");
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), t->size(), t->values().begin());
        offset += t->size();
    }
    if (offset != flat.size()) throw ShapeError("unflatten: vector too long");
}

FiniteDiffReport finite_diff_check(const LossAndGradient& loss, std::span<const double> point,
                                   double epsilon, std::size_t sample, std::uint64_t seed) {
    if (!(epsilon > 0.0)) throw ContractError("finite_diff_check: epsilon must be positive");
    std::vector<double> analytic;
    loss(point, &analytic);
    if (analytic.size() != point.size()) throw ShapeError("finite_diff_check: gradient length");

    std::vector<std::size_t> coords(point.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > sample) {
        Rng rng(seed);
        rng.shuffle(std::span(coords));
        coords.resize(sample);
        std::sort(coords.begin(), coords.end());
    }

    FiniteDiffReport report;
    std::vector<double> probe(point.begin(), point.end());
    for (std::size_t c : coords) {
        const double original = probe[c];
        probe[c] = original + epsilon;
        const double up = loss(probe, nullptr);
        probe[c] = original - epsilon;
        const double down = loss(probe, nullptr);
        probe[c] = original;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double err = std::abs(analytic[c] - numeric) / std::max(1e-8, std::abs(numeric));
        if (report.coordinates_checked == 0 || err > report.max_relative_error) {
            report.max_relative_error = err;
            report.worst_coordinate = c;
        }
        ++report.coordinates_checked;
    }
    return report;
}

}  // namespace hashrec
