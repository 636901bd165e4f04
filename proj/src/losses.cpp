#include "hashrec/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hashrec/errors.hpp"

namespace hashrec {

namespace {

void require_same(const DenseMatrix& a, const DenseMatrix& b, const char* what) {
    if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": shape mismatch");
}

double squared_error(const DenseMatrix& target, const DenseMatrix& output, DenseMatrix& grad) {
    grad = DenseMatrix(output.rows(), output.cols());
    double total = 0.0;
    const double* t = target.data();
    const double* o = output.data();
    double* g = grad.data();
    for (std::size_t k = 0; k < output.size(); ++k) {
        const double diff = o[k] - t[k];
        total += diff * diff;
        g[k] = 2.0 * diff;
    }
    return total;
}

// Adds coeff * partner row to the gradient row, for both sides of every pair.
void accumulate_pair_grad(const PairBatch& b, std::size_t k, double coeff, DenseMatrix& gu,
                          DenseMatrix& gi) {
    const auto u = b.user_rows.row(k);
    const auto i = b.item_rows.row(k);
    auto du = gu.row(k);
    auto di = gi.row(k);
    for (std::size_t c = 0; c < u.size(); ++c) {
        du[c] += coeff * i[c];
        di[c] += coeff * u[c];
    }
}

const std::vector<double>& require_ratings(const PairBatch& b) {
    if (!b.ratings) throw ContractError("rating loss needs ratings in the batch");
    return *b.ratings;
}

template <typename Prediction>
LossValue regularized_mf_loss(const PairBatch& batch, double lambda, const DenseMatrix& user_factors,
                              const DenseMatrix& item_factors, Prediction predict, double slope) {
    batch.validate();
    if (lambda < 0.0) throw ContractError("lambda must be non-negative");
    const auto& ratings = require_ratings(batch);
    LossValue out;
    DenseMatrix gu(batch.user_rows.rows(), batch.user_rows.cols());
    DenseMatrix gi(batch.item_rows.rows(), batch.item_rows.cols());
    for (std::size_t k = 0; k < batch.size(); ++k) {
        const double residual = ratings[k] - predict(dot(batch.user_rows.row(k), batch.item_rows.row(k)));
        out.value += residual * residual;
        accumulate_pair_grad(batch, k, -2.0 * residual * slope, gu, gi);
    }
    out.value += lambda * (squared_norm(user_factors) + squared_norm(item_factors));
    DenseMatrix gfu = user_factors;
    DenseMatrix gfi = item_factors;
    for (double& v : gfu.values()) v *= 2.0 * lambda;
    for (double& v : gfi.values()) v *= 2.0 * lambda;
    out.gradients = {std::move(gu), std::move(gi), std::move(gfu), std::move(gfi)};
    return out;
}

}  // namespace

void PairBatch::validate() const {
    if (user_rows.rows() != labels.size() || item_rows.rows() != labels.size()) {
        throw ShapeError("pair batch: row counts differ from label count");
    }
    if (user_rows.cols() != item_rows.cols()) throw ShapeError("pair batch: code widths differ");
    if (ratings && ratings->size() != labels.size()) throw ShapeError("pair batch: rating count");
    for (double s : labels) {
        if (s != 0.0 && s != 1.0) throw ContractError("pair batch: labels must be 0 or 1");
    }
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

LossValue ae_loss(const DenseMatrix& x, const DenseMatrix& x_hat, const DenseMatrix& y,
                  const DenseMatrix& y_hat) {
    require_same(x, x_hat, "ae_loss(x)");
    require_same(y, y_hat, "ae_loss(y)");
    LossValue out;
    out.gradients.resize(2);
    out.value = squared_error(x, x_hat, out.gradients[0]) + squared_error(y, y_hat, out.gradients[1]);
    return out;
}

LossValue map_similarity_loss(const PairBatch& batch) {
    batch.validate();
    LossValue out;
    DenseMatrix gu(batch.user_rows.rows(), batch.user_rows.cols());
    DenseMatrix gi(batch.item_rows.rows(), batch.item_rows.cols());
    for (std::size_t k = 0; k < batch.size(); ++k) {
        const double z = dot(batch.user_rows.row(k), batch.item_rows.row(k));
        const double s = batch.labels[k];
        // softplus(z) - z == softplus(-z)
        out.value += s == 1.0 ? softplus(-z) : softplus(z);
        accumulate_pair_grad(batch, k, sigmoid(z) - s, gu, gi);
    }
    out.gradients = {std::move(gu), std::move(gi)};
    return out;
}

LossValue balance_loss(const DenseMatrix& user_codes, const DenseMatrix& item_codes) {
    LossValue out;
    for (const DenseMatrix* m : {&user_codes, &item_codes}) {
        DenseMatrix g(m->rows(), m->cols());
        for (std::size_t r = 0; r < m->rows(); ++r) {
            double sum = 0.0;
            for (double v : m->row(r)) sum += v;
            out.value += sum * sum;
            for (double& v : g.row(r)) v = 2.0 * sum;
        }
        out.gradients.push_back(std::move(g));
    }
    return out;
}

LossValue rating_reconstruction_loss(const PairBatch& batch) {
    batch.validate();
    const auto& ratings = require_ratings(batch);
    LossValue out;
    DenseMatrix gu(batch.user_rows.rows(), batch.user_rows.cols());
    DenseMatrix gi(batch.item_rows.rows(), batch.item_rows.cols());
    for (std::size_t k = 0; k < batch.size(); ++k) {
        const double residual = ratings[k] - dot(batch.user_rows.row(k), batch.item_rows.row(k));
        out.value += residual * residual;
        accumulate_pair_grad(batch, k, -2.0 * residual, gu, gi);
    }
    out.gradients = {std::move(gu), std::move(gi)};
    return out;
}

LossValue cf_loss(const PairBatch& batch, double lambda, const DenseMatrix& user_factors,
                  const DenseMatrix& item_factors) {
    return regularized_mf_loss(batch, lambda, user_factors, item_factors,
                               [](double z) { return z; }, 1.0);
}

LossValue cfcodereg_loss(const PairBatch& batch, double lambda, std::size_t code_dim,
                         const DenseMatrix& user_factors, const DenseMatrix& item_factors) {
    if (code_dim == 0) throw ContractError("cfcodereg_loss: code_dim must be at least 1");
    const double scale = 1.0 / (2.0 * static_cast<double>(code_dim));
    return regularized_mf_loss(batch, lambda, user_factors, item_factors,
                               [scale](double z) { return 0.5 + scale * z; }, scale);
}

LossValue ccsr_total_loss(const PairBatch& batch, const CcsrAuxTerms& aux, double lambda_b,
                          double lambda_ae) {
    if (lambda_b < 0.0 || lambda_ae < 0.0) throw ContractError("loss weights must be non-negative");
    LossValue sim = map_similarity_loss(batch);
    LossValue bal = balance_loss(aux.user_codes, aux.item_codes);
    LossValue ae = ae_loss(aux.x, aux.x_hat, aux.y, aux.y_hat);

    LossValue out;
    out.value = sim.value + lambda_b * bal.value + lambda_ae * ae.value;
    out.gradients = {std::move(sim.gradients[0]), std::move(sim.gradients[1])};
    for (DenseMatrix& g : bal.gradients) {
        for (double& v : g.values()) v *= lambda_b;
        out.gradients.push_back(std::move(g));
    }
    for (DenseMatrix& g : ae.gradients) {
        for (double& v : g.values()) v *= lambda_ae;
        out.gradients.push_back(std::move(g));
    }
    return out;
}

}  // namespace hashrec
