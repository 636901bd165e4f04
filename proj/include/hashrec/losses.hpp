#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "hashrec/dense.hpp"

namespace hashrec {

/// One row per (user, item) pair: row k of `user_rows` and `item_rows`
/// belong to the same pair, with similarity label `labels[k]` and, for the
/// rating losses, the observed rating `ratings[k]`.
struct PairBatch {
    DenseMatrix user_rows;
    DenseMatrix item_rows;
    std::vector<double> labels;
    std::optional<std::vector<double>> ratings;

    std::size_t size() const noexcept { return labels.size(); }

    /// Throws ShapeError / ContractError when the invariants do not hold.
    void validate() const;
};

/// Scalar loss plus one gradient per differentiable input. Every loss
/// documents the order of `gradients`. Reduction is always a sum.
struct LossValue {
    double value = 0.0;
    std::vector<DenseMatrix> gradients;
};

/// log(1 + e^z) without overflow.
double softplus(double z);
double sigmoid(double z);

/// sum ||x - x_hat||^2 + sum ||y - y_hat||^2.
/// Gradients: {d/d x_hat, d/d y_hat}.
LossValue ae_loss(const DenseMatrix& x, const DenseMatrix& x_hat, const DenseMatrix& y,
                  const DenseMatrix& y_hat);

/// Cross-entropy of the Bernoulli similarity label whose logit is the
/// user/item inner product: sum softplus(<u,i>) - S * <u,i>.
/// Gradients: {d/d user_rows, d/d item_rows}.
LossValue map_similarity_loss(const PairBatch& batch);

/// Sum of squared row sums of both matrices.
/// Gradients: {d/d user_codes, d/d item_codes}.
LossValue balance_loss(const DenseMatrix& user_codes, const DenseMatrix& item_codes);

/// sum (R - <u,i>)^2. Gradients: {d/d user_rows, d/d item_rows}.
LossValue rating_reconstruction_loss(const PairBatch& batch);

/// sum over the batch of (R - <u,i>)^2 + lambda ||F_u||^2 + lambda ||F_i||^2,
/// the regularizer taken over the full factor tables.
/// Gradients: {d/d user_rows, d/d item_rows, d/d user_factors, d/d item_factors},
/// the last two holding the regularizer part only.
LossValue cf_loss(const PairBatch& batch, double lambda, const DenseMatrix& user_factors,
                  const DenseMatrix& item_factors);

/// As cf_loss with the prediction 1/2 + <u,i> / (2r).
LossValue cfcodereg_loss(const PairBatch& batch, double lambda, std::size_t code_dim,
                         const DenseMatrix& user_factors, const DenseMatrix& item_factors);

/// Inputs of the auxiliary CCSR terms: the distinct user and item code rows of
/// the step (for the balance term) and both autoencoders' inputs/outputs.
struct CcsrAuxTerms {
    DenseMatrix user_codes;
    DenseMatrix item_codes;
    DenseMatrix x;
    DenseMatrix x_hat;
    DenseMatrix y;
    DenseMatrix y_hat;
};

/// map_similarity_loss + lambda_b * balance_loss + lambda_ae * ae_loss.
/// Gradients: {user_rows, item_rows, user_codes, item_codes, x_hat, y_hat}.
LossValue ccsr_total_loss(const PairBatch& batch, const CcsrAuxTerms& aux, double lambda_b,
                          double lambda_ae);

}  // namespace hashrec
