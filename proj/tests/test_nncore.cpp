#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "hashrec/dense.hpp"
#include "hashrec/errors.hpp"
#include "hashrec/nn.hpp"
#include "hashrec/rng.hpp"

using namespace hashrec;

namespace {

DenseMatrix random_dense(std::size_t r, std::size_t c, Rng& rng, double sparsity = 0.0) {
    DenseMatrix m(r, c);
    for (double& v : m.values()) v = rng.uniform() < sparsity ? 0.0 : rng.uniform(-1.0, 1.0);
    return m;
}

DenseMatrix naive_matmul(const DenseMatrix& a, const DenseMatrix& b) {
    DenseMatrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j)
            for (std::size_t k = 0; k < a.cols(); ++k) out(i, j) += a(i, k) * b(k, j);
    return out;
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    REQUIRE(a.same_shape(b));
    double worst = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a.values()[k] - b.values()[k]));
    return worst;
}

AutoencoderParams small_ae(std::size_t in, std::vector<std::size_t> hidden, std::size_t code, double dropout,
                           std::uint64_t seed) {
    AutoencoderShape shape;
    shape.input_dim = in;
    shape.hidden = std::move(hidden);
    shape.code_dim = code;
    shape.dropout_rate = dropout;
    Rng rng(seed);
    AutoencoderParams p = make_autoencoder(shape, rng);
    // non-zero biases so their gradients are exercised
    for (auto* layers : {&p.encoder, &p.decoder})
        for (DenseLayer& l : *layers)
            for (double& v : l.bias.values()) v = rng.uniform(-0.3, 0.3);
    return p;
}

// Loss = <code, gc> + <recon, gr>, so the upstream gradients are gc and gr.
double probe_loss(const ForwardResult& f, const DenseMatrix& gc, const DenseMatrix& gr) {
    double v = 0.0;
    for (std::size_t k = 0; k < gc.size(); ++k) v += f.code.values()[k] * gc.values()[k];
    for (std::size_t k = 0; k < gr.size(); ++k) v += f.reconstruction.values()[k] * gr.values()[k];
    return v;
}

}  // namespace

TEST_CASE("dense products agree with naive loops") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = 1 + rng.below(9), k = 1 + rng.below(9), n = 1 + rng.below(9);
        const DenseMatrix a = random_dense(m, k, rng, 0.5);
        const DenseMatrix b = random_dense(k, n, rng);
        const DenseMatrix ref = naive_matmul(a, b);
        CHECK(max_abs_diff(matmul(a, b), ref) < 1e-12);
        CHECK(max_abs_diff(sparse_matmul(a, b), ref) < 1e-12);
        CHECK(max_abs_diff(matmul_tn(transpose(a), b), ref) < 1e-12);
        CHECK(max_abs_diff(sparse_matmul_tn(transpose(a), b), ref) < 1e-12);
        CHECK(max_abs_diff(matmul_nt(a, transpose(b)), ref) < 1e-12);
    }
    CHECK_THROWS_AS(matmul(DenseMatrix(2, 3), DenseMatrix(2, 3)), ShapeError);
}

TEST_CASE("row gather and scatter are adjoint") {
    Rng rng(2);
    const DenseMatrix m = random_dense(5, 3, rng);
    const std::vector<std::size_t> rows{4, 0, 4};
    const DenseMatrix g = gather_rows(m, rows);
    CHECK(g(0, 1) == m(4, 1));
    CHECK(g(2, 2) == m(4, 2));
    DenseMatrix acc(5, 3);
    scatter_add_rows(acc, rows, g);
    CHECK(acc(4, 0) == doctest::Approx(2 * m(4, 0)));
    CHECK(acc(0, 0) == m(0, 0));
    CHECK(acc(1, 0) == 0.0);
}

TEST_CASE("glorot initialisation bounds and zero biases") {
    Rng rng(3);
    AutoencoderShape shape{50, {20}, 5};
    const AutoencoderParams p = make_autoencoder(shape, rng);
    REQUIRE(p.encoder.size() == 2);
    REQUIRE(p.decoder.size() == 2);
    CHECK(p.encoder[0].weight.rows() == 50);
    CHECK(p.encoder[1].weight.cols() == 5);
    CHECK(p.decoder[0].weight.rows() == 5);
    CHECK(p.decoder[1].weight.cols() == 50);
    const double bound = std::sqrt(6.0 / 70.0);
    for (double v : p.encoder[0].weight.values()) CHECK(std::abs(v) <= bound);
    for (double v : p.encoder[0].bias.values()) CHECK(v == 0.0);
}

TEST_CASE("identity weights give activation of activation") {
    AutoencoderParams p;
    p.hidden = Activation::tanh;
    p.code_activation = Activation::tanh;
    p.output_activation = Activation::tanh;
    p.code_dim = 3;
    DenseLayer id{DenseMatrix(3, 3), DenseMatrix(1, 3)};
    for (std::size_t i = 0; i < 3; ++i) id.weight(i, i) = 1.0;
    p.encoder = {id};
    p.decoder = {id};
    Rng rng(4);
    const DenseMatrix x = random_dense(4, 3, rng);
    const ForwardResult f = forward(p, x, Mode::eval, 0);
    for (std::size_t k = 0; k < x.size(); ++k) {
        CHECK(f.code.values()[k] == doctest::Approx(std::tanh(x.values()[k])));
        CHECK(f.reconstruction.values()[k] == doctest::Approx(std::tanh(std::tanh(x.values()[k]))));
    }
    CHECK_THROWS_AS(forward(p, DenseMatrix(2, 4), Mode::eval, 0), ShapeError);
}

TEST_CASE("zero dropout makes train mode equal eval mode") {
    const AutoencoderParams p = small_ae(6, {5}, 3, 0.0, 5);
    Rng rng(5);
    const DenseMatrix x = random_dense(7, 6, rng);
    const ForwardResult a = forward(p, x, Mode::train, 11);
    const ForwardResult b = forward(p, x, Mode::eval, 99);
    CHECK(a.code == b.code);
    CHECK(a.reconstruction == b.reconstruction);
}

TEST_CASE("dropout 0.6 zeroes about 60% of pre-code units") {
    const AutoencoderParams p = small_ae(8, {40}, 4, 0.6, 6);
    Rng rng(6);
    const DenseMatrix x = random_dense(25, 8, rng);
    std::size_t zeros = 0, total = 0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const ForwardResult f = forward(p, x, Mode::train, seed);
        for (double m : f.cache.dropout_mask.values()) {
            zeros += m == 0.0;
            ++total;
        }
    }
    // 200k Bernoulli draws: sd of the fraction is about 0.0011
    CHECK(double(zeros) / double(total) == doctest::Approx(0.6).epsilon(0.01));
}

TEST_CASE("inverted dropout preserves the expected pre-code activation") {
    const AutoencoderParams p = small_ae(5, {6}, 2, 0.6, 7);
    Rng rng(7);
    const DenseMatrix x = random_dense(1, 5, rng);
    const ForwardResult clean = forward(p, x, Mode::eval, 0);
    const DenseMatrix& unmasked = clean.cache.inputs[clean.cache.dropout_layer];
    DenseMatrix sum(unmasked.rows(), unmasked.cols());
    const int draws = 50000;
    for (int s = 0; s < draws; ++s) {
        const ForwardResult f = forward(p, x, Mode::train, s);
        axpy(sum, 1.0, f.cache.inputs[f.cache.dropout_layer]);
    }
    for (std::size_t k = 0; k < sum.size(); ++k) {
        const double mean = sum.values()[k] / draws;
        CHECK(std::abs(mean - unmasked.values()[k]) <= 0.02 * std::abs(unmasked.values()[k]) + 1e-3);
    }
}

TEST_CASE("eval forward is a pure function") {
    const AutoencoderParams p = small_ae(6, {4}, 3, 0.5, 8);
    Rng rng(8);
    const DenseMatrix x = random_dense(3, 6, rng);
    CHECK(forward(p, x, Mode::eval, 1).code == forward(p, x, Mode::eval, 2).code);
}

TEST_CASE("zero upstream gives zero gradients") {
    const AutoencoderParams p = small_ae(4, {3}, 2, 0.0, 9);
    Rng rng(9);
    const ForwardResult f = forward(p, random_dense(3, 4, rng), Mode::eval, 0);
    for (const DenseMatrix& g : backward(p, f.cache, DenseMatrix(), DenseMatrix())) {
        for (double v : g.values()) CHECK(v == 0.0);
    }
}

TEST_CASE("backward matches central differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        for (double dropout : {0.0, 0.5}) {
            Rng rng(100 + seed);
            // 3x4 input, hidden 3, code 2: the 3x4 -> 2 -> 3x4 shape
            AutoencoderParams p = small_ae(4, {3}, 2, dropout, seed);
            const DenseMatrix x = random_dense(3, 4, rng, 0.4);
            const DenseMatrix gc = random_dense(3, 2, rng);
            const DenseMatrix gr = random_dense(3, 4, rng);
            const std::uint64_t mask_seed = 77 + seed;

            auto tensors = parameter_tensors(p);
            const std::vector<double> point = flatten(tensors);
            auto fn = [&](std::span<const double> at, std::vector<double>* grad) {
                unflatten(at, tensors);
                const ForwardResult f = forward(p, x, Mode::train, mask_seed);
                if (grad) {
                    std::vector<const DenseMatrix*> views;
                    const Gradients g = backward(p, f.cache, gc, gr);
                    for (const DenseMatrix& t : g) views.push_back(&t);
                    *grad = flatten(views);
                }
                return probe_loss(f, gc, gr);
            };
            const FiniteDiffReport rep = finite_diff_check(fn, point, 1e-5, 500, seed);
            CHECK(rep.coordinates_checked == point.size());
            CHECK(rep.max_relative_error < 1e-4);
        }
    }
}

TEST_CASE("single linear layer gradient has its closed form") {
    AutoencoderParams p = small_ae(4, {}, 3, 0.0, 10);
    p.code_activation = Activation::identity;
    Rng rng(10);
    const DenseMatrix x = random_dense(5, 4, rng);
    const DenseMatrix t = random_dense(5, 3, rng);
    const ForwardResult f = forward(p, x, Mode::eval, 0);
    DenseMatrix resid = f.code;
    axpy(resid, -1.0, t);
    DenseMatrix upstream = resid;
    for (double& v : upstream.values()) v *= 2.0;
    const Gradients g = backward(p, f.cache, upstream, DenseMatrix());
    // d/dW sum (xW + b - t)^2 = 2 x^T (xW + b - t)
    const DenseMatrix expected = matmul_tn(x, upstream);
    CHECK(max_abs_diff(g[0], expected) < 1e-12);
    for (std::size_t c = 0; c < 3; ++c) {
        double col = 0.0;
        for (std::size_t r = 0; r < 5; ++r) col += upstream(r, c);
        CHECK(g[1](0, c) == doctest::Approx(col));
    }
}

TEST_CASE("stale or foreign caches are rejected") {
    AutoencoderParams p = small_ae(4, {3}, 2, 0.0, 11);
    const AutoencoderParams other = small_ae(4, {3}, 2, 0.0, 12);
    Rng rng(11);
    const ForwardResult f = forward(p, random_dense(2, 4, rng), Mode::eval, 0);
    CHECK_THROWS_AS(backward(other, f.cache, DenseMatrix(), DenseMatrix()), ContractError);
    const Gradients g = backward(p, f.cache, DenseMatrix(), DenseMatrix());
    OptimizerState opt = make_optimizer(OptimizerKind::sgd, 0.1);
    optimizer_step(opt, p, g);
    CHECK_THROWS_AS(backward(p, f.cache, DenseMatrix(), DenseMatrix()), ContractError);
}

TEST_CASE("sgd step follows its definition") {
    DenseMatrix w(1, 1, 1.0);
    const std::vector<DenseMatrix> g{DenseMatrix(1, 1, 2.0)};
    std::vector<DenseMatrix*> params{&w};
    OptimizerState opt = make_optimizer(OptimizerKind::sgd, 0.1);
    optimizer_step(opt, params, g);
    CHECK(w(0, 0) == doctest::Approx(0.8));
    optimizer_step(opt, params, std::vector<DenseMatrix>{DenseMatrix(1, 1, 0.0)});
    CHECK(w(0, 0) == doctest::Approx(0.8));
}

TEST_CASE("first adam step moves by about the learning rate") {
    for (double grad : {0.5, -3.0, 1e-3}) {
        DenseMatrix w(1, 1, 1.0);
        std::vector<DenseMatrix*> params{&w};
        OptimizerState opt = make_optimizer(OptimizerKind::adam, 0.01);
        optimizer_step(opt, params, std::vector<DenseMatrix>{DenseMatrix(1, 1, grad)});
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        const double expected = 1.0 - 0.01 * grad / (std::abs(grad) + 1e-8);
        CHECK(w(0, 0) == doctest::Approx(expected).epsilon(1e-12));
    }
    DenseMatrix w(1, 1, 1.0);
    std::vector<DenseMatrix*> params{&w};
    OptimizerState opt = make_optimizer(OptimizerKind::adam, 0.01);
    optimizer_step(opt, params, std::vector<DenseMatrix>{DenseMatrix(1, 1, 0.0)});
    CHECK(w(0, 0) == 1.0);
}

TEST_CASE("non-finite gradients abort without touching parameters") {
    DenseMatrix w(1, 2, 1.0);
    std::vector<DenseMatrix*> params{&w};
    OptimizerState opt = make_optimizer(OptimizerKind::adam, 0.01);
    DenseMatrix bad(1, 2, 1.0);
    bad(0, 1) = std::nan("");
    CHECK_THROWS_AS(optimizer_step(opt, params, std::vector<DenseMatrix>{bad}), TrainingDiverged);
    CHECK(w(0, 0) == 1.0);
    CHECK(w(0, 1) == 1.0);
    CHECK(opt.step == 0);
}

TEST_CASE("finite-difference harness on exact and corrupted gradients") {
    Rng rng(12);
    std::vector<double> point(60);
    for (double& v : point) v = rng.uniform(-2.0, 2.0);
    auto quad = [](double corruption) {
        return [corruption](std::span<const double> x, std::vector<double>* grad) {
            double v = 0.0;
            if (grad) grad->assign(x.size(), 0.0);
            for (std::size_t i = 0; i < x.size(); ++i) {
                v += 0.5 * (i + 1) * x[i] * x[i];
                if (grad) (*grad)[i] = (1.0 + corruption) * (i + 1) * x[i];
            }
            return v;
        };
    };
    const FiniteDiffReport exact = finite_diff_check(quad(0.0), point, 1e-5);
    CHECK(exact.coordinates_checked == 60);
    CHECK(exact.max_relative_error < 1e-7);
    const FiniteDiffReport broken = finite_diff_check(quad(0.1), point, 1e-5);
    CHECK(broken.max_relative_error == doctest::Approx(0.1).epsilon(0.01));
}
