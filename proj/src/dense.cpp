#include "hashrec/dense.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Core>

#include "hashrec/errors.hpp"

namespace hashrec {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMajor>;
using View = Eigen::Map<RowMajor>;

ConstView view(const DenseMatrix& m) {
    return ConstView(m.data(), static_cast<Eigen::Index>(m.rows()),
                     static_cast<Eigen::Index>(m.cols()));
}

View view(DenseMatrix& m) {
    return View(m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

std::string shape(const DenseMatrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require(bool ok, const char* op, const DenseMatrix& a, const DenseMatrix& b) {
    if (!ok) throw ShapeError(std::string(op) + ": incompatible shapes " + shape(a) + " and " + shape(b));
}

}  // namespace

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw ShapeError("data length does not match rows*cols");
}

bool DenseMatrix::all_finite() const noexcept {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void DenseMatrix::fill(double value) {
    std::fill(data_.begin(), data_.end(), value);
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.cols() == b.rows(), "matmul", a, b);
    DenseMatrix out(a.rows(), b.cols());
    if (out.size() != 0 && a.cols() != 0) view(out).noalias() = view(a) * view(b);
    return out;
}

DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.rows() == b.rows(), "matmul_tn", a, b);
    DenseMatrix out(a.cols(), b.cols());
    if (out.size() != 0 && a.rows() != 0) view(out).noalias() = view(a).transpose() * view(b);
    return out;
}

DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.cols() == b.cols(), "matmul_nt", a, b);
    DenseMatrix out(a.rows(), b.rows());
    if (out.size() != 0 && a.cols() != 0) view(out).noalias() = view(a) * view(b).transpose();
    return out;
}

DenseMatrix sparse_matmul(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.cols() == b.rows(), "sparse_matmul", a, b);
    DenseMatrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t r = 0; r < a.rows(); ++r) {
        double* dst = out.data() + r * n;
        const auto in = a.row(r);
        for (std::size_t c = 0; c < in.size(); ++c) {
            const double x = in[c];
            if (x == 0.0) continue;
            const double* src = b.data() + c * n;
            for (std::size_t j = 0; j < n; ++j) dst[j] += x * src[j];
        }
    }
    return out;
}

DenseMatrix sparse_matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.rows() == b.rows(), "sparse_matmul_tn", a, b);
    DenseMatrix out(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const auto in = a.row(r);
        const double* src = b.data() + r * n;
        for (std::size_t c = 0; c < in.size(); ++c) {
            const double x = in[c];
            if (x == 0.0) continue;
            double* dst = out.data() + c * n;
            for (std::size_t j = 0; j < n; ++j) dst[j] += x * src[j];
        }
    }
    return out;
}

double density(const DenseMatrix& m) {
    if (m.size() == 0) return 0.0;
    std::size_t nz = 0;
    for (double v : m.values()) nz += v != 0.0;
    return static_cast<double>(nz) / static_cast<double>(m.size());
}

DenseMatrix transpose(const DenseMatrix& m) {
    DenseMatrix out(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
    }
    return out;
}

DenseMatrix gather_rows(const DenseMatrix& m, std::span<const std::size_t> rows) {
    DenseMatrix out(rows.size(), m.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        if (rows[k] >= m.rows()) throw ShapeError("gather_rows: row index out of range");
        const auto src = m.row(rows[k]);
        std::copy(src.begin(), src.end(), out.row(k).begin());
    }
    return out;
}

void scatter_add_rows(DenseMatrix& target, std::span<const std::size_t> rows,
                      const DenseMatrix& source) {
    require(source.rows() == rows.size() && source.cols() == target.cols(), "scatter_add_rows",
            target, source);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        if (rows[k] >= target.rows()) throw ShapeError("scatter_add_rows: row index out of range");
        auto dst = target.row(rows[k]);
        const auto src = source.row(k);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
}

void axpy(DenseMatrix& a, double scale, const DenseMatrix& b) {
    require(a.same_shape(b), "axpy", a, b);
    double* dst = a.data();
    const double* src = b.data();
    for (std::size_t k = 0; k < a.size(); ++k) dst[k] += scale * src[k];
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

double squared_norm(const DenseMatrix& m) {
    double s = 0.0;
    for (double v : m.values()) s += v * v;
    return s;
}

}  // namespace hashrec
