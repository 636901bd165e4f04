#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace hashrec {

/// Row-major real matrix. Also used for the r-wide embedding tables.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }

    bool same_shape(const DenseMatrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    bool all_finite() const noexcept;

    void fill(double value);

    friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Products. Shapes are checked and a ShapeError is thrown on mismatch.
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);     // a * b
DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b);  // a^T * b
DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b);  // a * b^T

/// a * b, skipping zero entries of `a`. Used when `a` holds sparse rating rows.
DenseMatrix sparse_matmul(const DenseMatrix& a, const DenseMatrix& b);
/// a^T * b, skipping zero entries of `a`.
DenseMatrix sparse_matmul_tn(const DenseMatrix& a, const DenseMatrix& b);

/// Fraction of non-zero entries.
double density(const DenseMatrix& m);

DenseMatrix transpose(const DenseMatrix& m);

/// Copies the listed rows, in order.
DenseMatrix gather_rows(const DenseMatrix& m, std::span<const std::size_t> rows);

/// target.row(rows[k]) += source.row(k)
void scatter_add_rows(DenseMatrix& target, std::span<const std::size_t> rows,
                      const DenseMatrix& source);

/// a += scale * b
void axpy(DenseMatrix& a, double scale, const DenseMatrix& b);

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(const DenseMatrix& m);

}  // namespace hashrec
