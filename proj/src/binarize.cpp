#include "hashrec/binarize.hpp"

#include <algorithm>
#include <cmath>

#include "hashrec/errors.hpp"

namespace hashrec {

namespace {

std::size_t words_for(std::size_t bits) { return (bits + 63) / 64; }

template <typename Predicate>
BinaryCodeMatrix pack(const DenseMatrix& f, Predicate plus_one) {
    BinaryCodeMatrix codes(f.rows(), f.cols());
    for (std::size_t r = 0; r < f.rows(); ++r) {
        for (std::size_t j = 0; j < f.cols(); ++j) codes.set_bit(r, j, plus_one(f(r, j), j));
    }
    return codes;
}

}  // namespace

BinaryCodeMatrix::BinaryCodeMatrix(std::size_t rows, std::size_t code_bits)
    : rows_(rows),
      code_bits_(code_bits),
      words_per_row_(words_for(code_bits)),
      words_(rows * words_for(code_bits), 0) {}

BinaryCodeMatrix::BinaryCodeMatrix(std::size_t rows, std::size_t code_bits,
                                   std::vector<std::uint64_t> words)
    : rows_(rows), code_bits_(code_bits), words_per_row_(words_for(code_bits)), words_(std::move(words)) {
    if (words_.size() != rows_ * words_per_row_) throw ShapeError("packed word count mismatch");
    const std::size_t tail = code_bits_ % 64;
    if (tail != 0) {
        const std::uint64_t unused = ~((std::uint64_t{1} << tail) - 1);
        for (std::size_t r = 0; r < rows_; ++r) {
            if (words_[r * words_per_row_ + words_per_row_ - 1] & unused) {
                throw ContractError("packed codes have bits set beyond code_bits");
            }
        }
    }
}

bool BinaryCodeMatrix::bit(std::size_t r, std::size_t j) const {
    return (words_[r * words_per_row_ + j / 64] >> (j % 64)) & 1U;
}

void BinaryCodeMatrix::set_bit(std::size_t r, std::size_t j, bool plus_one) {
    if (r >= rows_ || j >= code_bits_) throw ContractError("set_bit out of range");
    std::uint64_t& w = words_[r * words_per_row_ + j / 64];
    const std::uint64_t mask = std::uint64_t{1} << (j % 64);
    w = plus_one ? (w | mask) : (w & ~mask);
}

DenseMatrix BinaryCodeMatrix::unpack() const {
    DenseMatrix out(rows_, code_bits_);
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t j = 0; j < code_bits_; ++j) out(r, j) = bit(r, j) ? 1.0 : -1.0;
    }
    return out;
}

double AlphaSchedule::at(std::size_t epoch) const {
    return alpha0 * std::pow(growth, static_cast<double>(epoch));
}

AlphaSchedule AlphaSchedule::reaching(double final_alpha, std::size_t epochs) {
    if (!(final_alpha > 1.0)) throw ContractError("final alpha must exceed 1");
    if (epochs == 0) throw ContractError("alpha schedule needs at least one epoch");
    return AlphaSchedule{1.0, std::pow(final_alpha, 1.0 / static_cast<double>(epochs))};
}

BinaryCodeMatrix sign_binarize(const DenseMatrix& f) {
    return pack(f, [](double v, std::size_t) { return v >= 0.0; });
}

DenseMatrix scaled_tanh(const DenseMatrix& f, double alpha) {
    if (!(alpha > 0.0)) throw ContractError("scaled_tanh: alpha must be positive");
    DenseMatrix out = f;
    for (double& v : out.values()) v = std::tanh(alpha * v);
    return out;
}

BinaryCodeMatrix sst_binarize(const DenseMatrix& f, double alpha) {
    return sign_binarize(scaled_tanh(f, alpha));
}

std::vector<double> column_medians(const DenseMatrix& f) {
    if (f.rows() == 0) throw ContractError("median of an empty column");
    std::vector<double> medians(f.cols());
    std::vector<double> column(f.rows());
    for (std::size_t j = 0; j < f.cols(); ++j) {
        for (std::size_t r = 0; r < f.rows(); ++r) column[r] = f(r, j);
        const auto mid = column.begin() + static_cast<std::ptrdiff_t>((f.rows() - 1) / 2);
        std::nth_element(column.begin(), mid, column.end());
        medians[j] = *mid;
    }
    return medians;
}

BinaryCodeMatrix median_binarize(const DenseMatrix& f) {
    const std::vector<double> medians = column_medians(f);
    return pack(f, [&](double v, std::size_t j) { return v >= medians[j]; });
}

}  // namespace hashrec
