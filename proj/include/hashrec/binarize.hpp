#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hashrec/dense.hpp"

namespace hashrec {

/// Bit-packed +-1 codes. Bit j of a row is 1 for +1 and 0 for -1; bits past
/// `code_bits` in the last word are always zero so XOR/popcount is exact.
class BinaryCodeMatrix {
public:
    BinaryCodeMatrix() = default;
    BinaryCodeMatrix(std::size_t rows, std::size_t code_bits);
    BinaryCodeMatrix(std::size_t rows, std::size_t code_bits, std::vector<std::uint64_t> words);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t code_bits() const noexcept { return code_bits_; }
    std::size_t words_per_row() const noexcept { return words_per_row_; }

    std::span<const std::uint64_t> row(std::size_t r) const {
        return {words_.data() + r * words_per_row_, words_per_row_};
    }
    std::span<const std::uint64_t> words() const noexcept { return words_; }

    bool bit(std::size_t r, std::size_t j) const;
    void set_bit(std::size_t r, std::size_t j, bool plus_one);

    /// +-1 matrix of shape rows x code_bits.
    DenseMatrix unpack() const;

    friend bool operator==(const BinaryCodeMatrix&, const BinaryCodeMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t code_bits_ = 0;
    std::size_t words_per_row_ = 0;
    std::vector<std::uint64_t> words_;
};

/// alpha(e) = alpha0 * growth^e.
struct AlphaSchedule {
    double alpha0 = 1.0;
    double growth = 1.0;

    double at(std::size_t epoch) const;

    /// Growth chosen so that alpha(epochs) reaches `final_alpha`.
    static AlphaSchedule reaching(double final_alpha, std::size_t epochs);
};

/// +1 where f >= 0, -1 otherwise (so sign(0) = +1).
BinaryCodeMatrix sign_binarize(const DenseMatrix& f);

/// Element-wise tanh(alpha * f); alpha must be positive.
DenseMatrix scaled_tanh(const DenseMatrix& f, double alpha);

/// sign_binarize(scaled_tanh(f, alpha)).
BinaryCodeMatrix sst_binarize(const DenseMatrix& f, double alpha);

/// Per-column threshold at the median (lower median for even row counts);
/// +1 where the value is >= the threshold.
BinaryCodeMatrix median_binarize(const DenseMatrix& f);

std::vector<double> column_medians(const DenseMatrix& f);

}  // namespace hashrec
