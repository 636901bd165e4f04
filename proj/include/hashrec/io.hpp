#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "hashrec/binarize.hpp"
#include "hashrec/dense.hpp"

namespace hashrec {

// Parameter checkpoints: magic "HRNN", u32 version, u32 tensor count, then per
// tensor u32 rows, u32 cols and little-endian f64 data in row-major order.
inline constexpr std::uint32_t kTensorFileVersion = 1;

// Binary code files: magic "HRBC", u32 version, u32 rows, u32 code_bits, then
// the packed little-endian u64 words row-major.
inline constexpr std::uint32_t kCodeFileVersion = 1;

void save_tensors(const std::filesystem::path& path, std::span<const DenseMatrix* const> tensors);
void save_tensors(const std::filesystem::path& path, std::span<const DenseMatrix> tensors);
std::vector<DenseMatrix> load_tensors(const std::filesystem::path& path);

void save_codes(const std::filesystem::path& path, const BinaryCodeMatrix& codes);
BinaryCodeMatrix load_codes(const std::filesystem::path& path);

}  // namespace hashrec
