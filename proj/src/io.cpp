#include "hashrec/io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "hashrec/errors.hpp"

namespace hashrec {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
    std::array<char, 4> bytes;
    for (int k = 0; k < 4; ++k) bytes[k] = static_cast<char>((v >> (8 * k)) & 0xFF);
    out.write(bytes.data(), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    std::array<char, 8> bytes;
    for (int k = 0; k < 8; ++k) bytes[k] = static_cast<char>((v >> (8 * k)) & 0xFF);
    out.write(bytes.data(), 8);
}

std::uint64_t get_bytes(std::istream& in, int n, const std::filesystem::path& path) {
    std::array<unsigned char, 8> bytes{};
    if (!in.read(reinterpret_cast<char*>(bytes.data()), n)) {
        throw IoError("truncated file " + path.string());
    }
    std::uint64_t v = 0;
    for (int k = 0; k < n; ++k) v |= static_cast<std::uint64_t>(bytes[k]) << (8 * k);
    return v;
}

std::uint32_t get_u32(std::istream& in, const std::filesystem::path& path) {
    return static_cast<std::uint32_t>(get_bytes(in, 4, path));
}

std::uint32_t checked_u32(std::size_t v) {
    if (v > UINT32_MAX) throw ContractError("dimension does not fit in u32");
    return static_cast<std::uint32_t>(v);
}

void expect_magic(std::istream& in, const char (&magic)[5], const std::filesystem::path& path) {
    char got[4] = {};
    if (!in.read(got, 4) || std::memcmp(got, magic, 4) != 0) {
        throw IoError(path.string() + " is not a " + std::string(magic, 4) + " file");
    }
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    return in;
}

}  // namespace

void save_tensors(const std::filesystem::path& path, std::span<const DenseMatrix* const> tensors) {
    auto out = open_out(path);
    out.write("HRNN", 4);
    put_u32(out, kTensorFileVersion);
    put_u32(out, checked_u32(tensors.size()));
    for (const DenseMatrix* t : tensors) {
        put_u32(out, checked_u32(t->rows()));
        put_u32(out, checked_u32(t->cols()));
        for (double v : t->values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw IoError("write failed for " + path.string());
}

void save_tensors(const std::filesystem::path& path, std::span<const DenseMatrix> tensors) {
    std::vector<const DenseMatrix*> ptrs;
    for (const DenseMatrix& t : tensors) ptrs.push_back(&t);
    save_tensors(path, std::span<const DenseMatrix* const>(ptrs));
}

std::vector<DenseMatrix> load_tensors(const std::filesystem::path& path) {
    auto in = open_in(path);
    expect_magic(in, "HRNN", path);
    const std::uint32_t version = get_u32(in, path);
    if (version != kTensorFileVersion) {
        throw IoError(path.string() + ": unsupported HRNN version " + std::to_string(version));
    }
    const std::uint32_t count = get_u32(in, path);
    std::vector<DenseMatrix> tensors;
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint32_t rows = get_u32(in, path);
        const std::uint32_t cols = get_u32(in, path);
        DenseMatrix m(rows, cols);
        for (double& v : m.values()) v = std::bit_cast<double>(get_bytes(in, 8, path));
        tensors.push_back(std::move(m));
    }
    return tensors;
}

void save_codes(const std::filesystem::path& path, const BinaryCodeMatrix& codes) {
    auto out = open_out(path);
    out.write("HRBC", 4);
    put_u32(out, kCodeFileVersion);
    put_u32(out, checked_u32(codes.rows()));
    put_u32(out, checked_u32(codes.code_bits()));
    for (std::uint64_t w : codes.words()) put_u64(out, w);
    if (!out) throw IoError("write failed for " + path.string());
}

BinaryCodeMatrix load_codes(const std::filesystem::path& path) {
    auto in = open_in(path);
    expect_magic(in, "HRBC", path);
    const std::uint32_t version = get_u32(in, path);
    if (version != kCodeFileVersion) {
        throw IoError(path.string() + ": unsupported HRBC version " + std::to_string(version));
    }
    const std::uint32_t rows = get_u32(in, path);
    const std::uint32_t bits = get_u32(in, path);
    std::vector<std::uint64_t> words(static_cast<std::size_t>(rows) * ((bits + 63) / 64));
    for (std::uint64_t& w : words) w = get_bytes(in, 8, path);
    return BinaryCodeMatrix(rows, bits, std::move(words));
}

}  // namespace hashrec
