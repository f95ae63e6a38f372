#pragma once

// Binary file formats. All integers are unsigned 64-bit little-endian, all
// reals are little-endian IEEE-754 doubles.
//
//   EBKT1  named-tensor container: magic, count, then per tensor
//          name_len + name bytes + rank + shape dims + raw doubles
//   EBKB1  similarity-bank dump: magic, epoch, L, kind byte, L doubles
//   EBKM1  similarity matrix: magic, Q, T, Q*T row-major doubles
//   EBKF1  per-sample local features: magic, N, d, N*d doubles

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ebaker/tensor.hpp"

namespace ebaker::io {

// FNV-1a 64-bit over raw bytes, hex encoded; used to fingerprint configs.
inline std::string content_hash(std::string_view bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw std::runtime_error("unexpected end of file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void put_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(os, bits);
}

inline double get_f64(std::istream& is) {
    std::uint64_t bits = get_u64(is);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

inline void put_magic(std::ostream& os, const char* magic) { os.write(magic, 5); }

inline void expect_magic(std::istream& is, const char* magic, const std::string& path) {
    char got[5];
    is.read(got, 5);
    if (!is || std::memcmp(got, magic, 5) != 0)
        throw std::runtime_error(path + ": bad magic, expected " + magic);
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path.string());
    return is;
}

}  // namespace detail

// --- EBKT1: named tensors -------------------------------------------------

inline void save_tensors(const ParameterStore& store, const std::filesystem::path& path) {
    auto os = detail::open_out(path);
    detail::put_magic(os, "EBKT1");
    detail::put_u64(os, store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
        const std::string& name = store.names()[i];
        const Tensor& t = store.tensors()[i];
        detail::put_u64(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u64(os, t.rank());
        for (std::size_t dim : t.shape()) detail::put_u64(os, dim);
        for (double v : t.values()) detail::put_f64(os, v);
    }
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

inline std::vector<NamedTensor> read_tensor_file(const std::filesystem::path& path) {
    auto is = detail::open_in(path);
    detail::expect_magic(is, "EBKT1", path.string());
    std::uint64_t count = detail::get_u64(is);
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        NamedTensor nt;
        std::uint64_t name_len = detail::get_u64(is);
        nt.name.resize(name_len);
        is.read(nt.name.data(), static_cast<std::streamsize>(name_len));
        std::uint64_t rank = detail::get_u64(is);
        nt.shape.resize(rank);
        for (auto& d : nt.shape) d = detail::get_u64(is);
        nt.data.resize(shape_numel(nt.shape));
        for (auto& v : nt.data) v = detail::get_f64(is);
        if (!is) throw std::runtime_error("truncated tensor file: " + path.string());
        out.push_back(std::move(nt));
    }
    return out;
}

// Loads values into an existing store; every stored name must be present with
// a matching shape.
inline void load_tensors(ParameterStore& store, const std::filesystem::path& path) {
    auto entries = read_tensor_file(path);
    std::unordered_map<std::string, const NamedTensor*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    for (std::size_t i = 0; i < store.size(); ++i) {
        const std::string& name = store.names()[i];
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw std::runtime_error(path.string() + ": missing tensor " + name);
        Tensor& t = store.tensors()[i];
        if (it->second->shape != t.shape())
            throw std::runtime_error(path.string() + ": shape mismatch for " + name);
        t.mutable_values() = it->second->data;
    }
}

// --- EBKB1: similarity bank dump -------------------------------------------

inline void save_bank(const std::filesystem::path& path, std::uint64_t epoch,
                      std::uint8_t kind, const std::vector<double>& scores) {
    auto os = detail::open_out(path);
    detail::put_magic(os, "EBKB1");
    detail::put_u64(os, epoch);
    detail::put_u64(os, scores.size());
    os.put(static_cast<char>(kind));
    for (double v : scores) detail::put_f64(os, v);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

struct BankFile {
    std::uint64_t epoch;
    std::uint8_t kind;
    std::vector<double> scores;
};

inline BankFile read_bank(const std::filesystem::path& path) {
    auto is = detail::open_in(path);
    detail::expect_magic(is, "EBKB1", path.string());
    BankFile bf;
    bf.epoch = detail::get_u64(is);
    std::uint64_t n = detail::get_u64(is);
    int k = is.get();
    if (k < 0) throw std::runtime_error("truncated bank file: " + path.string());
    bf.kind = static_cast<std::uint8_t>(k);
    bf.scores.resize(n);
    for (auto& v : bf.scores) v = detail::get_f64(is);
    if (!is) throw std::runtime_error("truncated bank file: " + path.string());
    return bf;
}

// --- EBKM1: similarity matrix ----------------------------------------------

inline void save_matrix(const std::filesystem::path& path, const Tensor& m) {
    if (m.rank() != 2) throw std::invalid_argument("save_matrix: rank-2 required");
    auto os = detail::open_out(path);
    detail::put_magic(os, "EBKM1");
    detail::put_u64(os, m.rows());
    detail::put_u64(os, m.cols());
    for (double v : m.values()) detail::put_f64(os, v);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Tensor read_matrix(const std::filesystem::path& path) {
    auto is = detail::open_in(path);
    detail::expect_magic(is, "EBKM1", path.string());
    std::uint64_t q = detail::get_u64(is);
    std::uint64_t t = detail::get_u64(is);
    std::vector<double> data(q * t);
    for (auto& v : data) v = detail::get_f64(is);
    if (!is) throw std::runtime_error("truncated matrix file: " + path.string());
    return Tensor::from_data({q, t}, std::move(data));
}

// --- EBKF1: per-sample local feature vectors --------------------------------

inline void save_features(const std::filesystem::path& path, const Tensor& feats) {
    if (feats.rank() != 2) throw std::invalid_argument("save_features: rank-2 required");
    auto os = detail::open_out(path);
    detail::put_magic(os, "EBKF1");
    detail::put_u64(os, feats.rows());
    detail::put_u64(os, feats.cols());
    for (double v : feats.values()) detail::put_f64(os, v);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Tensor read_features(const std::filesystem::path& path) {
    auto is = detail::open_in(path);
    detail::expect_magic(is, "EBKF1", path.string());
    std::uint64_t n = detail::get_u64(is);
    std::uint64_t d = detail::get_u64(is);
    std::vector<double> data(n * d);
    for (auto& v : data) v = detail::get_f64(is);
    if (!is) throw std::runtime_error("truncated feature file: " + path.string());
    return Tensor::from_data({n, d}, std::move(data));
}

}  // namespace ebaker::io
