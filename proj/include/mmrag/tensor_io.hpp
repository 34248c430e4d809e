#pragma once

// Flat binary tensor format used by checkpoints and synthetic inputs:
//   magic "TNSR" | u32 rank | u32 dims[rank] | f64 payload, little-endian.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mmrag/common.hpp"
#include "mmrag/tensor.hpp"

namespace mmrag {

static_assert(sizeof(double) == 8, "f64 payload requires 8-byte double");

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is, std::uint64_t& offset, const char* what) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4) throw FormatError(std::string("truncated while reading ") + what, offset);
    offset += 4;
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is, std::uint64_t& offset, const char* what) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (is.gcount() != 8) throw FormatError(std::string("truncated while reading ") + what, offset);
    offset += 8;
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os.write("TNSR", 4);
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < t.numel(); ++i) detail::put_f64(os, t.at(i));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_tensor(os, t);
    if (!os) throw IoError("write failed for " + path);
}

inline Tensor read_tensor(std::istream& is) {
    std::uint64_t offset = 0;
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, "TNSR", 4) != 0)
        throw FormatError("bad TNSR magic", 0);
    offset = 4;
    const std::uint32_t rank = detail::get_u32(is, offset, "rank");
    if (rank == 0 || rank > 8) throw FormatError("implausible rank " + std::to_string(rank), 4);
    std::vector<std::size_t> shape(rank);
    std::size_t total = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = detail::get_u32(is, offset, "dim");
        if (shape[i] == 0) throw FormatError("zero dimension", offset - 4);
        total *= shape[i];
    }
    std::vector<double> values(total);
    for (std::size_t i = 0; i < total; ++i) values[i] = detail::get_f64(is, offset, "payload");
    return Tensor::from_values(std::move(shape), std::move(values));
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    return read_tensor(is);
}

}  // namespace mmrag
