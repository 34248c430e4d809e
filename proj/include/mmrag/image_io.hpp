#pragma once

// Binary PPM (P6, 8-bit) reader/writer. Loaded pixels are normalized to
// [0,1]; writing quantizes back with round-to-nearest.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mmrag/common.hpp"

namespace mmrag {

struct RawImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> rgb;  // H*W*3, row-major, values in [0,1]
};

namespace detail {

inline int ppm_next_token(std::istream& is, std::uint64_t& offset, std::string& tok) {
    tok.clear();
    int c;
    while ((c = is.get()) != EOF) {
        ++offset;
        if (c == '#') {  // comment to end of line
            while ((c = is.get()) != EOF) {
                ++offset;
                if (c == '\n') break;
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return 0;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    return tok.empty() ? -1 : 0;
}

}  // namespace detail

inline RawImage read_ppm(std::istream& is) {
    std::uint64_t offset = 0;
    std::string tok;
    if (detail::ppm_next_token(is, offset, tok) != 0 || tok != "P6")
        throw FormatError("expected P6 magic", 0);
    auto read_int = [&](const char* what) -> std::size_t {
        const std::uint64_t at = offset;
        if (detail::ppm_next_token(is, offset, tok) != 0)
            throw FormatError(std::string("missing ") + what, at);
        try {
            return static_cast<std::size_t>(std::stoul(tok));
        } catch (...) {
            throw FormatError(std::string("bad ") + what + " '" + tok + "'", at);
        }
    };
    const std::size_t width = read_int("width");
    const std::size_t height = read_int("height");
    const std::size_t maxval = read_int("maxval");
    if (width == 0 || height == 0) throw FormatError("zero image dimension", offset);
    if (maxval != 255) throw FormatError("only 8-bit PPM supported, maxval " + std::to_string(maxval), offset);

    RawImage img;
    img.width = width;
    img.height = height;
    img.rgb.resize(width * height * 3);
    std::vector<unsigned char> buf(width * height * 3);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(is.gcount()) != buf.size())
        throw FormatError("truncated pixel payload", offset + static_cast<std::uint64_t>(is.gcount()));
    for (std::size_t i = 0; i < buf.size(); ++i) img.rgb[i] = buf[i] / 255.0;
    return img;
}

inline RawImage load_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    return read_ppm(is);
}

inline void write_ppm(std::ostream& os, const RawImage& img) {
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> buf(img.rgb.size());
    for (std::size_t i = 0; i < img.rgb.size(); ++i) {
        double v = img.rgb[i];
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        buf[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void save_ppm(const std::string& path, const RawImage& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_ppm(os, img);
    if (!os) throw IoError("write failed for " + path);
}

}  // namespace mmrag
