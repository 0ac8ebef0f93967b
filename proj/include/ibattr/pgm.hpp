#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ibattr/common.hpp"

namespace ibattr {

// Binary portable graymap (P5), 8-bit, maxval 255. Masks use {0, 255}.

inline void write_pgm(const std::string& path, int width, int height,
                      const std::vector<std::uint8_t>& bytes) {
    if (static_cast<std::size_t>(width) * static_cast<std::size_t>(height) != bytes.size())
        throw ContractError("write_pgm: byte count does not match dimensions");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << "P5\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path);
}

struct PgmImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> bytes;  // row-major
};

inline PgmImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);

    // Header tokens may be separated by whitespace and '#' comment lines.
    auto next_token = [&]() -> std::string {
        std::string tok;
        int c;
        while ((c = in.get()) != EOF) {
            if (c == '#') {
                while ((c = in.get()) != EOF && c != '\n') {}
                continue;
            }
            if (std::isspace(c)) {
                if (!tok.empty()) return tok;
                continue;
            }
            tok.push_back(static_cast<char>(c));
        }
        return tok;
    };

    if (next_token() != "P5") throw IoError("not a P5 graymap: " + path);
    PgmImage img;
    try {
        img.width = std::stoi(next_token());
        img.height = std::stoi(next_token());
        const int maxval = std::stoi(next_token());
        if (maxval != 255) throw IoError("unsupported maxval (want 255): " + path);
    } catch (const std::logic_error&) {
        throw IoError("malformed header: " + path);
    }
    if (img.width <= 0 || img.height <= 0) throw IoError("bad dimensions: " + path);

    const std::size_t n =
        static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height);
    img.bytes.resize(n);
    in.read(reinterpret_cast<char*>(img.bytes.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) throw IoError("truncated pixel data: " + path);
    return img;
}

}  // namespace ibattr
