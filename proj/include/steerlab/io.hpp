#pragma once

// Little-endian binary blob helpers shared by the on-disk formats
// (model weights, activation datasets, subspace dictionaries, SAE files).

#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace steerlab::io {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

inline void append_f64_le(std::vector<unsigned char>& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

inline void append_f32_le(std::vector<unsigned char>& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

inline double read_f64_le(const unsigned char* p) {
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline float read_f32_le(const unsigned char* p) {
    uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<uint32_t>(p[i]) << (8 * i);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline void write_file(const std::string& path, std::span<const unsigned char> bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline void write_file(const std::string& path, const std::string& text) {
    write_file(path, std::span<const unsigned char>(
                         reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open for read: " + path);
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<unsigned char> bytes(static_cast<size_t>(n));
    if (n > 0) f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) throw IoError("read failed: " + path);
    return bytes;
}

inline std::string read_text_file(const std::string& path) {
    auto bytes = read_file(path);
    return std::string(bytes.begin(), bytes.end());
}

}  // namespace steerlab::io
