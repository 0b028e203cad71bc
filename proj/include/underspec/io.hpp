#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "underspec/errors.hpp"

namespace underspec {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are not supported");

namespace io {

inline std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::FileError, "cannot open for writing: " + path);
    return f;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::FileError, "cannot open for reading: " + path);
    return f;
}

template <typename T>
void write_pod(std::ofstream& f, T value) {
    f.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f, const std::string& what) {
    T value{};
    f.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!f) fail(ErrorKind::TruncatedFile, "truncated file while reading " + what);
    return value;
}

template <typename T>
void write_array(std::ofstream& f, const T* data, std::size_t n) {
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
}

template <typename T>
void read_array(std::ifstream& f, T* data, std::size_t n, const std::string& what) {
    f.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
    if (!f) fail(ErrorKind::TruncatedFile, "truncated file while reading " + what);
}

inline void write_magic(std::ofstream& f, const char magic[4]) { f.write(magic, 4); }

inline void expect_magic(std::ifstream& f, const char magic[4], const std::string& path) {
    char got[4] = {};
    f.read(got, 4);
    if (!f || std::memcmp(got, magic, 4) != 0) {
        fail(ErrorKind::BadMagic, "bad magic in " + path + " (expected " +
                                      std::string(magic, 4) + ")");
    }
}

// FNV-1a over file bytes; used for run manifests.
inline std::string fnv1a_hex(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::FileError, "cannot hash missing file: " + path);
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[8192];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
        const std::streamsize n = f.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
        if (!f) break;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return std::string(out);
}

} // namespace io
} // namespace underspec
