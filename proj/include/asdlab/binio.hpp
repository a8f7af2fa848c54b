#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace asdlab::binio {

// Little-endian scalar IO, byte by byte so the on-disk formats are
// host-order independent.

inline void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
    write_u32(out, static_cast<std::uint32_t>(v));
    write_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void write_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(out, bits);
}

inline void write_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(out, bits);
}

class Reader {
public:
    Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw std::runtime_error("cannot open '" + path + "'");
    }

    std::uint32_t read_u32() {
        unsigned char b[4];
        take(b, 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }

    std::uint64_t read_u64() {
        const std::uint64_t lo = read_u32();
        const std::uint64_t hi = read_u32();
        return lo | (hi << 32);
    }

    float read_f32() {
        const std::uint32_t bits = read_u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    double read_f64() {
        const std::uint64_t bits = read_u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    std::string read_string(std::size_t len) {
        std::string s(len, '\0');
        take(s.data(), len);
        return s;
    }

    void take(void* dst, std::size_t n) {
        in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw std::runtime_error("truncated file '" + path_ + "': expected " + std::to_string(n) +
                                     " more byte(s) at offset " + std::to_string(offset_) + ", got " +
                                     std::to_string(in_.gcount()));
        offset_ += n;
    }

    bool at_eof() {
        in_.peek();
        return in_.eof();
    }

    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ifstream in_;
    std::size_t offset_ = 0;
};

} // namespace asdlab::binio
