#pragma once

// Little-endian binary file helpers shared by the dataset and checkpoint
// writers. Not installed; implementation detail of the IO paths.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "coxvae/errors.hpp"

namespace coxvae::binio {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

class Writer {
  public:
    explicit Writer(const std::filesystem::path& path)
        : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot open for writing: " + path.string());
    }

    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        crc_ = crc32(crc_, static_cast<const Bytef*>(p),
                     static_cast<uInt>(n));
    }

    void u32(std::uint32_t v) { bytes(&v, sizeof v); }
    void u64(std::uint64_t v) { bytes(&v, sizeof v); }
    void f32(float v) { bytes(&v, sizeof v); }
    void f64(double v) { bytes(&v, sizeof v); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    std::uint32_t crc() const { return static_cast<std::uint32_t>(crc_); }
    void reset_crc() { crc_ = crc32(0L, nullptr, 0); }

    /// Appends the running CRC (not itself included in the CRC).
    void trailer_crc() {
        const std::uint32_t c = crc();
        out_.write(reinterpret_cast<const char*>(&c), sizeof c);
    }

    void close() {
        out_.close();
        if (!out_) throw IoError("write failed: " + path_.string());
    }

  private:
    std::filesystem::path path_;
    std::ofstream out_;
    uLong crc_ = crc32(0L, nullptr, 0);
};

class Reader {
  public:
    explicit Reader(const std::filesystem::path& path) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open for reading: " + path.string());
        buf_.assign(std::istreambuf_iterator<char>(in),
                    std::istreambuf_iterator<char>());
    }

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return buf_.size() - pos_; }

    void bytes(void* p, std::size_t n) {
        if (remaining() < n)
            throw FormatError(path_.string() + ": truncated at byte offset " +
                              std::to_string(pos_));
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }

    std::uint32_t u32() { std::uint32_t v; bytes(&v, sizeof v); return v; }
    std::uint64_t u64() { std::uint64_t v; bytes(&v, sizeof v); return v; }
    float f32() { float v; bytes(&v, sizeof v); return v; }
    double f64() { double v; bytes(&v, sizeof v); return v; }
    std::string str() {
        const std::uint32_t n = u32();
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }

    /// CRC32 of buf[from, pos).
    std::uint32_t crc_since(std::size_t from) const {
        return static_cast<std::uint32_t>(
            crc32(crc32(0L, nullptr, 0),
                  reinterpret_cast<const Bytef*>(buf_.data() + from),
                  static_cast<uInt>(pos_ - from)));
    }

    const std::string& path_string() const { return path_str_(); }

  private:
    const std::string& path_str_() const {
        if (cached_.empty()) cached_ = path_.string();
        return cached_;
    }
    std::filesystem::path path_;
    mutable std::string cached_;
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

} // namespace coxvae::binio
