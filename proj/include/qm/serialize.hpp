#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "qm/check.hpp"

namespace qm {

// Little-endian binary IO with offset tracking so corruption errors can name
// the byte where parsing failed. x86 is little-endian; writes go through
// explicit byte packing anyway so the formats are well-defined everywhere.

class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    QM_CHECK_IO(out_.good(), "cannot open '" + path + "' for writing");
  }

  void u8(uint8_t v) { raw(&v, 1); }
  void u16(uint16_t v) {
    uint8_t b[2] = {static_cast<uint8_t>(v & 0xff), static_cast<uint8_t>(v >> 8)};
    raw(b, 2);
  }
  void u32(uint32_t v) {
    uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>((v >> (8 * i)) & 0xff);
    raw(b, 4);
  }
  void u64(uint64_t v) {
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>((v >> (8 * i)) & 0xff);
    raw(b, 8);
  }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f32_array(const float* v, size_t n) {
    for (size_t i = 0; i < n; ++i) f32(v[i]);
  }
  void bytes(const void* p, size_t n) { raw(p, n); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

  void close() {
    out_.close();
    QM_CHECK_IO(!out_.fail(), "write to '" + path_ + "' failed");
  }

 private:
  void raw(const void* p, size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    QM_CHECK_IO(out_.good(), "write to '" + path_ + "' failed");
  }

  std::string path_;
  std::ofstream out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    QM_CHECK_IO(in_.good(), "cannot open '" + path + "' for reading");
  }

  uint8_t u8() {
    uint8_t v;
    raw(&v, 1);
    return v;
  }
  uint16_t u16() {
    uint8_t b[2];
    raw(b, 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
  }
  uint32_t u32() {
    uint8_t b[4];
    raw(b, 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
  }
  uint64_t u64() {
    uint8_t b[8];
    raw(b, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  void f32_array(float* v, size_t n) {
    for (size_t i = 0; i < n; ++i) v[i] = f32();
  }
  std::string str(uint32_t max_len = 1u << 20) {
    uint32_t n = u32();
    QM_CHECK_IO(n <= max_len, "'" + path_ + "': string length " + std::to_string(n) +
                                  " at offset " + std::to_string(offset_ - 4) + " exceeds limit");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  // Checks the file's leading magic; offset-qualified error on mismatch.
  void expect_magic(const char* magic) {
    char got[8] = {0};
    size_t n = std::strlen(magic);
    raw(got, n);
    QM_CHECK_IO(std::memcmp(got, magic, n) == 0,
                "'" + path_ + "': bad magic at offset 0, expected \"" + magic + "\"");
  }

  uint64_t offset() const { return offset_; }
  const std::string& path() const { return path_; }

 private:
  void raw(void* p, size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    QM_CHECK_IO(static_cast<size_t>(in_.gcount()) == n,
                "'" + path_ + "': truncated read of " + std::to_string(n) + " bytes at offset " +
                    std::to_string(offset_));
    offset_ += n;
  }

  std::string path_;
  std::ifstream in_;
  uint64_t offset_ = 0;
};

}  // namespace qm
