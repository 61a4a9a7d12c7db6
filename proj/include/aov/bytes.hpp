#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "aov/error.hpp"

// Little-endian primitives for the binary file formats. Byte order is pinned
// in software so files written on any platform load identically on any other.

namespace aov {

struct BadMagicError : DataError {
  explicit BadMagicError(const std::string& what) : DataError("bad magic: " + what) {}
};

struct TruncatedError : DataError {
  explicit TruncatedError(const std::string& what) : DataError("truncated file: " + what) {}
};

struct DimOverflowError : DataError {
  explicit DimOverflowError(const std::string& what) : DataError("dimension overflow: " + what) {}
};

namespace bytes {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  write_u32(os, static_cast<std::uint32_t>(v & 0xffffffffull));
  write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw TruncatedError(what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t read_u64(std::istream& is, const char* what) {
  std::uint64_t lo = read_u32(is, what);
  std::uint64_t hi = read_u32(is, what);
  return lo | (hi << 32);
}

inline void write_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

inline float read_f32(std::istream& is, const char* what) {
  std::uint32_t bits = read_u32(is, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

inline double read_f64(std::istream& is, const char* what) {
  std::uint64_t bits = read_u64(is, what);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline void write_f32_block(std::ostream& os, const float* v, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v), static_cast<std::streamsize>(n * 4));
  } else {
    for (std::size_t i = 0; i < n; ++i) write_f32(os, v[i]);
  }
}

inline void read_f32_block(std::istream& is, float* v, std::size_t n, const char* what) {
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(v), static_cast<std::streamsize>(n * 4)))
      throw TruncatedError(what);
  } else {
    for (std::size_t i = 0; i < n; ++i) v[i] = read_f32(is, what);
  }
}

inline void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is, const char* what) {
  std::uint32_t n = read_u32(is, what);
  if (n > (1u << 20)) throw DimOverflowError(std::string(what) + ": string length");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw TruncatedError(what);
  return s;
}

}  // namespace bytes
}  // namespace aov
