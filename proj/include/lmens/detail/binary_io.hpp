#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "lmens/error.hpp"

namespace lmens::detail {

// All on-disk integers and floats are little-endian regardless of host.

template <class UInt>
void append_le(std::string& out, UInt value) {
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
}

inline void append_u32(std::string& out, std::uint32_t v) { append_le(out, v); }
inline void append_u64(std::string& out, std::uint64_t v) { append_le(out, v); }
inline void append_f64(std::string& out, double v) {
  append_le(out, std::bit_cast<std::uint64_t>(v));
}

inline void append_string(std::string& out, std::string_view s) {
  append_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

/// Bounds-checked cursor over a byte buffer; running off the end is a
/// FormatError naming what was being read.
class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("truncated input while reading ") + what);
    }
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  template <class UInt>
  UInt read_le(const char* what) {
    auto raw = take(sizeof(UInt), what);
    UInt v = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      v |= static_cast<UInt>(static_cast<unsigned char>(raw[i])) << (8 * i);
    }
    return v;
  }

  std::uint32_t u32(const char* what) { return read_le<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return read_le<std::uint64_t>(what); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string string(const char* what) {
    const auto n = u32(what);
    return std::string(take(n, what));
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace lmens::detail
