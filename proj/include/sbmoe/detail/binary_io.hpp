#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>

#include "sbmoe/errors.hpp"

namespace sbmoe::detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class UInt>
void put_le(std::string& out, UInt value) {
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
}

inline void put_f32(std::string& out, float value) { put_le(out, std::bit_cast<std::uint32_t>(value)); }

// Sequential reader over an in-memory buffer; every read is bounds-checked
// and failures report the byte offset.
class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string_view what) : bytes_(bytes), what_(what) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  template <class UInt>
  UInt get_le() {
    require(sizeof(UInt));
    UInt value = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      value |= static_cast<UInt>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(UInt);
    return value;
  }

  float get_f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }

  std::string_view get_bytes(std::size_t n) {
    require(n);
    auto view = bytes_.substr(pos_, n);
    pos_ += n;
    return view;
  }

  [[noreturn]] void fail(const std::string& message) const {
    throw FormatError(std::string(what_) + ": " + message + " at byte offset " + std::to_string(pos_));
  }

 private:
  void require(std::size_t n) const {
    if (remaining() < n) {
      fail("truncated input (needed " + std::to_string(n) + " bytes, " + std::to_string(remaining()) +
           " left)");
    }
  }

  std::string_view bytes_;
  std::string_view what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace sbmoe::detail
