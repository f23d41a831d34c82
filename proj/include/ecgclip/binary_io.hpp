#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ecgclip/errors.hpp"

namespace ecgclip {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swapping");

/// Appends little-endian primitives to a growable byte buffer.
class ByteWriter {
 public:
  void magic(std::string_view four_cc) { raw(four_cc.data(), four_cc.size()); }
  void u8(std::uint8_t v) { raw(&v, sizeof v); }
  void u16(std::uint16_t v) { raw(&v, sizeof v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void f32s(std::span<const float> v) { raw(v.data(), v.size_bytes()); }
  void append(std::span<const std::uint8_t> b) { raw(b.data(), b.size()); }

  /// u16 byte-length prefix followed by the UTF-8 bytes.
  void short_string(std::string_view s);

  const std::vector<std::uint8_t>& bytes() const& { return buf_; }
  std::vector<std::uint8_t> take() && { return std::move(buf_); }
  std::size_t size() const { return buf_.size(); }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }

  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian reader. Every failure throws FormatError
/// carrying the byte offset where the read was attempted.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  void expect_magic(std::string_view four_cc);
  std::uint8_t u8() { return pod<std::uint8_t>("u8"); }
  std::uint16_t u16() { return pod<std::uint16_t>("u16"); }
  std::uint32_t u32() { return pod<std::uint32_t>("u32"); }
  std::uint64_t u64() { return pod<std::uint64_t>("u64"); }
  float f32() { return pod<float>("f32"); }
  double f64() { return pod<double>("f64"); }
  void f32s(std::span<float> out, std::string_view what);
  std::string short_string(std::string_view what);
  std::string fixed_string(std::size_t n, std::string_view what);

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  /// Throws a truncation error naming expected vs available length.
  void require(std::size_t n, std::string_view what) const;

 private:
  template <class T>
  T pod(std::string_view what) {
    require(sizeof(T), what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

}  // namespace ecgclip
