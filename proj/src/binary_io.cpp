#include "ecgclip/binary_io.hpp"

#include <fstream>
#include <iterator>
#include <limits>

namespace ecgclip {

void ByteWriter::short_string(std::string_view s) {
  if (s.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw DataError("string longer than 65535 bytes cannot be encoded");
  }
  u16(static_cast<std::uint16_t>(s.size()));
  raw(s.data(), s.size());
}

void ByteReader::require(std::size_t n, std::string_view what) const {
  if (remaining() < n) {
    throw FormatError("truncated payload reading " + std::string(what) + ": expected " +
                          std::to_string(n) + " bytes, only " + std::to_string(remaining()) +
                          " available",
                      pos_);
  }
}

void ByteReader::expect_magic(std::string_view four_cc) {
  const std::size_t at = pos_;
  std::string got = fixed_string(four_cc.size(), "magic");
  if (got != four_cc) {
    throw FormatError("bad magic: expected \"" + std::string(four_cc) + "\"", at);
  }
}

void ByteReader::f32s(std::span<float> out, std::string_view what) {
  require(out.size_bytes(), what);
  std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
  pos_ += out.size_bytes();
}

std::string ByteReader::short_string(std::string_view what) {
  const std::uint16_t n = u16();
  return fixed_string(n, what);
}

std::string ByteReader::fixed_string(std::size_t n, std::string_view what) {
  require(n, what);
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ecgclip
