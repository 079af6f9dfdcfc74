#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"

namespace candle {

/// Little-endian encoder for the CNDP/CNDM containers.
class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void f32(float v);
  void bytes(std::span<const char> s);
  std::vector<std::uint8_t> take() && { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian decoder; every failure is a FormatError
/// carrying the offset of the field being read.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void expect_magic(const char (&magic)[4]);
  std::uint32_t u32();
  float f32();
  /// u32 length followed by that many bytes of UTF-8 JSON.
  nlohmann::ordered_json json_header();

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const;

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void write_bytes_file(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path);
std::vector<std::uint8_t> read_bytes_file(const std::filesystem::path& path);

}  // namespace candle
