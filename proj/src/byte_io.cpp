#include "candle/byte_io.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <string>

#include "candle/errors.hpp"

namespace candle {

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::bytes(std::span<const char> s) {
  for (char c : s) buf_.push_back(static_cast<std::uint8_t>(c));
}

void ByteReader::need(std::size_t n, const char* what) const {
  if (remaining() < n) {
    throw FormatError(pos_, std::string("truncated ") + what + ": expected " + std::to_string(n) +
                                " bytes, got " + std::to_string(remaining()));
  }
}

void ByteReader::expect_magic(const char (&magic)[4]) {
  need(4, "magic");
  for (int i = 0; i < 4; ++i) {
    if (bytes_[pos_ + i] != static_cast<std::uint8_t>(magic[i])) {
      throw FormatError(0, std::string("bad magic, expected \"") + std::string(magic, 4) + "\"");
    }
  }
  pos_ += 4;
}

std::uint32_t ByteReader::u32() {
  need(4, "u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

nlohmann::ordered_json ByteReader::json_header() {
  const std::size_t len_offset = pos_;
  const std::uint32_t len = u32();
  need(len, "header");
  const char* begin = reinterpret_cast<const char*>(bytes_.data() + pos_);
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(begin, begin + len);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(pos_, std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) throw FormatError(len_offset, "header must be a JSON object");
  pos_ += len;
  return header;
}

void write_bytes_file(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<std::uint8_t> read_bytes_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace candle
