#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "diffsr/error.hpp"

namespace diffsr::detail {

inline void append_f32_le(std::vector<std::uint8_t>& out, std::span<const float> values) {
  const std::size_t base = out.size();
  out.resize(base + values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[base + i * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
}

inline std::vector<float> read_f32_le(std::span<const std::uint8_t> bytes, std::size_t count) {
  std::vector<float> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
  return values;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open '" + path + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::Io, "short write to '" + path + "'");
}

/// Splits "<json>\n<payload>" and returns the header text; payload starts at `payload_offset`.
inline std::string split_header(std::span<const std::uint8_t> bytes, std::size_t& payload_offset) {
  const auto* begin = bytes.data();
  const auto* nl = static_cast<const std::uint8_t*>(std::memchr(begin, '\n', bytes.size()));
  require(nl != nullptr, ErrorKind::MalformedHeader, "missing header terminator");
  payload_offset = static_cast<std::size_t>(nl - begin) + 1;
  return std::string(reinterpret_cast<const char*>(begin), payload_offset - 1);
}

}  // namespace diffsr::detail
