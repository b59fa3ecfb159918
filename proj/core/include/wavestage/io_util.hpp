#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "wavestage/errors.hpp"

namespace wavestage {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");

inline std::vector<char> read_file_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open file: " + p.string());
  f.seekg(0, std::ios::end);
  std::streamoff n = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<char> bytes(static_cast<size_t>(n));
  if (n > 0) f.read(bytes.data(), n);
  if (!f) throw IoError("short read: " + p.string());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& p, const void* data, size_t n) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open file for writing: " + p.string());
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!f) throw IoError("short write: " + p.string());
}

inline void write_file_text(const std::filesystem::path& p, const std::string& text) {
  write_file_bytes(p, text.data(), text.size());
}

inline std::string read_file_text(const std::filesystem::path& p) {
  auto bytes = read_file_bytes(p);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace wavestage
