#ifndef RPFEM_BYTES_HPP_
#define RPFEM_BYTES_HPP_

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "rpfem/errors.hpp"

namespace rpfem::bytes {

// Little-endian encoding independent of host byte order.

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

inline void put_f64s(std::string& out, std::span<const double> values) {
  out.reserve(out.size() + 8 * values.size());
  for (double v : values) put_f64(out, v);
}

inline std::uint64_t get_uint(std::string_view in, std::size_t pos, int width) {
  std::uint64_t v = 0;
  for (int b = 0; b < width; ++b) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + b])) << (8 * b);
  }
  return v;
}

inline double get_f64(std::string_view in, std::size_t pos) {
  return std::bit_cast<double>(get_uint(in, pos, 8));
}

inline std::vector<double> get_f64s(std::string_view in, std::size_t pos, std::size_t count) {
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = get_f64(in, pos + 8 * i);
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw Error("short write to " + path.string());
}

}  // namespace rpfem::bytes

#endif  // RPFEM_BYTES_HPP_
