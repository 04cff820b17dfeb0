#ifndef RPFEM_RPKG_IO_HPP_
#define RPFEM_RPKG_IO_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <zlib.h>

#include <json.hpp>

#include "rpfem/bytes.hpp"
#include "rpfem/rpkg.hpp"

namespace rpfem {

// Layout:
//   "RPKG" | u16 version | u32 header length | JSON header
//   | D as f64-le (C*F) | K as f64-le (C*C*R) | u32 CRC32 of everything before

inline constexpr std::string_view kRpkgMagic = "RPKG";
inline constexpr std::uint16_t kRpkgVersion = 1;

inline std::uint32_t crc32_of(std::string_view data) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size()));
  return static_cast<std::uint32_t>(crc);
}

inline std::string serialize_rpkg(const Rpkg& g) {
  g.validate();
  nlohmann::json header;
  header["classes"] = g.classes;
  std::vector<std::string> relations;
  for (Relation r : g.relations) relations.emplace_back(relation_name(r));
  header["relations"] = relations;
  header["D_shape"] = g.D.shape;
  header["K_shape"] = g.K.shape;
  const std::string header_text = header.dump();

  std::string out(kRpkgMagic);
  bytes::put_u16(out, kRpkgVersion);
  bytes::put_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out += header_text;
  bytes::put_f64s(out, g.D.data);
  bytes::put_f64s(out, g.K.data);
  bytes::put_u32(out, crc32_of(out));
  return out;
}

inline Rpkg deserialize_rpkg(std::string_view in) {
  constexpr std::size_t kFixed = 4 + 2 + 4;
  if (in.size() < kFixed + 4) throw ChecksumError("RPKG: file truncated");
  const auto stored = static_cast<std::uint32_t>(bytes::get_uint(in, in.size() - 4, 4));
  if (crc32_of(in.substr(0, in.size() - 4)) != stored) {
    throw ChecksumError("RPKG: checksum mismatch (file truncated or corrupted)");
  }
  if (in.substr(0, 4) != kRpkgMagic) throw FormatError("RPKG: bad magic bytes");
  const auto version = static_cast<std::uint16_t>(bytes::get_uint(in, 4, 2));
  if (version != kRpkgVersion) {
    throw VersionError("RPKG: version " + std::to_string(version) + " not supported (expected " +
                       std::to_string(kRpkgVersion) + ")");
  }
  const auto header_len = static_cast<std::size_t>(bytes::get_uint(in, 6, 4));
  if (kFixed + header_len + 4 > in.size()) throw FormatError("RPKG: header runs past end of file");

  Rpkg g;
  Shape d_shape, k_shape;
  try {
    const auto header = nlohmann::json::parse(in.substr(kFixed, header_len));
    g.classes = header.at("classes").get<std::vector<std::string>>();
    for (const auto& r : header.at("relations")) g.relations.push_back(parse_relation(r.get<std::string>()));
    d_shape = header.at("D_shape").get<Shape>();
    k_shape = header.at("K_shape").get<Shape>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("RPKG header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("RPKG header: ") + e.what());
  }
  const std::size_t C = g.classes.size();
  if (d_shape.size() != 2 || d_shape[0] != C) {
    throw FormatError("RPKG: declared D shape " + shape_str(d_shape) + " does not match " +
                      std::to_string(C) + " classes");
  }
  if (k_shape != Shape{C, C, relation_channels(g.relations)}) {
    throw FormatError("RPKG: declared K shape " + shape_str(k_shape) + " does not match C = " +
                      std::to_string(C) + ", R = " + std::to_string(relation_channels(g.relations)));
  }
  const std::size_t d_count = numel(d_shape), k_count = numel(k_shape);
  const std::size_t blob_start = kFixed + header_len;
  if (blob_start + 8 * (d_count + k_count) + 4 != in.size()) {
    throw FormatError("RPKG: payload length does not match declared shapes");
  }
  g.D = NDArray(d_shape, bytes::get_f64s(in, blob_start, d_count));
  g.K = NDArray(k_shape, bytes::get_f64s(in, blob_start + 8 * d_count, k_count));
  return g;
}

inline void save_rpkg(const std::filesystem::path& path, const Rpkg& g) {
  bytes::write_file(path, serialize_rpkg(g));
}

inline Rpkg load_rpkg(const std::filesystem::path& path) {
  return deserialize_rpkg(bytes::read_file(path));
}

}  // namespace rpfem

#endif  // RPFEM_RPKG_IO_HPP_
