#ifndef RPFEM_CHECKPOINT_HPP_
#define RPFEM_CHECKPOINT_HPP_

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "rpfem/bytes.hpp"
#include "rpfem/grad_check.hpp"
#include "rpfem/tensor.hpp"

namespace rpfem {

// A checkpoint is two files: <base>.json, a manifest listing
// {name, shape, offset} per parameter, and <base>.bin, the little-endian
// float64 values back to back.

inline void save_checkpoint(const std::filesystem::path& base,
                            const std::vector<NamedTensor>& params) {
  nlohmann::json manifest;
  manifest["format"] = "rpfem-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "float64-le";
  nlohmann::json entries = nlohmann::json::array();
  std::string blob;
  for (const auto& [name, t] : params) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", blob.size()}});
    bytes::put_f64s(blob, t.data());
  }
  manifest["tensors"] = std::move(entries);
  manifest["total_bytes"] = blob.size();
  auto json_path = base;
  json_path += ".json";
  auto bin_path = base;
  bin_path += ".bin";
  bytes::write_file(json_path, manifest.dump(2) + "\n");
  bytes::write_file(bin_path, blob);
}

inline std::map<std::string, NDArray> load_checkpoint(const std::filesystem::path& base) {
  auto json_path = base;
  json_path += ".json";
  auto bin_path = base;
  bin_path += ".bin";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes::read_file(json_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(json_path.string() + ": " + e.what());
  }
  const std::string blob = bytes::read_file(bin_path);
  try {
    if (manifest.at("version").get<int>() != 1) {
      throw VersionError(json_path.string() + ": unsupported checkpoint version");
    }
    const auto total = manifest.at("total_bytes").get<std::size_t>();
    if (blob.size() != total) {
      throw FormatError(bin_path.string() + ": expected " + std::to_string(total) +
                        " bytes, found " + std::to_string(blob.size()));
    }
    std::map<std::string, NDArray> out;
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const std::size_t count = numel(shape);
      if (offset + 8 * count > blob.size()) {
        throw FormatError(json_path.string() + ": tensor " + name + " runs past the blob");
      }
      out.emplace(name, NDArray(shape, bytes::get_f64s(blob, offset, count)));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(json_path.string() + ": " + e.what());
  }
}

/// Copies checkpoint values into existing parameters, matching by name.
inline void restore_parameters(const std::map<std::string, NDArray>& values,
                               std::vector<NamedTensor>& params) {
  for (auto& [name, t] : params) {
    auto it = values.find(name);
    if (it == values.end()) throw FormatError("checkpoint has no tensor " + name);
    if (it->second.shape != t.shape()) {
      throw DimensionError("checkpoint tensor " + name + " has shape " +
                           shape_str(it->second.shape) + ", model expects " +
                           shape_str(t.shape()));
    }
    std::copy(it->second.data.begin(), it->second.data.end(), t.mutable_data().begin());
  }
}

}  // namespace rpfem

#endif  // RPFEM_CHECKPOINT_HPP_
