#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "aclf/model.hpp"

// Versioned binary checkpoint. Layout, all integers and reals little-endian:
//   "ACLF"
//   u32 config blob length, then that many bytes of UTF-8 JSON
//   u32 format version (currently 1)
//   u32 parameter count
//   per parameter: u16 name length, name bytes, u8 rank, u32 per dimension,
//                  then the row-major 64-bit reals.
// The JSON blob holds the model config plus optional training bookkeeping
// ("step", "epoch").

namespace aclf {

static_assert(std::endian::native == std::endian::little,
              "checkpoint layout assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const CaptionerModel& model,
                            const nlohmann::json& extra = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  os.write("ACLF", 4);
  nlohmann::json blob = model.config().to_json();
  for (auto it = extra.begin(); it != extra.end(); ++it)
    blob[it.key()] = it.value();
  const std::string json = blob.dump();
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(json.size()));
  os.write(json.data(), static_cast<std::streamsize>(json.size()));
  detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
  const auto& params = model.named_parameters();
  detail::write_pod<std::uint32_t>(os,
                                   static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::write_pod<std::uint16_t>(os,
                                     static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t dim : t.shape())
      detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(dim));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

struct LoadedCheckpoint {
  ModelConfig config;
  nlohmann::json blob;  // full JSON, including bookkeeping keys
  std::vector<std::pair<std::string, Tensor>> params;
};

inline LoadedCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "ACLF", 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  const auto json_len = detail::read_pod<std::uint32_t>(is);
  std::string json(json_len, '\0');
  is.read(json.data(), json_len);
  if (!is) throw IoError("checkpoint: truncated config blob");
  LoadedCheckpoint out;
  out.blob = nlohmann::json::parse(json);
  out.config = ModelConfig::from_json(out.blob, /*strict=*/false);
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported format version " +
                  std::to_string(version));
  const auto count = detail::read_pod<std::uint32_t>(is);
  out.params.reserve(count);
  for (std::uint32_t p = 0; p < count; ++p) {
    const auto name_len = detail::read_pod<std::uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = detail::read_pod<std::uint8_t>(is);
    std::vector<std::size_t> shape(rank);
    for (std::uint8_t r = 0; r < rank; ++r)
      shape[r] = detail::read_pod<std::uint32_t>(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw IoError("checkpoint: truncated tensor " + name);
    out.params.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

// Rebuild a model from a checkpoint; names, count and shapes must match the
// registry the config produces.
inline CaptionerModel load_model(const LoadedCheckpoint& ckpt) {
  CaptionerModel model(ckpt.config);
  const auto& params = model.named_parameters();
  detail::require(params.size() == ckpt.params.size(),
                  "checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    detail::require(params[i].first == ckpt.params[i].first,
                    "checkpoint: parameter name mismatch at index " +
                        std::to_string(i) + ": " + params[i].first + " vs " +
                        ckpt.params[i].first);
    detail::require(params[i].second.shape() == ckpt.params[i].second.shape(),
                    "checkpoint: shape mismatch for " + params[i].first);
    Tensor dst = params[i].second;
    dst.values() = ckpt.params[i].second.values();
  }
  return model;
}

inline CaptionerModel load_model(const std::string& path) {
  return load_model(read_checkpoint(path));
}

}  // namespace aclf
