#pragma once

#include <nlohmann/json.hpp>

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "uwf/tensor.hpp"

namespace uwf {

/// Self-describing weight archive: 8-byte magic, u32 version, u64 JSON
/// length, UTF-8 JSON metadata, then raw float32 (little-endian) tensor data
/// in the order listed under meta["tensors"].
struct CheckpointFile {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

inline constexpr char kCkptMagic[8] = {'U', 'W', 'F', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& ckpt) {
  nlohmann::json meta = ckpt.meta;
  auto index = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.tensors)
    index.push_back({{"name", name}, {"shape", t.shape()}});
  meta["tensors"] = index;
  std::string js = meta.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint: " + path.string());
  f.write(kCkptMagic, 8);
  uint32_t version = 1;
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  uint64_t len = js.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(js.data(), static_cast<std::streamsize>(js.size()));
  for (const auto& [_, t] : ckpt.tensors)
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!f) throw DataError("short write on checkpoint: " + path.string());
}

inline CheckpointFile load_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint not found: " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw DataError("not a checkpoint file (bad magic): " + path.string());
  uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != 1)
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " +
                    path.string());
  uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string js(len, '\0');
  f.read(js.data(), static_cast<std::streamsize>(len));
  if (!f) throw DataError("truncated checkpoint metadata: " + path.string());

  CheckpointFile ckpt;
  ckpt.meta = nlohmann::json::parse(js);
  for (const auto& entry : ckpt.meta.at("tensors")) {
    std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!f) throw DataError("truncated tensor data in checkpoint: " + path.string());
    ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

}  // namespace uwf
