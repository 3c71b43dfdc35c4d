// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
#include "todsel/tensor_io.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "todsel/util.hpp"

namespace todsel::ts {

namespace fs = std::filesystem;

std::string tensor_file_name(const std::string& tensor_name) {
  std::string out;
  out.reserve(tensor_name.size() + 4);
  for (char c : tensor_name) out.push_back(c == '.' ? '_' : c);
  return out + ".bin";
}

void write_tensor_file(const std::string& path, const Array<float>& a) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write tensor file: " + path);
  for (float v : a.data) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    const unsigned char bytes[4] = {
        static_cast<unsigned char>(bits & 0xff), static_cast<unsigned char>((bits >> 8) & 0xff),
        static_cast<unsigned char>((bits >> 16) & 0xff),
        static_cast<unsigned char>((bits >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(bytes), 4);
  }
  if (!out) throw IoError("write failed: " + path);
}

Array<float> read_tensor_file(const std::string& path, const std::vector<size_t>& shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tensor file: " + path);
  Array<float> a(shape);
  for (float& v : a.data) {
    unsigned char bytes[4];
    in.read(reinterpret_cast<char*>(bytes), 4);
    if (!in) throw IoError("tensor file truncated: " + path);
    const uint32_t bits = static_cast<uint32_t>(bytes[0]) | (static_cast<uint32_t>(bytes[1]) << 8) |
                          (static_cast<uint32_t>(bytes[2]) << 16) |
                          (static_cast<uint32_t>(bytes[3]) << 24);
    std::memcpy(&v, &bits, 4);
  }
  char extra;
  if (in.read(&extra, 1)) throw IoError("tensor file larger than manifest shape: " + path);
  return a;
}

void save_tensor_set(const std::string& dir, const std::map<std::string, Array<float>>& tensors,
                     const nlohmann::json& extra) {
  fs::create_directories(dir);
  nlohmann::json manifest = extra;
  nlohmann::json entries = nlohmann::json::object();
  for (const auto& [name, arr] : tensors) {
    const std::string file = tensor_file_name(name);
    write_tensor_file((fs::path(dir) / file).string(), arr);
    entries[name] = {{"shape", arr.shape}, {"dtype", "f32"}, {"file", file}};
  }
  manifest["tensors"] = entries;
  write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

std::map<std::string, Array<float>> load_tensor_set(const std::string& dir,
                                                    nlohmann::json* manifest_out) {
  const auto manifest = nlohmann::json::parse(read_text_file((fs::path(dir) / "manifest.json").string()));
  if (manifest_out) *manifest_out = manifest;
  std::map<std::string, Array<float>> out;
  for (const auto& [name, entry] : manifest.at("tensors").items()) {
    if (entry.at("dtype").get<std::string>() != "f32")
      throw IoError("unsupported tensor dtype for '" + name + "'");
    const auto shape = entry.at("shape").get<std::vector<size_t>>();
    out.emplace(name, read_tensor_file((fs::path(dir) / entry.at("file").get<std::string>()).string(),
                                       shape));
  }
  return out;
}

}  // namespace todsel::ts
