// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
#include "todsel/run_manifest.hpp"

#include <ctime>
#include <filesystem>

#include "todsel/util.hpp"

namespace todsel::cli {

namespace fs = std::filesystem;

std::string now_iso8601() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string corpus_dir_hash(const std::string& dir) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const std::string f : {"schema.json", "vocab.txt", "train.json", "dev.json", "test.json"}) {
    const std::string content = read_text_file((fs::path(dir) / f).string());
    h = fnv1a64(content.data(), content.size(), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void RunManifest::write() const {
  fs::create_directories(out_dir);
  nlohmann::json j = {{"command", command},
                      {"config_path", config_path},
                      {"seed", seed},
                      {"code_version", kCodeVersion},
                      {"corpus_hash", corpus_hash},
                      {"out_dir", out_dir},
                      {"created_at", now_iso8601()}};
  for (const auto& [k, v] : extra.items()) j[k] = v;
  write_text_file((fs::path(out_dir) / "run_manifest.json").string(), j.dump(2) + "\n");
}

}  // namespace todsel::cli
