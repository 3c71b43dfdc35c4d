// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include <json.hpp>

namespace todsel::cli {

inline constexpr const char* kCodeVersion = "0.1.0";

// Every artifact-producing command writes exactly one run_manifest.json into
// its output directory. Timestamps live only here, so every other output
// file is byte-stable across reruns.
struct RunManifest {
  std::string command;
  std::string config_path;
  uint64_t seed = 0;
  std::string corpus_hash;
  std::string out_dir;
  nlohmann::json extra = nlohmann::json::object();

  void write() const;
};

std::string now_iso8601();
// Combined content hash of the five corpus documents.
std::string corpus_dir_hash(const std::string& dir);

}  // namespace todsel::cli
