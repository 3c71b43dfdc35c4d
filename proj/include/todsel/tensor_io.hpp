// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
//
// Tensor file format: one raw file per tensor, little-endian float32 values
// in row-major order, plus a JSON manifest mapping name -> {shape, dtype,
// file}. Checkpoints embed the model config in the same manifest.
#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "todsel/array.hpp"

namespace todsel::ts {

void write_tensor_file(const std::string& path, const Array<float>& a);
Array<float> read_tensor_file(const std::string& path, const std::vector<size_t>& shape);

// Writes <dir>/manifest.json plus one .bin per tensor. `extra` fields are
// merged into the manifest root (e.g. model_config).
void save_tensor_set(const std::string& dir, const std::map<std::string, Array<float>>& tensors,
                     const nlohmann::json& extra);

std::map<std::string, Array<float>> load_tensor_set(const std::string& dir,
                                                    nlohmann::json* manifest_out = nullptr);

std::string tensor_file_name(const std::string& tensor_name);

}  // namespace todsel::ts
