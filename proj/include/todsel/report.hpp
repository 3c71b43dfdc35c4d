// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
//
// Comparison tables across evaluated runs (one row per checkpoint, columns
// Model / Variant / Parameters / Inform / Success / BLEU / Score) and simple
// SVG curve plots from training logs.
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace todsel::evaluation {

struct ReportRow {
  std::string name;
  std::string variant;
  size_t parameters = 0;
  double inform = 0;
  double success = 0;
  double bleu = 0;
};

// Score column is recomputed from the components.
std::string comparison_table(const std::vector<ReportRow>& rows);

// Line plot of per-step values from training-log records; `keys` selects the
// numeric fields to draw (e.g. {"total", "resp_nll"}).
std::string curve_svg(const std::vector<nlohmann::json>& records,
                      const std::vector<std::string>& keys);

}  // namespace todsel::evaluation
