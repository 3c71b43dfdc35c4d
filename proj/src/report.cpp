// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
#include "todsel/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "todsel/evaluator.hpp"

namespace todsel::evaluation {

std::string comparison_table(const std::vector<ReportRow>& rows) {
  const std::vector<std::string> headers = {"Model",  "Variant", "Parameters", "Inform",
                                            "Success", "BLEU",    "Score"};
  std::vector<std::vector<std::string>> cells;
  cells.push_back(headers);
  char buf[64];
  for (const auto& r : rows) {
    std::vector<std::string> row = {r.name, r.variant, std::to_string(r.parameters)};
    for (double v : {r.inform, r.success, r.bleu, combined_score(r.inform, r.success, r.bleu)}) {
      std::snprintf(buf, sizeof(buf), "%.2f", v);
      row.push_back(buf);
    }
    cells.push_back(std::move(row));
  }
  std::vector<size_t> widths(headers.size(), 0);
  for (const auto& row : cells)
    for (size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  std::ostringstream os;
  for (size_t r = 0; r < cells.size(); ++r) {
    for (size_t c = 0; c < cells[r].size(); ++c) {
      os << cells[r][c] << std::string(widths[c] - cells[r][c].size() + 2, ' ');
    }
    os << "\n";
    if (r == 0) {
      size_t total = 0;
      for (size_t w : widths) total += w + 2;
      os << std::string(total, '-') << "\n";
    }
  }
  return os.str();
}

std::string curve_svg(const std::vector<nlohmann::json>& records,
                      const std::vector<std::string>& keys) {
  constexpr int kW = 720, kH = 400, kPad = 48;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"};

  std::vector<std::vector<std::pair<double, double>>> series(keys.size());
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& rec : records) {
    if (!rec.contains("step")) continue;
    const double x = rec.at("step").get<double>();
    for (size_t k = 0; k < keys.size(); ++k) {
      if (!rec.contains(keys[k]) || !rec.at(keys[k]).is_number()) continue;
      const double y = rec.at(keys[k]).get<double>();
      series[k].emplace_back(x, y);
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;

  const auto sx = [&](double x) {
    return kPad + (x - xmin) / (xmax - xmin) * (kW - 2 * kPad);
  };
  const auto sy = [&](double y) {
    return kH - kPad - (y - ymin) / (ymax - ymin) * (kH - 2 * kPad);
  };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
  os << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
  os << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kW - kPad << "\" y2=\""
     << kH - kPad << "\" stroke=\"#444\"/>\n";
  os << "<line x1=\"" << kPad << "\" y1=\"" << kPad << "\" x2=\"" << kPad << "\" y2=\""
     << kH - kPad << "\" stroke=\"#444\"/>\n";
  char buf[128];
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%d\" y=\"%d\" font-size=\"11\" fill=\"#444\">%g</text>", 4, kH - kPad,
                ymin);
  os << buf << "\n";
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%d\" y=\"%d\" font-size=\"11\" fill=\"#444\">%g</text>", 4, kPad, ymax);
  os << buf << "\n";
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%d\" y=\"%d\" font-size=\"11\" fill=\"#444\">step %g..%g</text>",
                kW / 2 - 40, kH - 12, xmin, xmax);
  os << buf << "\n";

  for (size_t k = 0; k < keys.size(); ++k) {
    if (series[k].empty()) continue;
    os << "<polyline fill=\"none\" stroke=\"" << kColors[k % 5] << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : series[k]) os << sx(x) << "," << sy(y) << " ";
    os << "\"/>\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%zu\" font-size=\"12\" fill=\"%s\">%s</text>", kW - kPad - 90,
                  kPad + 16 * (k + 1), kColors[k % 5], keys[k].c_str());
    os << buf << "\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace todsel::evaluation
