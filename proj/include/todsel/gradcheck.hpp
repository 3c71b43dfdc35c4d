// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
//
// Central-finite-difference verification of reverse-mode gradients. Runs in
// 64-bit only (float32 finite differences are dominated by rounding error).
// Points where the loss is locally non-smooth (detected through the second
// difference) are reported as non-checkable rather than silently passed.
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "todsel/autodiff.hpp"
#include "todsel/rng.hpp"

namespace todsel::ts {

struct CheckEntry {
  std::string param;
  size_t index = 0;
  double analytic = 0;
  double finite_diff = 0;
  double rel_error = 0;
  bool non_checkable = false;  // kink / subgradient point
};

struct CheckReport {
  std::vector<CheckEntry> entries;
  double max_rel_error = 0;
  size_t checked = 0;
  size_t non_checkable = 0;
  bool passed = false;
  std::string failure;  // non-empty on structural failure (non-finite loss, ...)

  const CheckEntry* worst() const {
    const CheckEntry* w = nullptr;
    for (const auto& e : entries)
      if (!e.non_checkable && (!w || e.rel_error > w->rel_error)) w = &e;
    return w;
  }
};

struct NamedParam {
  std::string name;
  Var<double> var;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // When > 0, check this many parameter entries sampled across all tensors
  // instead of every entry.
  size_t sample_entries = 0;
  uint64_t sample_seed = 0;
  // Second difference above kink_scale * step flags a non-smooth point.
  double kink_scale = 0.1;
};

// loss_fn must rebuild the loss from the *current* parameter values and be
// deterministic (fixed RNG draws, fixed data) between calls.
inline CheckReport grad_check(const std::function<Var<double>()>& loss_fn,
                              const std::vector<NamedParam>& params,
                              const GradCheckOptions& opt = {}) {
  CheckReport report;

  for (const auto& p : params) p.var.zero_grad();
  double f0 = 0;
  Var<double> loss;
  try {
    loss = loss_fn();
    f0 = loss.item();
  } catch (const NonFiniteError& e) {
    report.failure = std::string("loss evaluation failed at the base point: ") + e.what();
    return report;
  }
  if (!std::isfinite(f0)) {
    report.failure = "loss is non-finite at the base point";
    return report;
  }
  backward(loss);

  std::vector<std::vector<double>> analytic(params.size());
  for (size_t i = 0; i < params.size(); ++i)
    analytic[i] = params[i].var.has_grad() ? params[i].var.grad().data
                                           : std::vector<double>(params[i].var.val().numel(), 0.0);

  // Enumerate (param, index) pairs to check.
  std::vector<std::pair<size_t, size_t>> points;
  size_t total_entries = 0;
  for (const auto& p : params) total_entries += p.var.val().numel();
  if (opt.sample_entries > 0 && opt.sample_entries < total_entries) {
    Rng rng(opt.sample_seed);
    for (size_t k = 0; k < opt.sample_entries; ++k) {
      size_t flat = rng.uniform_int(total_entries);
      for (size_t i = 0; i < params.size(); ++i) {
        const size_t n = params[i].var.val().numel();
        if (flat < n) {
          points.emplace_back(i, flat);
          break;
        }
        flat -= n;
      }
    }
  } else {
    for (size_t i = 0; i < params.size(); ++i)
      for (size_t j = 0; j < params[i].var.val().numel(); ++j) points.emplace_back(i, j);
  }

  const double h = opt.step;
  NoGradGuard no_grad;
  for (auto [pi, j] : points) {
    auto& data = const_cast<Array<double>&>(params[pi].var.val()).data;
    const double orig = data[j];

    CheckEntry e;
    e.param = params[pi].name;
    e.index = j;
    e.analytic = analytic[pi][j];

    double fp = 0, fm = 0;
    try {
      data[j] = orig + h;
      fp = loss_fn().item();
      data[j] = orig - h;
      fm = loss_fn().item();
    } catch (const NonFiniteError&) {
      fp = std::numeric_limits<double>::quiet_NaN();
    }
    data[j] = orig;

    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      report.failure = "loss is non-finite when perturbing parameter '" + e.param + "' [" +
                       std::to_string(j) + "]";
      report.entries.push_back(e);
      return report;
    }
    e.finite_diff = (fp - fm) / (2.0 * h);
    // A C^2 loss has fp + fm - 2 f0 = O(h^2); a kink makes it O(h).
    if (std::abs(fp + fm - 2.0 * f0) > opt.kink_scale * h) {
      e.non_checkable = true;
      report.non_checkable++;
    } else {
      const double denom = std::max({1.0, std::abs(e.analytic), std::abs(e.finite_diff)});
      e.rel_error = std::abs(e.analytic - e.finite_diff) / denom;
      report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
      report.checked++;
    }
    report.entries.push_back(e);
  }

  report.passed = report.failure.empty() && report.checked > 0 &&
                  report.max_rel_error <= opt.tolerance;
  return report;
}

}  // namespace todsel::ts
