// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable discrete sampling: Gumbel(0,1) noise, the Gumbel-Softmax
// relaxation over token logits, straight-through hardening to one-hot rows,
// and the linear temperature schedule.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "todsel/autodiff.hpp"
#include "todsel/rng.hpp"
#include "todsel/util.hpp"

namespace todsel::gumbel {

using ts::Array;
using ts::Rng;
using ts::Var;

struct GumbelConfig {
  double tau_initial = 4.0;
  double tau_final = 0.8;
  bool hard = true;
  double epsilon_floor = 1e-12;

  void validate() const {
    if (!(tau_initial >= tau_final && tau_final > 0))
      throw ConfigError("gumbel temperatures must satisfy tau_initial >= tau_final > 0");
    if (!(epsilon_floor > 0 && epsilon_floor < 0.5))
      throw ConfigError("gumbel epsilon_floor must be a small positive real");
  }
};

// One relaxed sample sequence: soft rows always sum to 1; hard is set after
// straight_through() and is exactly one-hot at each row's argmax.
template <typename T>
struct SoftSample {
  Var<T> soft;
  Var<T> hard;
  std::vector<int> argmax_ids;
};

inline double gumbel_from_uniform(double u, double eps = 1e-12) {
  u = std::min(std::max(u, eps), 1.0 - eps);
  return -std::log(-std::log(u));
}

// i.i.d. standard Gumbel(0,1) noise via g = -log(-log(u)), u ~ Uniform(0,1).
template <typename T>
Array<T> gumbel_noise(std::vector<size_t> shape, Rng& rng, double eps = 1e-12) {
  Array<T> out(std::move(shape));
  for (auto& v : out.data) v = static_cast<T>(gumbel_from_uniform(rng.uniform01(), eps));
  return out;
}

template <typename T>
std::vector<int> row_argmax(const Array<T>& rows) {
  std::vector<int> ids(rows.rows());
  const size_t v = rows.cols();
  for (size_t r = 0; r < rows.rows(); ++r) {
    const T* row = rows.data.data() + r * v;
    ids[r] = static_cast<int>(std::max_element(row, row + v) - row);
  }
  return ids;
}

// y = softmax((logits + g) / tau) row-wise. Noise is applied to the raw
// logits, which coincides with sampling from softmax(logits) in the
// Gumbel-max limit and keeps the expression defined for negative logits.
template <typename T>
SoftSample<T> gumbel_softmax_with_noise(const Var<T>& logits, double tau, const Array<T>& noise) {
  if (!(tau > 0)) throw ConfigError("gumbel_softmax: tau must be > 0");
  ts::require_same_shape(logits.val(), noise, "gumbel_softmax noise");
  auto noisy = ts::add(logits, ts::constant(noise, "gumbel_noise"));
  auto scaled = ts::scale(noisy, static_cast<T>(1.0 / tau));
  SoftSample<T> s;
  s.soft = ts::softmax_rows(scaled);
  s.argmax_ids = row_argmax(s.soft.val());
  return s;
}

template <typename T>
SoftSample<T> gumbel_softmax(const Var<T>& logits, double tau, Rng& rng, double eps = 1e-12) {
  return gumbel_softmax_with_noise(logits, tau, gumbel_noise<T>(logits.val().shape, rng, eps));
}

// Forward value becomes the exact one-hot at each row argmax (lowest index
// wins ties); gradients still flow through the soft values unchanged.
template <typename T>
SoftSample<T> straight_through(SoftSample<T> sample) {
  if (!sample.soft.defined()) throw ValidationError("straight_through: soft sample missing");
  sample.hard = ts::hard_onehot_straight_through(sample.soft);
  sample.argmax_ids = row_argmax(sample.soft.val());
  return sample;
}

// Linear interpolation from tau_initial at step 0 to tau_final at total_steps.
inline double tau_schedule(long long step, long long total_steps, const GumbelConfig& cfg) {
  cfg.validate();
  if (total_steps < 1) throw ConfigError("tau_schedule: total_steps must be >= 1");
  if (step < 0 || step > total_steps) {
    warn("tau_schedule: step " + std::to_string(step) + " outside [0," +
         std::to_string(total_steps) + "], clamping");
    step = std::min(std::max(step, 0LL), total_steps);
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return cfg.tau_initial + (cfg.tau_final - cfg.tau_initial) * frac;
}

}  // namespace todsel::gumbel
