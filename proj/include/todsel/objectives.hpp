// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
//
// Loss terms and their weighted composition: belief/response NLL, span
// cross-entropy, the two response-selection binary cross-entropies, and the
// weighted total. Selection BCE is evaluated in log-space (softplus form) so
// confident logits cannot underflow.
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "todsel/autodiff.hpp"

namespace todsel::objectives {

using ts::Var;

enum class Variant { none, after_encoder, differentiable };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::none: return "none";
    case Variant::after_encoder: return "after_encoder";
    case Variant::differentiable: return "differentiable";
  }
  throw ConfigError("unknown variant");
}

inline Variant variant_from_string(std::string s) {
  for (auto& c : s)
    if (c == '-') c = '_';
  if (s == "none") return Variant::none;
  if (s == "after_encoder") return Variant::after_encoder;
  if (s == "differentiable") return Variant::differentiable;
  throw ConfigError("unknown variant '" + s + "' (expected none|after-encoder|differentiable)");
}

struct LossWeights {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 0.5;
  double delta = 0.5;

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0 || delta < 0)
      throw ConfigError("loss weights must be nonnegative");
  }

  nlohmann::json to_json() const {
    return {{"alpha", alpha}, {"beta", beta}, {"gamma", gamma}, {"delta", delta}};
  }
  static LossWeights from_json(const nlohmann::json& j) {
    LossWeights w;
    if (j.contains("alpha")) w.alpha = j.at("alpha").get<double>();
    if (j.contains("beta")) w.beta = j.at("beta").get<double>();
    if (j.contains("gamma")) w.gamma = j.at("gamma").get<double>();
    if (j.contains("delta")) w.delta = j.at("delta").get<double>();
    w.validate();
    return w;
  }
};

template <typename T>
struct LossBreakdown {
  Var<T> belief_nll, resp_nll, span_ce, select_bce, total;
  Variant variant = Variant::none;
  bool span_empty = false;
};

// Mean over non-pad positions of -log softmax(logits)[target].
template <typename T>
Var<T> lm_nll(const Var<T>& logits, const std::vector<int>& targets, int pad_id) {
  if (logits.val().rank() != 2 || targets.size() != logits.val().rows())
    throw ShapeError("lm_nll: need one target per logit row");
  std::vector<uint8_t> include(targets.size());
  size_t real = 0;
  for (size_t i = 0; i < targets.size(); ++i) {
    include[i] = targets[i] != pad_id;
    real += include[i];
  }
  if (real == 0) throw ValidationError("lm_nll: all targets are padding");
  return ts::cross_entropy_rows(logits, targets, include);
}

// Mean token-level cross-entropy over masked-in positions. An empty mask
// contributes zero and raises `empty_flag` (turns without user tokens).
template <typename T>
Var<T> span_loss(const Var<T>& tag_logits, const std::vector<int>& tags,
                 const std::vector<uint8_t>& mask, bool* empty_flag = nullptr) {
  if (tags.size() != tag_logits.val().rows() || mask.size() != tags.size())
    throw ShapeError("span_loss: need one tag and mask flag per row");
  size_t real = 0;
  for (uint8_t m : mask) real += (m != 0);
  if (empty_flag) *empty_flag = real == 0;
  if (real == 0) return ts::constant(ts::Array<T>::scalar(T(0)), "span_empty");
  return ts::cross_entropy_rows(tag_logits, tags, mask);
}

namespace detail {
// -log sigmoid(pos) - log(1 - sigmoid(neg)), in softplus form. Output is a
// rank-1 scalar regardless of the logits' layout ([1x1] from a linear head).
template <typename T>
Var<T> pair_bce(const Var<T>& pos_logit, const Var<T>& neg_logit) {
  if (pos_logit.val().numel() != 1 || neg_logit.val().numel() != 1)
    throw ShapeError("selection loss expects scalar logits");
  return ts::sum_all(ts::add(ts::softplus(ts::neg(pos_logit)), ts::softplus(neg_logit)));
}
}  // namespace detail

// Variant 1: ground-truth pair (C_t,T_t) labeled 1, distractor pair (C_t,D_t)
// labeled 0, both scored by the head over pooled encoder states.
template <typename T>
Var<T> select_loss_enc(const Var<T>& logit_truth, const Var<T>& logit_distractor) {
  return detail::pair_bce(logit_truth, logit_distractor);
}

// Variant 2: one-hot ground truth labeled 1, straight-through decoder sample
// labeled 0, both scored by the head over token-distribution sequences.
template <typename T>
Var<T> select_loss_seq(const Var<T>& logit_truth, const Var<T>& logit_generated) {
  return detail::pair_bce(logit_truth, logit_generated);
}

// Weighted total on the same graph as its components: gradients flow to every
// contributing parameter. `select_bce` must be defined unless variant==none.
template <typename T>
LossBreakdown<T> total_loss(const Var<T>& belief_nll, const Var<T>& resp_nll,
                            const Var<T>& span_ce, const Var<T>& select_bce,
                            const LossWeights& weights, Variant variant) {
  weights.validate();
  for (const Var<T>* c : {&belief_nll, &resp_nll, &span_ce})
    if (!c->defined() || c->val().numel() != 1)
      throw ShapeError("total_loss: components must be defined scalars");
  LossBreakdown<T> out;
  out.variant = variant;
  out.belief_nll = belief_nll;
  out.resp_nll = resp_nll;
  out.span_ce = span_ce;
  Var<T> total = ts::add(ts::add(ts::scale(belief_nll, static_cast<T>(weights.alpha)),
                                 ts::scale(resp_nll, static_cast<T>(weights.beta))),
                         ts::scale(span_ce, static_cast<T>(weights.gamma)));
  if (variant != Variant::none) {
    if (!select_bce.defined() || select_bce.val().numel() != 1)
      throw ShapeError("total_loss: selection component required for variant " +
                       variant_name(variant));
    out.select_bce = select_bce;
    total = ts::add(total, ts::scale(select_bce, static_cast<T>(weights.delta)));
  }
  out.total = total;
  return out;
}

}  // namespace todsel::objectives
