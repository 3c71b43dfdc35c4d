// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
//
// Pre-layer-norm transformer with a shared encoder, separate belief and
// response decoder stacks over tied token embeddings, a per-token span tag
// head, and two response-selection heads: one over pooled encoder states and
// one over (soft) token-distribution sequences. Templated on the scalar type
// so training runs in float and gradient checks rerun the same graph in
// double.
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "todsel/autodiff.hpp"
#include "todsel/rng.hpp"
#include "todsel/tensor_io.hpp"

namespace todsel::model {

using ts::Array;
using ts::Rng;
using ts::Var;

struct ModelConfig {
  size_t vocab_size = 0;
  size_t d_model = 64;
  size_t n_heads = 4;
  size_t n_encoder_layers = 2;
  size_t n_decoder_layers = 2;
  size_t d_ff = 128;
  size_t max_seq_len = 160;
  size_t n_span_tags = 11;
  double dropout_rate = 0.0;
  double init_std = 0.02;

  static constexpr size_t kReservedSpecialTokens = 15;

  void validate() const {
    if (vocab_size < kReservedSpecialTokens)
      throw ConfigError("model config: vocab_size must cover the reserved special tokens");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw ConfigError("model config: d_model must be a positive multiple of n_heads");
    if (n_encoder_layers == 0 || n_decoder_layers == 0)
      throw ConfigError("model config: layer counts must be positive");
    if (d_ff == 0 || max_seq_len == 0 || n_span_tags == 0)
      throw ConfigError("model config: d_ff, max_seq_len, n_span_tags must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw ConfigError("model config: dropout_rate must be in [0,1)");
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size},
            {"d_model", d_model},
            {"n_heads", n_heads},
            {"n_encoder_layers", n_encoder_layers},
            {"n_decoder_layers", n_decoder_layers},
            {"d_ff", d_ff},
            {"max_seq_len", max_seq_len},
            {"n_span_tags", n_span_tags},
            {"dropout_rate", dropout_rate},
            {"init_std", init_std}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<size_t>();
    if (j.contains("d_model")) c.d_model = j.at("d_model").get<size_t>();
    if (j.contains("n_heads")) c.n_heads = j.at("n_heads").get<size_t>();
    if (j.contains("n_encoder_layers")) c.n_encoder_layers = j.at("n_encoder_layers").get<size_t>();
    if (j.contains("n_decoder_layers")) c.n_decoder_layers = j.at("n_decoder_layers").get<size_t>();
    if (j.contains("d_ff")) c.d_ff = j.at("d_ff").get<size_t>();
    if (j.contains("max_seq_len")) c.max_seq_len = j.at("max_seq_len").get<size_t>();
    if (j.contains("n_span_tags")) c.n_span_tags = j.at("n_span_tags").get<size_t>();
    if (j.contains("dropout_rate")) c.dropout_rate = j.at("dropout_rate").get<double>();
    if (j.contains("init_std")) c.init_std = j.at("init_std").get<double>();
    c.validate();
    return c;
  }
};

template <typename T>
struct EncoderState {
  Var<T> hidden;              // [len x d_model]
  std::vector<uint8_t> mask;  // 1 = real token, 0 = pad
};

enum class DecoderKind { belief, response };

template <typename T>
struct ParamInfo {
  std::string name;
  std::string group;
  Var<T> var;
};

namespace detail {

template <typename T>
struct LayerNormP {
  Var<T> gain, bias;
};
template <typename T>
struct AttnP {
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};
template <typename T>
struct FeedForwardP {
  Var<T> w1, b1, w2, b2;
};
template <typename T>
struct EncoderLayerP {
  LayerNormP<T> ln1;
  AttnP<T> attn;
  LayerNormP<T> ln2;
  FeedForwardP<T> ff;
};
template <typename T>
struct DecoderLayerP {
  LayerNormP<T> ln1;
  AttnP<T> self_attn;
  LayerNormP<T> ln2;
  AttnP<T> cross_attn;
  LayerNormP<T> ln3;
  FeedForwardP<T> ff;
};

}  // namespace detail

template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng init_rng = ts::stream_rng(init_seed, ts::Stream::init);
    build_params(init_rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<ParamInfo<T>>& params() const { return params_; }

  size_t n_parameters() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.var.val().numel();
    return n;
  }

  std::map<std::string, std::vector<Var<T>>> param_groups() const {
    std::map<std::string, std::vector<Var<T>>> groups;
    for (const auto& p : params_) groups[p.group].push_back(p.var);
    return groups;
  }

  void zero_grads() const {
    for (const auto& p : params_) p.var.zero_grad();
  }

  // -------------------------------------------------------------------------

  EncoderState<T> encode(std::vector<int> ids, std::vector<uint8_t> mask = {},
                         bool training = false, Rng* dropout_rng = nullptr) const {
    if (ids.empty()) throw ValidationError("encode: empty input sequence");
    if (mask.empty()) mask.assign(ids.size(), 1);
    if (mask.size() != ids.size())
      throw ShapeError("encode: mask length " + std::to_string(mask.size()) +
                       " != input length " + std::to_string(ids.size()));
    if (ids.size() > cfg_.max_seq_len) {
      warn("encode: input of " + std::to_string(ids.size()) + " tokens exceeds max_seq_len " +
           std::to_string(cfg_.max_seq_len) + ", truncating oldest history");
      ids.erase(ids.begin(), ids.end() - static_cast<ptrdiff_t>(cfg_.max_seq_len));
      mask.erase(mask.begin(), mask.end() - static_cast<ptrdiff_t>(cfg_.max_seq_len));
    }
    bool any_real = false;
    for (uint8_t m : mask) any_real |= (m != 0);
    if (!any_real) throw ValidationError("encode: empty effective sequence (all positions masked)");
    validate_ids(ids);

    const size_t len = ids.size();
    Var<T> x = ts::add(ts::embedding_rows(tok_emb_, ids), ts::slice_rows(pos_emb_, 0, len));
    x = maybe_dropout(x, training, dropout_rng);

    const Array<T> key_mask = pad_key_mask(len, mask);
    for (const auto& layer : enc_layers_) {
      Var<T> h = ln(layer.ln1, x);
      x = ts::add(x, attention(layer.attn, h, h, &key_mask, training, dropout_rng));
      Var<T> f = ln(layer.ln2, x);
      x = ts::add(x, feed_forward(layer.ff, f, training, dropout_rng));
    }
    return {ln(enc_final_ln_, x), std::move(mask)};
  }

  Var<T> decode(DecoderKind kind, const EncoderState<T>& enc,
                const std::vector<int>& prefix, bool training = false,
                Rng* dropout_rng = nullptr) const {
    if (prefix.empty()) throw ValidationError("decode: empty prefix");
    if (prefix.size() > cfg_.max_seq_len)
      throw ValidationError("decode: prefix of " + std::to_string(prefix.size()) +
                            " tokens exceeds max_seq_len");
    validate_ids(prefix);
    const auto& layers = kind == DecoderKind::belief ? belief_layers_ : resp_layers_;
    const auto& final_ln = kind == DecoderKind::belief ? belief_final_ln_ : resp_final_ln_;

    const size_t k = prefix.size();
    Var<T> x = ts::add(ts::embedding_rows(tok_emb_, prefix), ts::slice_rows(pos_emb_, 0, k));
    x = maybe_dropout(x, training, dropout_rng);

    const Array<T> causal = causal_mask(k);
    const size_t n = enc.hidden.val().rows();
    Array<T> cross(std::vector<size_t>{k, n}, T(0));
    for (size_t c = 0; c < n; ++c)
      if (!enc.mask[c])
        for (size_t r = 0; r < k; ++r) cross.at(r, c) = kMaskValue;

    for (const auto& layer : layers) {
      Var<T> h = ln(layer.ln1, x);
      x = ts::add(x, attention(layer.self_attn, h, h, &causal, training, dropout_rng));
      Var<T> c = ln(layer.ln2, x);
      x = ts::add(x, attention(layer.cross_attn, c, enc.hidden, &cross, training, dropout_rng));
      Var<T> f = ln(layer.ln3, x);
      x = ts::add(x, feed_forward(layer.ff, f, training, dropout_rng));
    }
    // tied output projection: logits = h E^T
    return ts::matmul_nt(ln(final_ln, x), tok_emb_);
  }

  Var<T> decode_belief(const EncoderState<T>& enc, const std::vector<int>& prefix,
                       bool training = false, Rng* rng = nullptr) const {
    return decode(DecoderKind::belief, enc, prefix, training, rng);
  }
  Var<T> decode_response(const EncoderState<T>& enc, const std::vector<int>& prefix,
                         bool training = false, Rng* rng = nullptr) const {
    return decode(DecoderKind::response, enc, prefix, training, rng);
  }

  // Per-token tag logits [len x n_span_tags] from the encoder top layer.
  Var<T> span_head(const EncoderState<T>& enc) const {
    return ts::add_rowvec(ts::matmul(enc.hidden, span_w_), span_b_);
  }

  // Scalar selection logit over the masked-mean-pooled encoding of a
  // context+candidate sequence.
  Var<T> select_head_enc(const EncoderState<T>& enc) const {
    Var<T> pooled = ts::masked_mean_rows(enc.hidden, enc.mask);
    return ts::add_rowvec(ts::matmul(pooled, sel_enc_w_), sel_enc_b_);
  }

  // Scalar selection logit over a sequence of per-token probability rows
  // (exact one-hots for ground truth). Rows are projected through the shared
  // token embedding, mean-pooled, then passed through a tanh MLP.
  Var<T> select_head_seq(const Var<T>& soft_rows) const {
    if (soft_rows.val().rank() != 2 || soft_rows.val().cols() != cfg_.vocab_size)
      throw ShapeError("select_head_seq: expected [k x vocab_size] rows");
    for (size_t r = 0; r < soft_rows.val().rows(); ++r) {
      T sum = T(0);
      for (size_t c = 0; c < cfg_.vocab_size; ++c) sum += soft_rows.val().at(r, c);
      if (std::abs(static_cast<double>(sum) - 1.0) > 1e-4)
        throw ValidationError("select_head_seq: row " + std::to_string(r) +
                              " does not sum to 1 (got " + std::to_string(static_cast<double>(sum)) +
                              ")");
    }
    Var<T> proj = ts::matmul(soft_rows, tok_emb_);
    std::vector<uint8_t> all(proj.val().rows(), 1);
    Var<T> pooled = ts::masked_mean_rows(proj, all);
    Var<T> h = ts::tanh_op(ts::add_rowvec(ts::matmul(pooled, sel_seq_w1_), sel_seq_b1_));
    return ts::add_rowvec(ts::matmul(h, sel_seq_w2_), sel_seq_b2_);
  }

  // Deterministic argmax decoding; never touches the selection heads.
  std::vector<int> greedy_decode(const EncoderState<T>& enc, DecoderKind kind, int bos_id,
                                 int eos_id, size_t max_len) const {
    ts::NoGradGuard no_grad;
    std::vector<int> prefix = {bos_id};
    std::vector<int> out;
    while (out.size() < max_len && prefix.size() < cfg_.max_seq_len) {
      Var<T> logits = decode(kind, enc, prefix, false, nullptr);
      const size_t v = logits.val().cols();
      const T* row = logits.val().data.data() + (logits.val().rows() - 1) * v;
      const int tok = static_cast<int>(std::max_element(row, row + v) - row);
      out.push_back(tok);
      if (tok == eos_id) break;
      prefix.push_back(tok);
    }
    return out;
  }

  // -------------------------------------------------------------------------
  // checkpointing

  std::map<std::string, Array<float>> state_dict() const {
    std::map<std::string, Array<float>> out;
    for (const auto& p : params_) out.emplace(p.name, p.var.val().template cast<float>());
    return out;
  }

  void load_state_dict(const std::map<std::string, Array<float>>& tensors,
                       std::vector<std::string>* missing_heads = nullptr) {
    for (auto& p : params_) {
      const auto it = tensors.find(p.name);
      if (it == tensors.end()) {
        const bool head = p.group == "select_enc_head" || p.group == "select_seq_head";
        if (!head)
          throw IoError("checkpoint is missing tensor '" + p.name + "'");
        // stripped selection heads load as zeros; inference never reads them
        auto& val = const_cast<Array<T>&>(p.var.val());
        std::fill(val.data.begin(), val.data.end(), T(0));
        if (missing_heads) missing_heads->push_back(p.name);
        continue;
      }
      if (it->second.shape != p.var.val().shape)
        throw IoError("checkpoint tensor '" + p.name + "' has shape " +
                      ts::shape_str(it->second.shape) + ", expected " +
                      ts::shape_str(p.var.val().shape));
      const_cast<Array<T>&>(p.var.val()) = it->second.template cast<T>();
    }
  }

  void save_checkpoint(const std::string& dir, const nlohmann::json& meta = {}) const {
    nlohmann::json extra = {{"format", "todsel-checkpoint-v1"},
                            {"model_config", cfg_.to_json()},
                            {"n_parameters", n_parameters()}};
    if (meta.is_object())
      for (const auto& [k, v] : meta.items()) extra[k] = v;
    ts::save_tensor_set(dir, state_dict(), extra);
  }

  static Model load_checkpoint(const std::string& dir,
                               std::vector<std::string>* missing_heads = nullptr) {
    nlohmann::json manifest;
    const auto tensors = ts::load_tensor_set(dir, &manifest);
    Model m(ModelConfig::from_json(manifest.at("model_config")), /*init_seed=*/0);
    m.load_state_dict(tensors, missing_heads);
    return m;
  }

 private:
  static constexpr T kMaskValue = T(-1e9);

  ModelConfig cfg_;
  std::vector<ParamInfo<T>> params_;

  Var<T> tok_emb_, pos_emb_;
  std::vector<detail::EncoderLayerP<T>> enc_layers_;
  detail::LayerNormP<T> enc_final_ln_;
  std::vector<detail::DecoderLayerP<T>> belief_layers_, resp_layers_;
  detail::LayerNormP<T> belief_final_ln_, resp_final_ln_;
  Var<T> span_w_, span_b_;
  Var<T> sel_enc_w_, sel_enc_b_;
  Var<T> sel_seq_w1_, sel_seq_b1_, sel_seq_w2_, sel_seq_b2_;

  enum class Init { normal, zeros, ones };

  Var<T> add_param(const std::string& name, const std::string& group,
                   std::vector<size_t> shape, Init init, Rng& rng) {
    Array<T> a(std::move(shape));
    switch (init) {
      case Init::normal:
        for (auto& v : a.data) v = static_cast<T>(rng.normal() * cfg_.init_std);
        break;
      case Init::zeros:
        break;
      case Init::ones:
        std::fill(a.data.begin(), a.data.end(), T(1));
        break;
    }
    Var<T> var = ts::parameter(std::move(a));
    params_.push_back({name, group, var});
    return var;
  }

  detail::LayerNormP<T> add_ln(const std::string& prefix, const std::string& group, Rng& rng) {
    return {add_param(prefix + ".gain", group, {cfg_.d_model}, Init::ones, rng),
            add_param(prefix + ".bias", group, {cfg_.d_model}, Init::zeros, rng)};
  }

  detail::AttnP<T> add_attn(const std::string& prefix, const std::string& group, Rng& rng) {
    const size_t d = cfg_.d_model;
    return {add_param(prefix + ".wq", group, {d, d}, Init::normal, rng),
            add_param(prefix + ".bq", group, {1, d}, Init::zeros, rng),
            add_param(prefix + ".wk", group, {d, d}, Init::normal, rng),
            add_param(prefix + ".bk", group, {1, d}, Init::zeros, rng),
            add_param(prefix + ".wv", group, {d, d}, Init::normal, rng),
            add_param(prefix + ".bv", group, {1, d}, Init::zeros, rng),
            add_param(prefix + ".wo", group, {d, d}, Init::normal, rng),
            add_param(prefix + ".bo", group, {1, d}, Init::zeros, rng)};
  }

  detail::FeedForwardP<T> add_ff(const std::string& prefix, const std::string& group, Rng& rng) {
    return {add_param(prefix + ".w1", group, {cfg_.d_model, cfg_.d_ff}, Init::normal, rng),
            add_param(prefix + ".b1", group, {1, cfg_.d_ff}, Init::zeros, rng),
            add_param(prefix + ".w2", group, {cfg_.d_ff, cfg_.d_model}, Init::normal, rng),
            add_param(prefix + ".b2", group, {1, cfg_.d_model}, Init::zeros, rng)};
  }

  void build_params(Rng& rng) {
    const size_t d = cfg_.d_model;
    tok_emb_ = add_param("tok_emb", "embeddings", {cfg_.vocab_size, d}, Init::normal, rng);
    pos_emb_ = add_param("pos_emb", "embeddings", {cfg_.max_seq_len, d}, Init::normal, rng);

    for (size_t i = 0; i < cfg_.n_encoder_layers; ++i) {
      const std::string p = "enc.l" + std::to_string(i);
      enc_layers_.push_back({add_ln(p + ".ln1", "encoder", rng), add_attn(p + ".attn", "encoder", rng),
                             add_ln(p + ".ln2", "encoder", rng), add_ff(p + ".ff", "encoder", rng)});
    }
    enc_final_ln_ = add_ln("enc.final_ln", "encoder", rng);

    const auto add_decoder = [&](const std::string& name, const std::string& group,
                                 std::vector<detail::DecoderLayerP<T>>& layers,
                                 detail::LayerNormP<T>& final_ln) {
      for (size_t i = 0; i < cfg_.n_decoder_layers; ++i) {
        const std::string p = name + ".l" + std::to_string(i);
        layers.push_back({add_ln(p + ".ln1", group, rng), add_attn(p + ".self", group, rng),
                          add_ln(p + ".ln2", group, rng), add_attn(p + ".cross", group, rng),
                          add_ln(p + ".ln3", group, rng), add_ff(p + ".ff", group, rng)});
      }
      final_ln = add_ln(name + ".final_ln", group, rng);
    };
    add_decoder("bdec", "belief_decoder", belief_layers_, belief_final_ln_);
    add_decoder("rdec", "response_decoder", resp_layers_, resp_final_ln_);

    span_w_ = add_param("span.w", "span_head", {d, cfg_.n_span_tags}, Init::normal, rng);
    span_b_ = add_param("span.b", "span_head", {1, cfg_.n_span_tags}, Init::zeros, rng);

    sel_enc_w_ = add_param("sel_enc.w", "select_enc_head", {d, 1}, Init::normal, rng);
    sel_enc_b_ = add_param("sel_enc.b", "select_enc_head", {1, 1}, Init::zeros, rng);

    sel_seq_w1_ = add_param("sel_seq.w1", "select_seq_head", {d, d}, Init::normal, rng);
    sel_seq_b1_ = add_param("sel_seq.b1", "select_seq_head", {1, d}, Init::zeros, rng);
    sel_seq_w2_ = add_param("sel_seq.w2", "select_seq_head", {d, 1}, Init::normal, rng);
    sel_seq_b2_ = add_param("sel_seq.b2", "select_seq_head", {1, 1}, Init::zeros, rng);
  }

  void validate_ids(const std::vector<int>& ids) const {
    for (size_t i = 0; i < ids.size(); ++i)
      if (ids[i] < 0 || static_cast<size_t>(ids[i]) >= cfg_.vocab_size)
        throw ValidationError("token id " + std::to_string(ids[i]) + " at position " +
                              std::to_string(i) + " outside vocabulary of " +
                              std::to_string(cfg_.vocab_size));
  }

  Var<T> maybe_dropout(const Var<T>& x, bool training, Rng* rng) const {
    if (!training || cfg_.dropout_rate <= 0.0 || rng == nullptr) return x;
    return ts::dropout(x, cfg_.dropout_rate, *rng, true);
  }

  Var<T> ln(const detail::LayerNormP<T>& p, const Var<T>& x) const {
    return ts::layer_norm_rows(x, p.gain, p.bias, static_cast<T>(1e-5));
  }

  Array<T> causal_mask(size_t k) const {
    Array<T> m(std::vector<size_t>{k, k}, T(0));
    for (size_t r = 0; r < k; ++r)
      for (size_t c = r + 1; c < k; ++c) m.at(r, c) = kMaskValue;
    return m;
  }

  Array<T> pad_key_mask(size_t len, const std::vector<uint8_t>& mask) const {
    Array<T> m(std::vector<size_t>{len, len}, T(0));
    for (size_t c = 0; c < len; ++c)
      if (!mask[c])
        for (size_t r = 0; r < len; ++r) m.at(r, c) = kMaskValue;
    return m;
  }

  Var<T> attention(const detail::AttnP<T>& p, const Var<T>& q_in, const Var<T>& kv_in,
                   const Array<T>* additive_mask, bool training, Rng* rng) const {
    const size_t dh = cfg_.d_model / cfg_.n_heads;
    Var<T> q = ts::add_rowvec(ts::matmul(q_in, p.wq), p.bq);
    Var<T> k = ts::add_rowvec(ts::matmul(kv_in, p.wk), p.bk);
    Var<T> v = ts::add_rowvec(ts::matmul(kv_in, p.wv), p.bv);
    std::vector<Var<T>> heads;
    heads.reserve(cfg_.n_heads);
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (size_t h = 0; h < cfg_.n_heads; ++h) {
      Var<T> qh = ts::slice_cols(q, h * dh, dh);
      Var<T> kh = ts::slice_cols(k, h * dh, dh);
      Var<T> vh = ts::slice_cols(v, h * dh, dh);
      Var<T> scores = ts::scale(ts::matmul_nt(qh, kh), inv_sqrt);
      Var<T> probs = ts::softmax_rows(scores, additive_mask);
      probs = maybe_dropout(probs, training, rng);
      heads.push_back(ts::matmul(probs, vh));
    }
    Var<T> merged = ts::concat_cols(heads);
    return ts::add_rowvec(ts::matmul(merged, p.wo), p.bo);
  }

  Var<T> feed_forward(const detail::FeedForwardP<T>& p, const Var<T>& x, bool training,
                      Rng* rng) const {
    Var<T> h = ts::gelu(ts::add_rowvec(ts::matmul(x, p.w1), p.b1));
    h = maybe_dropout(h, training, rng);
    return ts::add_rowvec(ts::matmul(h, p.w2), p.b2);
  }
};

}  // namespace todsel::model
