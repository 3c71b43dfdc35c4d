// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "todsel/corpus.hpp"
#include "todsel/gumbel.hpp"
#include "todsel/model.hpp"
#include "todsel/objectives.hpp"

using namespace todsel;
using namespace todsel::ts;
using namespace todsel::model;

namespace {

corpus::Corpus& fixture_corpus() {
  static corpus::Corpus c = [] {
    corpus::CorpusSpec spec;
    spec.domains = {"restaurant", "hotel"};
    spec.dialogues_per_combination = 4;
    return corpus::generate_corpus(spec, 7);
  }();
  return c;
}

ModelConfig tiny_config() {
  const auto& c = fixture_corpus();
  ModelConfig cfg;
  cfg.vocab_size = c.vocab.size();
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.n_encoder_layers = 1;
  cfg.n_decoder_layers = 1;
  cfg.d_ff = 64;
  cfg.max_seq_len = 96;
  cfg.n_span_tags = c.schema.n_span_tags();
  return cfg;
}

double group_grad_norm(const Model<double>& m, const std::string& group) {
  double norm = 0;
  for (const auto& p : m.params()) {
    if (p.group != group || !p.var.has_grad()) continue;
    for (double g : p.var.grad().data) norm += g * g;
  }
  return std::sqrt(norm);
}

std::vector<int> range_ids(size_t n, int base = 2) {
  std::vector<int> ids(n);
  for (size_t i = 0; i < n; ++i) ids[i] = base + static_cast<int>(i % 7);
  return ids;
}

}  // namespace

TEST_CASE("reserved special token count matches the vocabulary") {
  CHECK(corpus::Vocab::special_tokens().size() == ModelConfig::kReservedSpecialTokens);
}

TEST_CASE("encode: hidden shape, determinism, degenerate inputs") {
  Model<double> m(tiny_config(), 1);
  auto enc = m.encode(range_ids(10));
  CHECK(enc.hidden.val().shape == std::vector<size_t>{10, 32});

  auto enc2 = m.encode(range_ids(10));
  for (size_t i = 0; i < enc.hidden.val().numel(); ++i)
    CHECK(enc.hidden.val().data[i] == enc2.hidden.val().data[i]);

  CHECK_THROWS_AS(m.encode({}), ValidationError);
  try {
    m.encode(range_ids(4), {0, 0, 0, 0});
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("empty effective sequence") != std::string::npos);
  }
}

TEST_CASE("encode: out-of-vocabulary id names the position") {
  Model<double> m(tiny_config(), 1);
  std::vector<int> ids = range_ids(5);
  ids[3] = static_cast<int>(tiny_config().vocab_size) + 10;
  try {
    m.encode(ids);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("position 3") != std::string::npos);
  }
}

TEST_CASE("encode: overlong input truncates oldest tokens with a warning") {
  Model<double> m(tiny_config(), 1);
  std::vector<std::string> warnings;
  auto prev = warn_hook();
  warn_hook() = [&](const std::string& w) { warnings.push_back(w); };
  auto enc = m.encode(range_ids(120));
  warn_hook() = prev;
  CHECK(enc.hidden.val().rows() == 96);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("truncating") != std::string::npos);

  // suffix preserved: same as encoding the last 96 ids directly
  auto ids = range_ids(120);
  std::vector<int> tail(ids.end() - 96, ids.end());
  auto enc_tail = m.encode(tail);
  for (size_t i = 0; i < enc.hidden.val().numel(); ++i)
    CHECK(enc.hidden.val().data[i] == enc_tail.hidden.val().data[i]);
}

TEST_CASE("decoders: logits shape and causal masking") {
  Model<double> m(tiny_config(), 1);
  const size_t v = tiny_config().vocab_size;
  auto enc = m.encode(range_ids(12));

  auto logits_b = m.decode_belief(enc, range_ids(5));
  CHECK(logits_b.val().shape == std::vector<size_t>{5, v});
  auto logits_r = m.decode_response(enc, range_ids(8));
  CHECK(logits_r.val().shape == std::vector<size_t>{8, v});

  // perturbing prefix token j never changes logits at positions < j
  for (DecoderKind kind : {DecoderKind::belief, DecoderKind::response}) {
    auto prefix = range_ids(7);
    auto base = m.decode(kind, enc, prefix);
    for (size_t j : {size_t(2), size_t(5)}) {
      auto perturbed = prefix;
      perturbed[j] = prefix[j] + 1;
      auto out = m.decode(kind, enc, perturbed);
      for (size_t r = 0; r < j; ++r)
        for (size_t c = 0; c < v; ++c)
          CHECK(out.val().at(r, c) == base.val().at(r, c));
      bool changed = false;
      for (size_t c = 0; c < v; ++c) changed |= out.val().at(j, c) != base.val().at(j, c);
      CHECK(changed);
    }
  }
}

TEST_CASE("span_head: shape and mask contract") {
  auto cfg = tiny_config();
  Model<double> m(cfg, 1);
  auto enc = m.encode(range_ids(10));
  auto tags = m.span_head(enc);
  CHECK(tags.val().shape == std::vector<size_t>{10, cfg.n_span_tags});
}

TEST_CASE("select_head_enc: zero-initialized head gives probability one half") {
  Model<double> m(tiny_config(), 1);
  for (const auto& p : m.params())
    if (p.group == "select_enc_head")
      std::fill(const_cast<Array<double>&>(p.var.val()).data.begin(),
                const_cast<Array<double>&>(p.var.val()).data.end(), 0.0);
  auto enc = m.encode(range_ids(9));
  auto logit = m.select_head_enc(enc);
  CHECK(logit.item() == 0.0);
  CHECK(ts::sigmoid(logit).item() == doctest::Approx(0.5));

  auto logit2 = m.select_head_enc(m.encode(range_ids(9)));
  CHECK(logit.item() == logit2.item());
}

TEST_CASE("select_head_enc: gradients reach encoder parameters but no decoder") {
  Model<double> m(tiny_config(), 2);
  auto enc = m.encode(range_ids(11));
  auto logit = m.select_head_enc(enc);
  m.zero_grads();
  backward(logit);
  CHECK(group_grad_norm(m, "encoder") > 0);
  CHECK(group_grad_norm(m, "embeddings") > 0);
  CHECK(group_grad_norm(m, "select_enc_head") > 0);
  CHECK(group_grad_norm(m, "belief_decoder") == 0);
  CHECK(group_grad_norm(m, "response_decoder") == 0);
}

TEST_CASE("select_head_seq: one-hot truth and identical hardened sample agree") {
  auto cfg = tiny_config();
  Model<double> m(cfg, 3);
  const size_t k = 6, v = cfg.vocab_size;

  Array<double> onehot(std::vector<size_t>{k, v}, 0.0);
  for (size_t r = 0; r < k; ++r) onehot.at(r, (r * 3 + 1) % v) = 1.0;
  auto logit_truth = m.select_head_seq(constant(onehot));

  // a straight-through sample hardened to the same one-hot rows
  Array<double> logits_val(std::vector<size_t>{k, v}, 0.0);
  for (size_t r = 0; r < k; ++r) logits_val.at(r, (r * 3 + 1) % v) = 5.0;
  auto sample = gumbel::straight_through(
      gumbel::gumbel_softmax_with_noise(constant(logits_val), 1.0,
                                        Array<double>(std::vector<size_t>{k, v}, 0.0)));
  auto logit_sample = m.select_head_seq(sample.hard);
  CHECK(logit_truth.item() == doctest::Approx(logit_sample.item()).epsilon(1e-15));
}

TEST_CASE("select_head_seq: zero-initialized final layer gives logit zero") {
  auto cfg = tiny_config();
  Model<double> m(cfg, 3);
  for (const auto& p : m.params())
    if (p.name == "sel_seq.w2" || p.name == "sel_seq.b2")
      std::fill(const_cast<Array<double>&>(p.var.val()).data.begin(),
                const_cast<Array<double>&>(p.var.val()).data.end(), 0.0);
  Array<double> onehot(std::vector<size_t>{3, cfg.vocab_size}, 0.0);
  for (size_t r = 0; r < 3; ++r) onehot.at(r, r + 2) = 1.0;
  CHECK(m.select_head_seq(constant(onehot)).item() == 0.0);
}

TEST_CASE("select_head_seq: rejects rows that do not sum to one") {
  auto cfg = tiny_config();
  Model<double> m(cfg, 3);
  Array<double> bad(std::vector<size_t>{2, cfg.vocab_size}, 0.0);
  bad.at(0, 0) = 1.0;
  bad.at(1, 0) = 0.7;  // second row sums to 0.7
  CHECK_THROWS_AS(m.select_head_seq(constant(bad)), ValidationError);
}

TEST_CASE("select_head_seq: straight-through carries decoder gradients; argmax does not") {
  auto cfg = tiny_config();
  Model<double> m(cfg, 4);
  auto enc = m.encode(range_ids(10));
  const auto prefix = range_ids(6);

  // straight-through route
  m.zero_grads();
  {
    auto logits = m.decode_response(enc, prefix);
    Rng g = stream_rng(9, Stream::gumbel);
    auto sample = gumbel::straight_through(gumbel::gumbel_softmax(logits, 1.0, g));
    backward(m.select_head_seq(sample.hard));
  }
  CHECK(group_grad_norm(m, "response_decoder") > 0);
  CHECK(group_grad_norm(m, "embeddings") > 0);

  // plain argmax one-hot route: exactly zero decoder gradients
  m.zero_grads();
  {
    auto logits = m.decode_response(enc, prefix);
    Rng g = stream_rng(9, Stream::gumbel);
    auto sample = gumbel::gumbel_softmax(logits, 1.0, g);
    Array<double> hard(std::vector<size_t>{prefix.size(), cfg.vocab_size}, 0.0);
    for (size_t r = 0; r < prefix.size(); ++r)
      hard.at(r, static_cast<size_t>(sample.argmax_ids[r])) = 1.0;
    backward(m.select_head_seq(constant(hard)));
  }
  CHECK(group_grad_norm(m, "response_decoder") == 0);
}

TEST_CASE("greedy_decode: single step, determinism, bounded length") {
  auto cfg = tiny_config();
  Model<double> m(cfg, 5);
  auto enc = m.encode(range_ids(10));
  const int bos = 4, eos = 5;

  auto one = m.greedy_decode(enc, DecoderKind::belief, bos, eos, 1);
  CHECK(one.size() == 1);

  auto a = m.greedy_decode(enc, DecoderKind::response, bos, eos, 24);
  auto b = m.greedy_decode(enc, DecoderKind::response, bos, eos, 24);
  CHECK(a == b);
  CHECK(a.size() <= 24);
}

TEST_CASE("checkpoint: save/load round trip preserves every tensor") {
  auto cfg = tiny_config();
  Model<float> m(cfg, 6);
  const std::string dir = "ckpt_tmp";
  m.save_checkpoint(dir);
  auto loaded = Model<float>::load_checkpoint(dir);
  REQUIRE(loaded.params().size() == m.params().size());
  for (size_t i = 0; i < m.params().size(); ++i) {
    const auto& a = m.params()[i].var.val();
    const auto& b = loaded.params()[i].var.val();
    REQUIRE(a.shape == b.shape);
    for (size_t k = 0; k < a.data.size(); ++k) CHECK(a.data[k] == b.data[k]);
  }
  CHECK(loaded.n_parameters() == m.n_parameters());
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint: stripping selection heads never changes generations") {
  auto cfg = tiny_config();
  Model<float> m(cfg, 7);
  const std::string dir = "ckpt_strip_tmp";
  m.save_checkpoint(dir);

  // rewrite the checkpoint without the selection-head tensors
  nlohmann::json manifest;
  auto tensors = ts::load_tensor_set(dir, &manifest);
  for (auto it = tensors.begin(); it != tensors.end();)
    it = it->first.rfind("sel_", 0) == 0 ? tensors.erase(it) : std::next(it);
  nlohmann::json extra = {{"format", manifest.at("format")},
                          {"model_config", manifest.at("model_config")},
                          {"n_parameters", manifest.at("n_parameters")}};
  const std::string dir2 = "ckpt_strip_tmp2";
  ts::save_tensor_set(dir2, tensors, extra);

  std::vector<std::string> missing;
  auto stripped = Model<float>::load_checkpoint(dir2, &missing);
  CHECK(missing.size() == 6);  // sel_enc.{w,b} + sel_seq.{w1,b1,w2,b2}

  const auto ids = range_ids(14);
  auto enc_full = m.encode(ids);
  auto enc_stripped = stripped.encode(ids);
  for (DecoderKind kind : {DecoderKind::belief, DecoderKind::response}) {
    auto gen_full = m.greedy_decode(enc_full, kind, 4, 5, 32);
    auto gen_stripped = stripped.greedy_decode(enc_stripped, kind, 4, 5, 32);
    CHECK(gen_full == gen_stripped);
  }
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST_CASE("checkpoint: missing non-head tensor is an error") {
  auto cfg = tiny_config();
  Model<float> m(cfg, 8);
  const std::string dir = "ckpt_bad_tmp";
  m.save_checkpoint(dir);
  nlohmann::json manifest;
  auto tensors = ts::load_tensor_set(dir, &manifest);
  tensors.erase("enc.l0.attn.wq");
  const std::string dir2 = "ckpt_bad_tmp2";
  ts::save_tensor_set(dir2, tensors,
                      {{"format", manifest.at("format")},
                       {"model_config", manifest.at("model_config")}});
  CHECK_THROWS_AS(Model<float>::load_checkpoint(dir2), IoError);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST_CASE("float and double models from one seed share initial values") {
  auto cfg = tiny_config();
  Model<float> mf(cfg, 42);
  Model<double> md(cfg, 42);
  REQUIRE(mf.params().size() == md.params().size());
  for (size_t i = 0; i < mf.params().size(); ++i) {
    const auto& a = mf.params()[i].var.val();
    const auto& b = md.params()[i].var.val();
    for (size_t k = 0; k < a.data.size(); ++k)
      CHECK(a.data[k] == static_cast<float>(b.data[k]));
  }
}
