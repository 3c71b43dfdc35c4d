// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "todsel/trainer.hpp"

using namespace todsel;
using namespace todsel::training;
using todsel::objectives::Variant;
using todsel::ts::Array;

namespace {

corpus::Corpus& mini_corpus() {
  static corpus::Corpus c = [] {
    corpus::CorpusSpec spec;
    spec.domains = {"restaurant", "hotel"};
    spec.dialogues_per_combination = 4;
    return corpus::generate_corpus(spec, 7);
  }();
  return c;
}

model::ModelConfig mini_model_config() {
  model::ModelConfig cfg;
  cfg.vocab_size = mini_corpus().vocab.size();
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_encoder_layers = 1;
  cfg.n_decoder_layers = 1;
  cfg.d_ff = 32;
  cfg.max_seq_len = 128;
  cfg.n_span_tags = mini_corpus().schema.n_span_tags();
  return cfg;
}

TrainConfig mini_train_config(Variant variant, long long max_steps) {
  TrainConfig cfg;
  cfg.epochs = 64;
  cfg.batch_size = 4;
  cfg.variant = variant;
  cfg.max_steps = max_steps;
  cfg.seed = 13;
  return cfg;
}

}  // namespace

TEST_CASE("lr_schedule: warmup endpoints and linearity") {
  TrainConfig cfg;
  CHECK(lr_schedule(0, 1000, cfg) == 0.0);
  CHECK(lr_schedule(100, 1000, cfg) == doctest::Approx(5e-4).epsilon(1e-15));
  CHECK(lr_schedule(50, 1000, cfg) == doctest::Approx(2.5e-4).epsilon(1e-15));
  CHECK(lr_schedule(500, 1000, cfg) == doctest::Approx(5e-4).epsilon(1e-15));
  CHECK(lr_schedule(1000, 1000, cfg) == doctest::Approx(5e-4).epsilon(1e-15));
}

TEST_CASE("adam_step: first-step magnitude, zero-gradient fixed point, quadratic bowl") {
  AdamHyper hyper;
  hyper.weight_decay = 0.0;

  // bias-corrected first step moves by about lr
  {
    auto x = ts::parameter(Array<double>::scalar(1.0));
    std::vector<model::ParamInfo<double>> params = {{"x", "test", x}};
    x.node()->ensure_grad().data[0] = 1.0;
    AdamState<double> state;
    adam_step(params, state, 0.1, hyper);
    CHECK(x.val().data[0] == doctest::Approx(0.9).epsilon(1e-6));
  }

  // zero gradient and zero weight decay leave the parameter unchanged
  {
    auto x = ts::parameter(Array<double>::scalar(2.5));
    std::vector<model::ParamInfo<double>> params = {{"x", "test", x}};
    AdamState<double> state;
    for (int i = 0; i < 5; ++i) adam_step(params, state, 0.1, hyper);
    CHECK(x.val().data[0] == 2.5);
  }

  // quadratic bowl converges
  {
    auto x = ts::parameter(Array<double>::scalar(0.0));
    std::vector<model::ParamInfo<double>> params = {{"x", "test", x}};
    AdamState<double> state;
    for (int i = 0; i < 300; ++i) {
      x.zero_grad();
      auto target = ts::constant(Array<double>::scalar(3.0));
      auto diff = ts::sub(x, target);
      auto loss = ts::mul(diff, diff);
      ts::backward(loss);
      adam_step(params, state, 0.1, hyper);
    }
    CHECK(std::abs(x.val().data[0] - 3.0) < 1e-3);
  }
}

TEST_CASE("weight decay applies to weights, not biases or layer norms") {
  CHECK(detail::weight_decayed("enc.l0.attn.wq"));
  CHECK(detail::weight_decayed("tok_emb"));
  CHECK(detail::weight_decayed("sel_seq.w1"));
  CHECK_FALSE(detail::weight_decayed("enc.l0.attn.bq"));
  CHECK_FALSE(detail::weight_decayed("enc.final_ln.gain"));
  CHECK_FALSE(detail::weight_decayed("sel_enc.b"));
}

TEST_CASE("clip_gradients: rescales above the threshold and reports the norm") {
  auto x = ts::parameter(Array<double>::from_vector({2}, {0.0, 0.0}));
  std::vector<model::ParamInfo<double>> params = {{"x", "test", x}};
  auto& g = x.node()->ensure_grad();
  g.data = {3.0, 4.0};
  const double norm = clip_gradients(params, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(x.grad().data[0] == doctest::Approx(0.6));
  CHECK(x.grad().data[1] == doctest::Approx(0.8));
}

TEST_CASE("turn_losses: per-variant pieces are finite and selection counters fill") {
  const auto& c = mini_corpus();
  model::Model<double> m(mini_model_config(), 3);
  const auto& turn = c.split_dialogues("train")[0]->turns[0];

  ts::Rng d = ts::stream_rng(1, ts::Stream::distractor);
  ts::Rng g = ts::stream_rng(1, ts::Stream::gumbel);
  TurnRngs rngs{&d, &g, nullptr};
  gumbel::GumbelConfig gcfg;
  const auto sample_for = [&](Variant v) {
    return sample_select_inputs<double>(c, turn, v, rngs, gcfg, m.config().vocab_size);
  };

  auto none = turn_losses(m, c, turn, Variant::none, 4.0, sample_for(Variant::none), gcfg, false);
  CHECK(std::isfinite(none.belief_nll.item()));
  CHECK(std::isfinite(none.resp_nll.item()));
  CHECK(std::isfinite(none.span_ce.item()));
  CHECK_FALSE(none.select_bce.defined());
  CHECK(none.select_total == 0);

  auto v1 = turn_losses(m, c, turn, Variant::after_encoder, 4.0,
                        sample_for(Variant::after_encoder), gcfg, false);
  CHECK(v1.select_bce.defined());
  CHECK(v1.select_bce.item() >= 0.0);
  CHECK(v1.select_total == 2);

  auto v2 = turn_losses(m, c, turn, Variant::differentiable, 4.0,
                        sample_for(Variant::differentiable), gcfg, false);
  CHECK(v2.select_bce.defined());
  CHECK(v2.select_bce.item() >= 0.0);
  CHECK(v2.select_total == 2);
}

TEST_CASE("gradient flow audit: variant routes match the architecture") {
  const auto& c = mini_corpus();
  const auto& turn = c.split_dialogues("train")[0]->turns[0];

  TrainConfig cfg1 = mini_train_config(Variant::after_encoder, 1);
  model::Model<double> m1(mini_model_config(), 5);
  const auto audit1 = gradient_flow_audit(m1, c, turn, cfg1);
  const auto& n1 = audit1.at("select_grad_norms");
  CHECK(n1.at("encoder").get<double>() > 0);
  CHECK(n1.at("embeddings").get<double>() > 0);
  CHECK(n1.at("belief_decoder").get<double>() == 0.0);
  CHECK(n1.at("response_decoder").get<double>() == 0.0);

  TrainConfig cfg2 = mini_train_config(Variant::differentiable, 1);
  model::Model<double> m2(mini_model_config(), 5);
  const auto audit2 = gradient_flow_audit(m2, c, turn, cfg2);
  const auto& n2 = audit2.at("select_grad_norms");
  CHECK(n2.at("response_decoder").get<double>() > 0);
  CHECK(n2.at("embeddings").get<double>() > 0);
  CHECK(n2.at("belief_decoder").get<double>() == 0.0);

  // negative control: plain argmax cuts the decoder path exactly
  TrainConfig cfg3 = cfg2;
  cfg3.argmax_control = true;
  model::Model<double> m3(mini_model_config(), 5);
  const auto audit3 = gradient_flow_audit(m3, c, turn, cfg3);
  CHECK(audit3.at("select_grad_norms").at("response_decoder").get<double>() == 0.0);
}

TEST_CASE("train: variant none and zero-delta variant one share trajectories bitwise") {
  const auto& c = mini_corpus();
  const auto mcfg = mini_model_config();

  TrainConfig base = mini_train_config(Variant::none, 10);
  auto r_none = train<double>(c, mcfg, base);

  TrainConfig v1 = mini_train_config(Variant::after_encoder, 10);
  v1.weights.delta = 0.0;
  auto r_v1 = train<double>(c, mcfg, v1);

  REQUIRE(r_none.trained.has_value());
  REQUIRE(r_v1.trained.has_value());
  const auto& pa = r_none.trained->params();
  const auto& pb = r_v1.trained->params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].name == pb[i].name);
    for (size_t k = 0; k < pa[i].var.val().data.size(); ++k)
      CHECK(pa[i].var.val().data[k] == pb[i].var.val().data[k]);
  }
}

TEST_CASE("train: two runs with one seed produce identical logs and dev metrics") {
  const auto& c = mini_corpus();
  const auto mcfg = mini_model_config();
  TrainConfig cfg = mini_train_config(Variant::after_encoder, 8);
  cfg.epochs = 2;

  auto r1 = train<float>(c, mcfg, cfg);
  auto r2 = train<float>(c, mcfg, cfg);
  REQUIRE(r1.log.size() == r2.log.size());
  for (size_t i = 0; i < r1.log.size(); ++i) CHECK(r1.log[i].dump() == r2.log[i].dump());
  CHECK(r1.state.best_dev_combined == r2.state.best_dev_combined);
}

TEST_CASE("train: logged totals recombine exactly from logged components") {
  const auto& c = mini_corpus();
  TrainConfig cfg = mini_train_config(Variant::differentiable, 6);
  auto r = train<float>(c, mini_model_config(), cfg);
  size_t checked = 0;
  for (const auto& rec : r.log) {
    if (rec.contains("event")) continue;
    // recombine in float with the same association order as the graph
    const float b = rec.at("belief_nll").get<float>();
    const float resp = rec.at("resp_nll").get<float>();
    const float s = rec.at("span_ce").get<float>();
    const float sel = rec.at("select_bce").get<float>();
    const auto& w = rec.at("weights");
    const float total = (static_cast<float>(w.at("alpha").get<double>()) * b +
                         static_cast<float>(w.at("beta").get<double>()) * resp) +
                        static_cast<float>(w.at("gamma").get<double>()) * s +
                        static_cast<float>(w.at("delta").get<double>()) * sel;
    CHECK(rec.at("total").get<float>() == total);
    CHECK(rec.contains("tau"));  // differentiable runs log the temperature
    checked++;
  }
  CHECK(checked == 6);

  // schedules: logged lr and tau obey the closed forms
  long long total_steps = 6;
  for (const auto& rec : r.log) {
    if (rec.contains("event")) continue;
    const long long step = rec.at("step").get<long long>();
    CHECK(rec.at("lr").get<double>() == lr_schedule(step, total_steps, cfg));
    CHECK(rec.at("tau").get<double>() ==
          gumbel::tau_schedule(step, total_steps, cfg.gumbel_cfg));
  }
}

TEST_CASE("train: variant none logs carry no tau or selection columns") {
  const auto& c = mini_corpus();
  TrainConfig cfg = mini_train_config(Variant::none, 3);
  auto r = train<float>(c, mini_model_config(), cfg);
  for (const auto& rec : r.log) {
    if (rec.contains("event")) continue;
    CHECK_FALSE(rec.contains("tau"));
    CHECK_FALSE(rec.contains("select_bce"));
  }
}

TEST_CASE("train: injected NaN aborts with a diagnostic and keeps the best checkpoint") {
  const auto& c = mini_corpus();
  const std::string out = "train_abort_tmp";
  std::filesystem::remove_all(out);

  TrainConfig cfg = mini_train_config(Variant::none, 0);
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.inject_nan_at_step = 4;  // epoch 2, after the first dev eval saved a checkpoint
  auto r = train<float>(c, mini_model_config(), cfg, out);

  CHECK(r.aborted);
  CHECK(r.abort_record.at("step").get<long long>() == 4);
  CHECK(r.abort_record.contains("lr"));
  CHECK(r.abort_record.contains("tau"));
  bool has_abort_event = false;
  for (const auto& rec : r.log)
    if (rec.contains("event") && rec.at("event") == "abort") has_abort_event = true;
  CHECK(has_abort_event);

  // last-good checkpoint from epoch 1 still loads
  REQUIRE(std::filesystem::exists(out + "/checkpoint_best/manifest.json"));
  auto loaded = model::Model<float>::load_checkpoint(out + "/checkpoint_best");
  CHECK(loaded.n_parameters() > 0);
  std::filesystem::remove_all(out);
}

TEST_CASE("train: best dev score is monotone along improvement records") {
  const auto& c = mini_corpus();
  TrainConfig cfg = mini_train_config(Variant::none, 0);
  cfg.epochs = 3;
  auto r = train<float>(c, mini_model_config(), cfg);
  double best = -1;
  for (const auto& rec : r.log) {
    if (!rec.contains("event") || rec.at("event") != "dev_eval") continue;
    const double combined = rec.at("combined").get<double>();
    if (rec.at("improved").get<bool>()) {
      CHECK(combined > best);
      best = combined;
    } else {
      CHECK(combined <= best);
    }
  }
  CHECK(best >= 0);
}
