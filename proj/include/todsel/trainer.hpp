// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
//
// Multi-task training loop: AdamW with linear-warmup-then-constant learning
// rate, per-step Gumbel temperature schedule, per-epoch dev evaluation with
// best-checkpoint retention, a gradient-flow audit at run start, and
// append-only JSON log records (no timestamps, so equal seeds give equal
// logs).
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "todsel/corpus.hpp"
#include "todsel/evaluator.hpp"
#include "todsel/gumbel.hpp"
#include "todsel/model.hpp"
#include "todsel/objectives.hpp"

namespace todsel::training {

using objectives::LossWeights;
using objectives::Variant;
using ts::Rng;
using ts::Var;

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  nlohmann::json to_json() const {
    return {{"beta1", beta1}, {"beta2", beta2}, {"eps", eps}, {"weight_decay", weight_decay}};
  }
  static AdamHyper from_json(const nlohmann::json& j) {
    AdamHyper h;
    if (j.contains("beta1")) h.beta1 = j.at("beta1").get<double>();
    if (j.contains("beta2")) h.beta2 = j.at("beta2").get<double>();
    if (j.contains("eps")) h.eps = j.at("eps").get<double>();
    if (j.contains("weight_decay")) h.weight_decay = j.at("weight_decay").get<double>();
    return h;
  }
};

struct TrainConfig {
  int epochs = 15;
  int batch_size = 8;
  double lr_peak = 5e-4;
  double warmup_fraction = 0.10;
  LossWeights weights;
  Variant variant = Variant::none;
  gumbel::GumbelConfig gumbel_cfg;
  uint64_t seed = 0;
  AdamHyper adam;
  double clip_norm = 1.0;         // 0 disables clipping
  long long max_steps = 0;        // 0: epochs decide
  int eval_every_epochs = 1;
  long long inject_nan_at_step = -1;  // fault-injection fixture
  bool argmax_control = false;        // diagnostic: severs the selection gradient path

  void validate() const {
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (!(lr_peak > 0)) throw ConfigError("train config: lr_peak must be > 0");
    if (!(warmup_fraction > 0 && warmup_fraction < 1))
      throw ConfigError("train config: warmup_fraction must be in (0,1)");
    if (clip_norm < 0) throw ConfigError("train config: clip_norm must be >= 0");
    if (eval_every_epochs < 1) throw ConfigError("train config: eval_every_epochs must be >= 1");
    weights.validate();
    gumbel_cfg.validate();
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"lr_peak", lr_peak},
            {"warmup_fraction", warmup_fraction},
            {"weights", weights.to_json()},
            {"variant", objectives::variant_name(variant)},
            {"gumbel", {{"tau_initial", gumbel_cfg.tau_initial},
                        {"tau_final", gumbel_cfg.tau_final},
                        {"hard", gumbel_cfg.hard},
                        {"epsilon_floor", gumbel_cfg.epsilon_floor}}},
            {"seed", seed},
            {"adam", adam.to_json()},
            {"clip_norm", clip_norm},
            {"max_steps", max_steps},
            {"eval_every_epochs", eval_every_epochs},
            {"argmax_control", argmax_control}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("lr_peak")) c.lr_peak = j.at("lr_peak").get<double>();
    if (j.contains("warmup_fraction")) c.warmup_fraction = j.at("warmup_fraction").get<double>();
    if (j.contains("weights")) c.weights = LossWeights::from_json(j.at("weights"));
    if (j.contains("variant"))
      c.variant = objectives::variant_from_string(j.at("variant").get<std::string>());
    if (j.contains("gumbel")) {
      const auto& g = j.at("gumbel");
      if (g.contains("tau_initial")) c.gumbel_cfg.tau_initial = g.at("tau_initial").get<double>();
      if (g.contains("tau_final")) c.gumbel_cfg.tau_final = g.at("tau_final").get<double>();
      if (g.contains("hard")) c.gumbel_cfg.hard = g.at("hard").get<bool>();
      if (g.contains("epsilon_floor")) c.gumbel_cfg.epsilon_floor = g.at("epsilon_floor").get<double>();
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("adam")) c.adam = AdamHyper::from_json(j.at("adam"));
    if (j.contains("clip_norm")) c.clip_norm = j.at("clip_norm").get<double>();
    if (j.contains("max_steps")) c.max_steps = j.at("max_steps").get<long long>();
    if (j.contains("eval_every_epochs")) c.eval_every_epochs = j.at("eval_every_epochs").get<int>();
    if (j.contains("inject_nan_at_step"))
      c.inject_nan_at_step = j.at("inject_nan_at_step").get<long long>();
    if (j.contains("argmax_control")) c.argmax_control = j.at("argmax_control").get<bool>();
    c.validate();
    return c;
  }
};

// Linear 0 -> lr_peak over the first warmup_fraction of steps, then constant.
inline double lr_schedule(long long step, long long total_steps, const TrainConfig& cfg) {
  if (total_steps < 1) throw ConfigError("lr_schedule: total_steps must be >= 1");
  const long long warmup =
      std::max<long long>(1, std::llround(cfg.warmup_fraction * static_cast<double>(total_steps)));
  if (step <= 0) return 0.0;
  if (step >= warmup) return cfg.lr_peak;
  return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(warmup);
}

// ---------------------------------------------------------------------------
// optimizer

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  long long t = 0;
};

namespace detail {
inline bool weight_decayed(const std::string& name) {
  if (name == "tok_emb" || name == "pos_emb") return true;
  const auto dot = name.rfind('.');
  const std::string last = dot == std::string::npos ? name : name.substr(dot + 1);
  return !last.empty() && last[0] == 'w';
}
}  // namespace detail

// Decoupled-weight-decay adaptive-moment update with bias correction.
// Parameters without an accumulated gradient are treated as zero-gradient.
template <typename T>
void adam_step(const std::vector<model::ParamInfo<T>>& params, AdamState<T>& state, double lr,
               const AdamHyper& hyper) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].var.val().numel(), T(0));
      state.v[i].assign(params[i].var.val().numel(), T(0));
    }
  }
  state.t++;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& value = const_cast<ts::Array<T>&>(params[i].var.val());
    const bool has_grad = params[i].var.has_grad();
    const bool decay = hyper.weight_decay > 0 && detail::weight_decayed(params[i].name);
    for (size_t k = 0; k < value.data.size(); ++k) {
      const T g = has_grad ? params[i].var.grad().data[k] : T(0);
      T& m = state.m[i][k];
      T& v = state.v[i][k];
      m = static_cast<T>(hyper.beta1) * m + static_cast<T>(1.0 - hyper.beta1) * g;
      v = static_cast<T>(hyper.beta2) * v + static_cast<T>(1.0 - hyper.beta2) * g * g;
      const double mhat = static_cast<double>(m) / bc1;
      const double vhat = static_cast<double>(v) / bc2;
      double update = lr * mhat / (std::sqrt(vhat) + hyper.eps);
      if (decay) update += lr * hyper.weight_decay * static_cast<double>(value.data[k]);
      value.data[k] -= static_cast<T>(update);
    }
  }
}

// Global-norm clipping; returns the pre-clip norm.
template <typename T>
double clip_gradients(const std::vector<model::ParamInfo<T>>& params, double clip) {
  double sq = 0;
  for (const auto& p : params) {
    if (!p.var.has_grad()) continue;
    for (T g : p.var.grad().data) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (clip > 0 && norm > clip) {
    const double s = clip / norm;
    for (const auto& p : params) {
      if (!p.var.has_grad()) continue;
      auto& g = const_cast<ts::Array<T>&>(p.var.grad());
      for (auto& x : g.data) x = static_cast<T>(static_cast<double>(x) * s);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// per-turn loss assembly

template <typename T>
struct TurnLosses {
  Var<T> belief_nll, resp_nll, span_ce;
  Var<T> select_bce;  // undefined for variant none
  int select_correct = 0, select_total = 0;
};

struct TurnRngs {
  Rng* distractor = nullptr;
  Rng* gumbel = nullptr;
  Rng* dropout = nullptr;
};

// The stochastic ingredients of one turn's selection loss, drawn up front so
// a loss rebuilt from them is a deterministic function of the parameters
// (required by finite-difference checking; the trainer redraws every visit).
template <typename T>
struct SelectInputs {
  std::string distractor;   // variant 1
  ts::Array<T> noise;       // variant 2: gumbel noise over [k x vocab]
};

template <typename T>
SelectInputs<T> sample_select_inputs(const corpus::Corpus& corpus,
                                     const corpus::DialogueTurn& turn, Variant variant,
                                     const TurnRngs& rngs, const gumbel::GumbelConfig& gcfg,
                                     size_t vocab_size) {
  SelectInputs<T> out;
  if (variant == Variant::after_encoder) {
    out.distractor = corpus::sample_distractor(corpus, turn, *rngs.distractor);
  } else if (variant == Variant::differentiable) {
    const auto seq = corpus::build_sequences(corpus, turn);
    out.noise = gumbel::gumbel_noise<T>({seq.resp_target.size() - 1, vocab_size}, *rngs.gumbel,
                                        gcfg.epsilon_floor);
  }
  return out;
}

template <typename T>
TurnLosses<T> turn_losses(const model::Model<T>& m, const corpus::Corpus& corpus,
                          const corpus::DialogueTurn& turn, Variant variant, double tau,
                          const SelectInputs<T>& inputs, const gumbel::GumbelConfig& gcfg,
                          bool argmax_control, bool training = true, Rng* dropout_rng = nullptr) {
  const corpus::Vocab& vocab = corpus.vocab;
  TurnLosses<T> out;

  const std::string* distractor_ptr =
      variant == Variant::after_encoder ? &inputs.distractor : nullptr;
  const auto seq = corpus::build_sequences(corpus, turn, distractor_ptr);
  TurnRngs rngs;
  rngs.dropout = dropout_rng;

  // belief pass + span head on the same encoding
  auto enc = m.encode(seq.encoder_input_belief, {}, training, rngs.dropout);
  {
    std::vector<int> prefix(seq.belief_target.begin(), seq.belief_target.end() - 1);
    std::vector<int> targets(seq.belief_target.begin() + 1, seq.belief_target.end());
    out.belief_nll = objectives::lm_nll(m.decode_belief(enc, prefix, training, rngs.dropout),
                                        targets, vocab.pad_id());
  }
  out.span_ce = objectives::span_loss(m.span_head(enc), seq.span_targets, seq.span_mask);

  // response pass on context + gold belief + DB token
  auto enc2 = m.encode(seq.encoder_input_resp, {}, training, rngs.dropout);
  std::vector<int> resp_prefix(seq.resp_target.begin(), seq.resp_target.end() - 1);
  std::vector<int> resp_targets(seq.resp_target.begin() + 1, seq.resp_target.end());
  auto resp_logits = m.decode_response(enc2, resp_prefix, training, rngs.dropout);
  out.resp_nll = objectives::lm_nll(resp_logits, resp_targets, vocab.pad_id());

  if (variant == Variant::after_encoder) {
    auto enc_truth = m.encode(seq.select_truth, {}, training, rngs.dropout);
    auto enc_distr = m.encode(seq.select_distractor, {}, training, rngs.dropout);
    auto logit_truth = m.select_head_enc(enc_truth);
    auto logit_distr = m.select_head_enc(enc_distr);
    out.select_bce = objectives::select_loss_enc(logit_truth, logit_distr);
    out.select_correct += (logit_truth.item() > T(0)) + (logit_distr.item() < T(0));
    out.select_total += 2;
  } else if (variant == Variant::differentiable) {
    auto sample = gumbel::gumbel_softmax_with_noise(resp_logits, tau, inputs.noise);
    Var<T> generated;
    if (argmax_control) {
      // plain argmax one-hot with no straight-through: constant forward value
      ts::Array<T> hard({resp_targets.size(), m.config().vocab_size});
      for (size_t r = 0; r < resp_targets.size(); ++r)
        hard.at(r, static_cast<size_t>(sample.argmax_ids[r])) = T(1);
      generated = ts::constant(std::move(hard), "argmax_onehot");
    } else if (gcfg.hard) {
      generated = gumbel::straight_through(sample).hard;
    } else {
      generated = sample.soft;
    }
    ts::Array<T> truth({resp_targets.size(), m.config().vocab_size});
    for (size_t r = 0; r < resp_targets.size(); ++r)
      truth.at(r, static_cast<size_t>(resp_targets[r])) = T(1);
    auto logit_truth = m.select_head_seq(ts::constant(std::move(truth), "truth_onehot"));
    auto logit_gen = m.select_head_seq(generated);
    out.select_bce = objectives::select_loss_seq(logit_truth, logit_gen);
    out.select_correct += (logit_truth.item() > T(0)) + (logit_gen.item() < T(0));
    out.select_total += 2;
  }
  return out;
}

// Selection-loss-only gradient norms per parameter group (run-start audit).
template <typename T>
nlohmann::json gradient_flow_audit(const model::Model<T>& m, const corpus::Corpus& corpus,
                                   const corpus::DialogueTurn& turn, const TrainConfig& cfg) {
  m.zero_grads();
  TurnRngs rngs;
  Rng distractor = ts::stream_rng(cfg.seed, ts::Stream::distractor);
  Rng gum = ts::stream_rng(cfg.seed, ts::Stream::gumbel);
  rngs.distractor = &distractor;
  rngs.gumbel = &gum;
  const auto inputs = sample_select_inputs<T>(corpus, turn, cfg.variant, rngs, cfg.gumbel_cfg,
                                              m.config().vocab_size);
  auto losses = turn_losses(m, corpus, turn, cfg.variant, cfg.gumbel_cfg.tau_initial, inputs,
                            cfg.gumbel_cfg, cfg.argmax_control, /*training=*/false);
  nlohmann::json norms = nlohmann::json::object();
  if (losses.select_bce.defined()) {
    ts::backward(losses.select_bce);
    std::map<std::string, double> sq;
    for (const auto& p : m.params()) {
      double s = 0;
      if (p.var.has_grad())
        for (T g : p.var.grad().data) s += static_cast<double>(g) * static_cast<double>(g);
      sq[p.group] += s;
    }
    for (const auto& [group, s] : sq) norms[group] = std::sqrt(s);
  }
  m.zero_grads();
  return {{"event", "gradient_flow_audit"},
          {"variant", objectives::variant_name(cfg.variant)},
          {"select_grad_norms", norms}};
}

// ---------------------------------------------------------------------------
// training loop

struct TrainState {
  long long step = 0;
  double best_dev_combined = -1.0;
  std::string best_checkpoint_dir;
};

template <typename T>
struct TrainResult {
  std::optional<model::Model<T>> trained;
  TrainState state;
  std::vector<nlohmann::json> log;
  bool aborted = false;
  nlohmann::json abort_record;
};

using LogSink = std::function<void(const nlohmann::json&)>;

template <typename T>
TrainResult<T> train(const corpus::Corpus& corpus, const model::ModelConfig& mcfg,
                     const TrainConfig& cfg, const std::string& out_dir = "",
                     const LogSink& sink = {},
                     const std::map<std::string, ts::Array<float>>* init_weights = nullptr) {
  cfg.validate();
  mcfg.validate();
  TrainResult<T> result;
  auto emit = [&](nlohmann::json rec) {
    if (sink) sink(rec);
    result.log.push_back(std::move(rec));
  };

  Rng data_rng = ts::stream_rng(cfg.seed, ts::Stream::data_order);
  Rng distractor_rng = ts::stream_rng(cfg.seed, ts::Stream::distractor);
  Rng gumbel_rng = ts::stream_rng(cfg.seed, ts::Stream::gumbel);
  Rng dropout_rng = ts::stream_rng(cfg.seed, ts::Stream::dropout);
  TurnRngs rngs{&distractor_rng, &gumbel_rng, &dropout_rng};

  model::Model<T> m(mcfg, cfg.seed);
  if (init_weights) m.load_state_dict(*init_weights);

  std::vector<const corpus::DialogueTurn*> turns;
  for (const corpus::Dialogue* d : corpus.split_dialogues("train"))
    for (const auto& t : d->turns) turns.push_back(&t);
  if (turns.empty()) throw ConfigError("train: training split is empty");

  const long long steps_per_epoch =
      (static_cast<long long>(turns.size()) + cfg.batch_size - 1) / cfg.batch_size;
  long long total_steps = steps_per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  if (cfg.variant != Variant::none)
    emit(gradient_flow_audit(m, corpus, *turns.front(), cfg));

  AdamState<T> adam_state;
  bool stop = false;
  for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    std::vector<size_t> order(turns.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    data_rng.shuffle(order.begin(), order.end());

    for (size_t start = 0; start < order.size() && !stop; start += cfg.batch_size) {
      if (result.state.step >= total_steps) {
        stop = true;
        break;
      }
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      const double lr = lr_schedule(result.state.step, total_steps, cfg);
      const double tau =
          gumbel::tau_schedule(std::min(result.state.step, total_steps), total_steps, cfg.gumbel_cfg);

      if (cfg.inject_nan_at_step >= 0 && result.state.step == cfg.inject_nan_at_step) {
        auto& value = const_cast<ts::Array<T>&>(m.params().front().var.val());
        value.data[0] = std::numeric_limits<T>::quiet_NaN();
      }

      try {
        Var<T> belief_sum, resp_sum, span_sum, select_sum;
        int correct = 0, select_total = 0;
        size_t n_batch = end - start;
        for (size_t bi = start; bi < end; ++bi) {
          const auto inputs = sample_select_inputs<T>(corpus, *turns[order[bi]], cfg.variant,
                                                      rngs, cfg.gumbel_cfg, mcfg.vocab_size);
          auto tl = turn_losses(m, corpus, *turns[order[bi]], cfg.variant, tau, inputs,
                                cfg.gumbel_cfg, cfg.argmax_control, /*training=*/true,
                                &dropout_rng);
          belief_sum = belief_sum.defined() ? ts::add(belief_sum, tl.belief_nll) : tl.belief_nll;
          resp_sum = resp_sum.defined() ? ts::add(resp_sum, tl.resp_nll) : tl.resp_nll;
          span_sum = span_sum.defined() ? ts::add(span_sum, tl.span_ce) : tl.span_ce;
          if (tl.select_bce.defined())
            select_sum = select_sum.defined() ? ts::add(select_sum, tl.select_bce) : tl.select_bce;
          correct += tl.select_correct;
          select_total += tl.select_total;
        }
        const T inv = T(1) / static_cast<T>(n_batch);
        auto breakdown = objectives::total_loss(
            ts::scale(belief_sum, inv), ts::scale(resp_sum, inv), ts::scale(span_sum, inv),
            select_sum.defined() ? ts::scale(select_sum, inv) : Var<T>(), cfg.weights, cfg.variant);

        if (!std::isfinite(static_cast<double>(breakdown.total.item())))
          throw NonFiniteError("total loss is non-finite");

        m.zero_grads();
        ts::backward(breakdown.total);
        const double grad_norm = clip_gradients(m.params(), cfg.clip_norm);
        adam_step(m.params(), adam_state, lr, cfg.adam);

        nlohmann::json rec = {{"step", result.state.step},
                              {"epoch", epoch},
                              {"lr", lr},
                              {"belief_nll", static_cast<double>(breakdown.belief_nll.item())},
                              {"resp_nll", static_cast<double>(breakdown.resp_nll.item())},
                              {"span_ce", static_cast<double>(breakdown.span_ce.item())},
                              {"total", static_cast<double>(breakdown.total.item())},
                              {"grad_norm", grad_norm},
                              {"weights", cfg.weights.to_json()}};
        if (cfg.variant != Variant::none) {
          rec["select_bce"] = static_cast<double>(breakdown.select_bce.item());
          rec["select_acc"] =
              select_total > 0 ? static_cast<double>(correct) / select_total : 0.0;
        }
        if (cfg.variant == Variant::differentiable) rec["tau"] = tau;
        emit(std::move(rec));
        result.state.step++;
      } catch (const NonFiniteError& e) {
        result.aborted = true;
        result.abort_record = {{"event", "abort"},
                               {"step", result.state.step},
                               {"error", e.what()},
                               {"lr", lr},
                               {"tau", tau}};
        emit(result.abort_record);
        warn(std::string("training aborted at step ") + std::to_string(result.state.step) + ": " +
             e.what());
        stop = true;
        break;
      }
    }
    if (result.aborted) break;

    const bool last_epoch = epoch + 1 == cfg.epochs || stop;
    if ((epoch + 1) % cfg.eval_every_epochs == 0 || last_epoch) {
      auto dev = evaluation::evaluate_model(m, corpus, "dev");
      const bool improved = dev.combined > result.state.best_dev_combined;
      if (improved) {
        result.state.best_dev_combined = dev.combined;
        if (!out_dir.empty()) {
          result.state.best_checkpoint_dir = out_dir + "/checkpoint_best";
          m.save_checkpoint(result.state.best_checkpoint_dir,
                            {{"variant", objectives::variant_name(cfg.variant)},
                             {"seed", cfg.seed}});
        }
      }
      emit({{"event", "dev_eval"},
            {"epoch", epoch},
            {"step", result.state.step},
            {"inform", dev.inform},
            {"success", dev.success},
            {"bleu", dev.bleu},
            {"combined", dev.combined},
            {"improved", improved}});
    }
  }

  result.trained.emplace(std::move(m));
  return result;
}

}  // namespace todsel::training
