// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end inference (belief -> DB -> action/response with generated
// history roll-forward) and metric computation: corpus-level BLEU-4 with
// add-epsilon smoothing, dialogue-level Inform/Success against the corpus
// goals and databases, and the combined score 0.5*(Inform+Success)+BLEU.
#pragma once

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "todsel/corpus.hpp"
#include "todsel/model.hpp"

namespace todsel::evaluation {

struct EvalOptions {
  bool oracle_belief = false;  // diagnostics: gold belief, generated response
  size_t max_belief_len = 48;
  size_t max_resp_len = 72;
};

struct TurnResult {
  int turn_index = 0;
  std::string gen_belief_text;            // with <sos_b>/<eos_b> markers
  corpus::BeliefState resolved_belief;    // placeholders resolved to values
  std::string gen_db_state;
  std::string gen_response;               // response region text
  std::vector<std::string> flags;
};

struct DialogueResult {
  std::string dialogue_id;
  std::vector<TurnResult> turns;
  bool informed = false;
  bool successful = false;
  bool excluded = false;  // missing goal
  std::vector<std::string> flags;
};

struct MetricsReport {
  double inform = 0;    // percentage
  double success = 0;   // percentage
  double bleu = 0;      // 0..100
  double combined = 0;  // 0.5*(inform+success)+bleu
  size_t n_dialogues = 0;
  size_t n_excluded = 0;
  std::vector<DialogueResult> details;

  nlohmann::json to_json() const;
};

// Produces the belief / action+response regions for one turn. Returned token
// ids follow greedy_decode's convention: the sequence after the start marker,
// including the end marker when it was produced.
class GenerationBackend {
 public:
  virtual ~GenerationBackend() = default;
  virtual std::vector<int> generate_belief(const corpus::DialogueTurn& turn,
                                           const std::vector<int>& context_ids) = 0;
  virtual std::vector<int> generate_response(const corpus::DialogueTurn& turn,
                                             const std::vector<int>& enc_ids) = 0;
};

template <typename T>
class ModelBackend : public GenerationBackend {
 public:
  ModelBackend(const model::Model<T>& m, const corpus::Vocab& vocab, const EvalOptions& opts)
      : model_(&m), vocab_(&vocab), opts_(opts) {}

  std::vector<int> generate_belief(const corpus::DialogueTurn&,
                                   const std::vector<int>& context_ids) override {
    auto enc = model_->encode(context_ids);
    return model_->greedy_decode(enc, model::DecoderKind::belief, vocab_->require("<sos_b>"),
                                 vocab_->require("<eos_b>"), opts_.max_belief_len);
  }

  std::vector<int> generate_response(const corpus::DialogueTurn&,
                                     const std::vector<int>& enc_ids) override {
    auto enc = model_->encode(enc_ids);
    return model_->greedy_decode(enc, model::DecoderKind::response, vocab_->require("<sos_a>"),
                                 vocab_->require("<eos_r>"), opts_.max_resp_len);
  }

 private:
  const model::Model<T>* model_;
  const corpus::Vocab* vocab_;
  EvalOptions opts_;
};

// Upper-bound fixture: emits the gold sequences regardless of context.
class OracleBackend : public GenerationBackend {
 public:
  explicit OracleBackend(const corpus::Corpus& c) : corpus_(&c) {}
  std::vector<int> generate_belief(const corpus::DialogueTurn& turn,
                                   const std::vector<int>&) override;
  std::vector<int> generate_response(const corpus::DialogueTurn& turn,
                                     const std::vector<int>&) override;

 private:
  const corpus::Corpus* corpus_;
};

std::vector<DialogueResult> run_inference(GenerationBackend& backend, const corpus::Corpus& corpus,
                                          const std::string& split, const EvalOptions& opts = {});

// Corpus-level BLEU-4: modified n-gram precisions with epsilon smoothing
// (eps=1e-9 replaces zero numerators), brevity penalty, scaled to 0..100.
double bleu(const std::vector<std::string>& references, const std::vector<std::string>& hypotheses);

// Dialogue-level Inform/Success; fills the per-dialogue fields in `results`.
std::pair<double, double> inform_success(std::vector<DialogueResult>& results,
                                         const corpus::Corpus& corpus);

inline double combined_score(double inform, double success, double bleu_score) {
  return 0.5 * (inform + success) + bleu_score;
}

// Full pipeline over one split.
MetricsReport evaluate(GenerationBackend& backend, const corpus::Corpus& corpus,
                       const std::string& split, const EvalOptions& opts = {});

template <typename T>
MetricsReport evaluate_model(const model::Model<T>& m, const corpus::Corpus& corpus,
                             const std::string& split, const EvalOptions& opts = {}) {
  ModelBackend<T> backend(m, corpus.vocab, opts);
  return evaluate(backend, corpus, split, opts);
}

}  // namespace todsel::evaluation
