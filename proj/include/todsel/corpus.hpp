// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic task-oriented dialogue corpus: schema + databases, templated
// goal -> belief -> DB -> action -> response dialogue generation,
// delexicalization, word-level tokenizer with atomic marker tokens,
// distractor sampling, DB count bucketing, and construction of the
// encoder/decoder training sequences.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "todsel/rng.hpp"
#include "todsel/util.hpp"

namespace todsel::corpus {

using ts::Rng;

// ---------------------------------------------------------------------------
// schema

struct SlotDef {
  std::string name;
  std::vector<std::string> values;
};

struct DomainSchema {
  std::string name;
  std::vector<SlotDef> informable;  // canonical slot order
  std::vector<std::string> requestable;

  const SlotDef* find_slot(const std::string& slot) const;
};

struct DbRow {
  std::map<std::string, std::string> fields;  // includes "name" and requestables
};

struct Schema {
  std::vector<DomainSchema> domains;
  std::map<std::string, std::vector<DbRow>> db;

  const DomainSchema* find_domain(const std::string& name) const;
  // Union of informable slot names across domains, sorted; defines span tags.
  std::vector<std::string> informable_slot_types() const;
  // BIO over slot types: 0 = O, then B/I per slot type. 2*|types|+1 tags.
  size_t n_span_tags() const { return 2 * informable_slot_types().size() + 1; }
  int span_tag_id(const std::string& slot, bool begin) const;
  std::string span_tag_name(int id) const;

  nlohmann::json to_json() const;
  static Schema from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------------------
// dialogues

struct ActionTriple {
  std::string domain, act, slot;
  bool operator==(const ActionTriple&) const = default;
};

struct DomainGoal {
  std::map<std::string, std::string> constraints;  // slot -> surface value
  std::vector<std::string> requestables;
  bool operator==(const DomainGoal&) const = default;
};
using Goal = std::map<std::string, DomainGoal>;

using BeliefState = std::map<std::string, std::map<std::string, std::string>>;

struct DialogueTurn {
  std::string dialogue_id;
  int turn_index = 0;
  std::vector<std::string> history;  // prior texts, user/system alternating
  std::string user_utterance;        // delexicalized
  BeliefState belief_state;          // cumulative, surface values
  std::string db_state;              // bucket token, e.g. "[db_2]"
  std::vector<ActionTriple> system_action;
  std::string response;  // delexicalized
  std::vector<int> span_tags;
  Goal goal;

  const std::string& active_domain() const;
};

struct Dialogue {
  std::string id;
  Goal goal;
  std::vector<DialogueTurn> turns;
};

// ---------------------------------------------------------------------------
// vocabulary and tokenizer

// Word-level tokens; "[...]" and "<...>" spans are single atomic tokens.
std::vector<std::string> tokenize_words(const std::string& text);
std::string detokenize_words(const std::vector<std::string>& tokens);

class Vocab {
 public:
  static const std::vector<std::string>& special_tokens();  // <pad>, <unk>, markers, db buckets

  Vocab() = default;
  explicit Vocab(std::vector<std::string> tokens);

  size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  int id(const std::string& token) const;       // -1 when absent
  int require(const std::string& token) const;  // throws ValidationError
  const std::string& token(int id) const;

  // allow_unk=false throws on unknown tokens (training on a closed corpus);
  // allow_unk=true maps them to <unk> (evaluation time).
  std::vector<int> encode(const std::string& text, bool allow_unk) const;
  std::string decode(const std::vector<int>& ids) const;

  int pad_id() const { return pad_id_; }
  int unk_id() const { return unk_id_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
  int pad_id_ = -1, unk_id_ = -1;
};

// ---------------------------------------------------------------------------
// corpus

struct Corpus {
  Schema schema;
  std::vector<Dialogue> dialogues;                      // sorted by id
  std::map<std::string, std::vector<std::string>> splits;  // split -> sorted ids
  Vocab vocab;

  const Dialogue* find_dialogue(const std::string& id) const;
  std::vector<const Dialogue*> split_dialogues(const std::string& split) const;
  // Domains in first-appearance order within the belief as of this turn.
  static std::vector<std::string> belief_domain_order(const Dialogue& d, int turn_index);
};

struct CorpusSpec {
  std::vector<std::string> domains;  // from the built-in template library
  int dialogues_per_combination = 8;
  int dialogues_total = 0;           // when > 0, overrides per-combination count
  std::map<std::string, int> db_rows;

  nlohmann::json to_json() const;
  static CorpusSpec from_json(const nlohmann::json& j);
  void validate() const;
};

Corpus generate_corpus(const CorpusSpec& spec, uint64_t seed);

// Longest-match-first, case-insensitive surface-value replacement with
// [value_<slot>] placeholders; text inside existing [...] spans is left alone.
std::string delexicalize(const std::string& text,
                         const std::map<std::string, std::string>& entities);

// Uniform response from other training turns, re-drawn until it differs from
// the turn's own response (bounded retries).
std::string sample_distractor(const Corpus& corpus, const DialogueTurn& turn, Rng& rng);

// Count rows of `domain` matching every constraint in belief[domain], bucket
// into {0,1,2,3,>=4} -> "[db_0]".."[db_4plus]".
std::string db_query(const BeliefState& belief, const Schema& schema, const std::string& domain);
int db_match_count(const BeliefState& belief, const Schema& schema, const std::string& domain);

// Belief target token text: "<sos_b> [domain] slot [value_slot] ... <eos_b>".
std::string belief_sequence_text(const BeliefState& belief, const Schema& schema,
                                 const std::vector<std::string>& domain_order);
// Action+response target text: "<sos_a> [domain] [act] slots <eos_a> <sos_r> ... <eos_r>".
std::string response_sequence_text(const std::vector<ActionTriple>& actions,
                                   const std::string& response);

// Parse the inverse of belief_sequence_text. Unknown domains/slots are
// dropped and reported through `flags`.
struct ParsedBelief {
  BeliefState belief;  // values are "[value_<slot>]" placeholders
  std::vector<std::string> domain_order;
  bool malformed = false;
};
ParsedBelief parse_belief_tokens(const std::vector<std::string>& tokens, const Schema& schema);

struct TurnSequences {
  std::vector<int> encoder_input_belief;  // C_t
  std::vector<int> belief_target;         // <sos_b> ... <eos_b>
  std::vector<int> encoder_input_resp;    // C_t + belief + db token
  std::vector<int> resp_target;           // <sos_a> ... <eos_r>
  std::vector<int> span_targets;          // per encoder_input_belief position
  std::vector<uint8_t> span_mask;         // 1 on current user-utterance tokens
  std::vector<int> select_truth;          // C_t + <sys> + T_t
  std::vector<int> select_distractor;     // C_t + <sys> + D_t (empty when unused)
};

TurnSequences build_sequences(const Corpus& corpus, const DialogueTurn& turn,
                              const std::string* distractor_text = nullptr);

// ---------------------------------------------------------------------------
// files

// Writes schema.json, vocab.txt, and one <split>.json per split into dir.
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

// Full invariant sweep; returns human-readable problems (empty = valid).
std::vector<std::string> validate_corpus(const Corpus& corpus);

nlohmann::json dialogue_to_json(const Dialogue& d);
Dialogue dialogue_from_json(const nlohmann::json& j);

}  // namespace todsel::corpus
