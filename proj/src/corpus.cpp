// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
#include "todsel/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <set>
#include <sstream>

namespace todsel::corpus {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// schema

const SlotDef* DomainSchema::find_slot(const std::string& slot) const {
  for (const auto& s : informable)
    if (s.name == slot) return &s;
  return nullptr;
}

const DomainSchema* Schema::find_domain(const std::string& name) const {
  for (const auto& d : domains)
    if (d.name == name) return &d;
  return nullptr;
}

std::vector<std::string> Schema::informable_slot_types() const {
  std::set<std::string> types;
  for (const auto& d : domains)
    for (const auto& s : d.informable) types.insert(s.name);
  return {types.begin(), types.end()};
}

int Schema::span_tag_id(const std::string& slot, bool begin) const {
  const auto types = informable_slot_types();
  const auto it = std::find(types.begin(), types.end(), slot);
  if (it == types.end()) throw ValidationError("span_tag_id: unknown slot type '" + slot + "'");
  return 1 + 2 * static_cast<int>(it - types.begin()) + (begin ? 0 : 1);
}

std::string Schema::span_tag_name(int id) const {
  if (id == 0) return "O";
  const auto types = informable_slot_types();
  const size_t idx = static_cast<size_t>(id - 1) / 2;
  if (idx >= types.size()) throw ValidationError("span_tag_name: tag id out of range");
  return ((id - 1) % 2 == 0 ? "B-" : "I-") + types[idx];
}

nlohmann::json Schema::to_json() const {
  nlohmann::json jd = nlohmann::json::array();
  for (const auto& d : domains) {
    nlohmann::json slots = nlohmann::json::array();
    for (const auto& s : d.informable) slots.push_back({{"name", s.name}, {"values", s.values}});
    jd.push_back({{"name", d.name}, {"informable", slots}, {"requestable", d.requestable}});
  }
  nlohmann::json jdb = nlohmann::json::object();
  for (const auto& [domain, rows] : db) {
    nlohmann::json jrows = nlohmann::json::array();
    for (const auto& r : rows) jrows.push_back(r.fields);
    jdb[domain] = jrows;
  }
  return {{"domains", jd}, {"db", jdb}};
}

Schema Schema::from_json(const nlohmann::json& j) {
  Schema s;
  for (const auto& jd : j.at("domains")) {
    DomainSchema d;
    d.name = jd.at("name").get<std::string>();
    for (const auto& js : jd.at("informable"))
      d.informable.push_back({js.at("name").get<std::string>(),
                              js.at("values").get<std::vector<std::string>>()});
    d.requestable = jd.at("requestable").get<std::vector<std::string>>();
    s.domains.push_back(std::move(d));
  }
  for (const auto& [domain, jrows] : j.at("db").items()) {
    std::vector<DbRow> rows;
    for (const auto& jr : jrows)
      rows.push_back({jr.get<std::map<std::string, std::string>>()});
    s.db.emplace(domain, std::move(rows));
  }
  return s;
}

const std::string& DialogueTurn::active_domain() const {
  if (system_action.empty())
    throw ValidationError("turn " + dialogue_id + "#" + std::to_string(turn_index) +
                          " has no system action");
  return system_action.front().domain;
}

// ---------------------------------------------------------------------------
// tokenizer

static bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

std::vector<std::string> tokenize_words(const std::string& text) {
  std::vector<std::string> out;
  size_t i = 0;
  const size_t n = text.size();
  while (i < n) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (c == '[' || c == '<') {
      const char close = c == '[' ? ']' : '>';
      size_t j = text.find(close, i);
      if (j == std::string::npos) j = n - 1;
      out.push_back(text.substr(i, j - i + 1));
      i = j + 1;
      continue;
    }
    if (is_word_char(c)) {
      size_t j = i;
      while (j < n && is_word_char(text[j])) ++j;
      out.push_back(text.substr(i, j - i));
      i = j;
      continue;
    }
    out.push_back(std::string(1, c));
    ++i;
  }
  return out;
}

std::string detokenize_words(const std::vector<std::string>& tokens) {
  return join(tokens, " ");
}

// ---------------------------------------------------------------------------
// vocab

const std::vector<std::string>& Vocab::special_tokens() {
  static const std::vector<std::string> specials = {
      "<pad>",   "<unk>",   "<usr>",   "<sys>",   "<sos_b>",      "<eos_b>", "<sos_a>", "<eos_a>",
      "<sos_r>", "<eos_r>", "[db_0]",  "[db_1]",  "[db_2]",       "[db_3]",  "[db_4plus]"};
  return specials;
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw ValidationError("duplicate vocabulary token '" + tokens_[i] + "'");
  }
  pad_id_ = id("<pad>");
  unk_id_ = id("<unk>");
  if (pad_id_ < 0 || unk_id_ < 0)
    throw ValidationError("vocabulary must contain <pad> and <unk>");
}

int Vocab::id(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? -1 : it->second;
}

int Vocab::require(const std::string& token) const {
  const int i = id(token);
  if (i < 0) throw ValidationError("token '" + token + "' not in vocabulary");
  return i;
}

const std::string& Vocab::token(int tid) const {
  if (tid < 0 || static_cast<size_t>(tid) >= tokens_.size())
    throw ValidationError("token id " + std::to_string(tid) + " out of range");
  return tokens_[static_cast<size_t>(tid)];
}

std::vector<int> Vocab::encode(const std::string& text, bool allow_unk) const {
  std::vector<int> out;
  for (const auto& tok : tokenize_words(text)) {
    const int tid = id(tok);
    if (tid >= 0) {
      out.push_back(tid);
    } else if (allow_unk) {
      out.push_back(unk_id_);
    } else {
      throw ValidationError("unknown token '" + tok + "' with closed vocabulary");
    }
  }
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::vector<std::string> toks;
  toks.reserve(ids.size());
  for (int tid : ids) toks.push_back(token(tid));
  return detokenize_words(toks);
}

// ---------------------------------------------------------------------------
// built-in template library

namespace {

struct BuiltinDomain {
  std::string name;
  std::vector<SlotDef> informable;
  std::vector<std::string> requestable;
  std::vector<std::string> name_nouns;
  std::vector<std::string> opening_first;
  std::vector<std::string> opening_followup;
  std::vector<std::string> inform_responses;
};

const std::vector<std::string> kAreas = {"north", "south", "east", "west", "centre"};
const std::vector<std::string> kPriceranges = {"cheap", "moderate", "expensive"};

const std::vector<BuiltinDomain>& builtin_domains() {
  static const std::vector<BuiltinDomain> lib = {
      {"restaurant",
       {{"area", kAreas},
        {"food", {"italian", "chinese", "indian", "british", "french"}},
        {"pricerange", kPriceranges}},
       {"phone", "address", "postcode"},
       {"palace", "kitchen", "garden", "spoon", "house", "table"},
       {"i am looking for a restaurant .", "i need a place to eat ."},
       {"i am also looking for a restaurant .", "next i need a place to eat ."},
       {"i recommend [value_name] ."}},
      {"hotel",
       {{"area", kAreas},
        {"pricerange", kPriceranges},
        {"stars", {"two", "three", "four", "five"}}},
       {"phone", "address", "postcode"},
       {"lodge", "inn", "tower", "arms", "court", "crown"},
       {"i am looking for a hotel .", "i need a place to stay ."},
       {"i am also looking for a hotel .", "next i need a place to stay ."},
       {"i suggest [value_name] ."}},
      {"attraction",
       {{"area", kAreas},
        {"type", {"museum", "park", "theatre", "cinema", "college"}}},
       {"phone", "address", "entrancefee"},
       {"gallery", "hall", "grounds", "keep", "arch", "green"},
       {"i am looking for an attraction to visit .", "i want something fun to see ."},
       {"i am also looking for an attraction to visit .", "i also want something fun to see ."},
       {"you could visit [value_name] ."}},
  };
  return lib;
}

const BuiltinDomain& builtin_domain(const std::string& name) {
  for (const auto& d : builtin_domains())
    if (d.name == name) return d;
  throw ConfigError("unknown domain '" + name + "' (available: restaurant, hotel, attraction)");
}

const std::vector<std::string>& slot_fragments(const std::string& slot) {
  static const std::map<std::string, std::vector<std::string>> frags = {
      {"food", {"it should serve {v} food .", "i want {v} food ."}},
      {"area", {"it should be in the {v} .", "i want it in the {v} part of town ."}},
      {"pricerange", {"it should be {v} .", "i want something {v} ."}},
      {"stars", {"it should have {v} stars .", "i want a {v} star place ."}},
      {"type", {"i want a {v} .", "it should be a {v} ."}},
  };
  const auto it = frags.find(slot);
  if (it == frags.end()) throw ConfigError("no utterance fragment for slot '" + slot + "'");
  return it->second;
}

const std::string& requestable_fragment(const std::string& slot) {
  static const std::map<std::string, std::string> frags = {
      {"phone", "the phone number is [value_phone] ."},
      {"address", "the address is [value_address] ."},
      {"postcode", "the postcode is [value_postcode] ."},
      {"entrancefee", "the entrance fee is [value_entrancefee] ."},
  };
  const auto it = frags.find(slot);
  if (it == frags.end()) throw ConfigError("no response fragment for requestable '" + slot + "'");
  return it->second;
}

const std::vector<std::string> kRequestLeadins = {"can you tell me the {s} ?",
                                                  "what is the {s} ?"};

const std::vector<std::string> kNameAdjectives = {"golden", "silver", "royal", "old",
                                                  "blue",   "green",  "grand", "little",
                                                  "white",  "red",    "ancient", "happy"};
const std::vector<std::string> kStreets = {"mill road",    "king street",  "station road",
                                           "high street",  "bridge lane",  "market square"};

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[rng.uniform_int(v.size())];
}

std::string make_phone(Rng& rng) {
  std::string s = "01223";
  for (int i = 0; i < 6; ++i) s += static_cast<char>('0' + rng.uniform_int(10));
  return s;
}

std::string make_postcode(Rng& rng) {
  std::string s = "cb";
  s += static_cast<char>('1' + rng.uniform_int(5));
  s += static_cast<char>('a' + rng.uniform_int(26));
  s += static_cast<char>('a' + rng.uniform_int(26));
  return s;
}

std::string requestable_value(const std::string& slot, Rng& rng) {
  if (slot == "phone") return make_phone(rng);
  if (slot == "address")
    return std::to_string(2 + rng.uniform_int(96)) + " " + pick(kStreets, rng);
  if (slot == "postcode") return make_postcode(rng);
  if (slot == "entrancefee") {
    static const std::vector<std::string> fees = {"free", "2 pounds", "4 pounds", "6 pounds"};
    return pick(fees, rng);
  }
  throw ConfigError("no value generator for requestable '" + slot + "'");
}

std::vector<DbRow> make_db_rows(const BuiltinDomain& dom, int n, Rng& rng) {
  std::vector<DbRow> rows;
  std::set<std::string> used_names;
  for (int i = 0; i < n; ++i) {
    DbRow row;
    std::string name;
    for (int attempt = 0; attempt < 64; ++attempt) {
      name = pick(kNameAdjectives, rng) + " " + pick(dom.name_nouns, rng);
      if (used_names.insert(name).second) break;
      name.clear();
    }
    if (name.empty()) name = "the " + dom.name + " " + std::to_string(i);
    row.fields["name"] = name;
    for (const auto& slot : dom.informable) row.fields[slot.name] = pick(slot.values, rng);
    for (const auto& req : dom.requestable) row.fields[req] = requestable_value(req, rng);
    rows.push_back(std::move(row));
  }
  return rows;
}

// Substitutes the placeholder for "{v}", tokenizes, and emits span tags at
// the placeholder position.
void append_fragment(const std::string& tmpl, const std::string& placeholder, int tag,
                     std::vector<std::string>& tokens, std::vector<int>& tags) {
  std::string text = tmpl;
  const size_t pos = text.find("{v}");
  if (pos != std::string::npos) {
    if (placeholder.empty())
      throw ValidationError("template '" + tmpl + "' has a value hole but no placeholder");
    text.replace(pos, 3, placeholder);
  }
  for (const auto& tok : tokenize_words(text)) {
    tokens.push_back(tok);
    tags.push_back(!placeholder.empty() && tok == placeholder ? tag : 0);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// corpus spec

nlohmann::json CorpusSpec::to_json() const {
  return {{"domains", domains},
          {"dialogues_per_combination", dialogues_per_combination},
          {"dialogues_total", dialogues_total},
          {"db_rows", db_rows}};
}

CorpusSpec CorpusSpec::from_json(const nlohmann::json& j) {
  CorpusSpec s;
  if (!j.contains("domains")) throw ConfigError("corpus spec: missing field 'domains'");
  s.domains = j.at("domains").get<std::vector<std::string>>();
  if (j.contains("dialogues_per_combination"))
    s.dialogues_per_combination = j.at("dialogues_per_combination").get<int>();
  if (j.contains("dialogues_total")) s.dialogues_total = j.at("dialogues_total").get<int>();
  if (j.contains("db_rows")) s.db_rows = j.at("db_rows").get<std::map<std::string, int>>();
  return s;
}

void CorpusSpec::validate() const {
  if (domains.size() < 2)
    throw ConfigError("corpus spec: field 'domains' needs at least 2 domains");
  std::set<std::string> seen;
  for (const auto& d : domains) {
    builtin_domain(d);  // throws on unknown
    if (!seen.insert(d).second) throw ConfigError("corpus spec: duplicate domain '" + d + "'");
  }
  if (dialogues_total < 0) throw ConfigError("corpus spec: field 'dialogues_total' negative");
  if (dialogues_total == 0 && dialogues_per_combination < 1)
    throw ConfigError("corpus spec: field 'dialogues_per_combination' must be >= 1");
  for (const auto& [d, n] : db_rows)
    if (n < 4) throw ConfigError("corpus spec: field 'db_rows." + d + "' must be >= 4");
}

// ---------------------------------------------------------------------------
// generation

namespace {

Goal make_goal(const std::vector<std::string>& domain_order, const Schema& schema, Rng& rng) {
  Goal goal;
  for (const auto& dname : domain_order) {
    const DomainSchema& dom = *schema.find_domain(dname);
    const auto& rows = schema.db.at(dname);
    const DbRow& row = rows[rng.uniform_int(rows.size())];

    DomainGoal dg;
    std::vector<size_t> slot_idx(dom.informable.size());
    for (size_t i = 0; i < slot_idx.size(); ++i) slot_idx[i] = i;
    rng.shuffle(slot_idx.begin(), slot_idx.end());
    const size_t n_constraints = std::min<size_t>(2, dom.informable.size());
    slot_idx.resize(n_constraints);
    for (size_t i : slot_idx) {
      const auto& slot = dom.informable[i].name;
      dg.constraints[slot] = row.fields.at(slot);
    }

    // one requested slot per domain keeps the request-answer patterns dense
    // enough for a desk-scale model to generalize across dialogues
    dg.requestables.push_back(dom.requestable[rng.uniform_int(dom.requestable.size())]);

    goal.emplace(dname, std::move(dg));
  }
  return goal;
}

Dialogue make_dialogue(const std::string& id, std::vector<std::string> domain_order,
                       const Schema& schema, Rng& rng) {
  Dialogue dlg;
  dlg.id = id;
  dlg.goal = make_goal(domain_order, schema, rng);

  std::vector<std::string> history;
  BeliefState belief;
  int turn_index = 0;

  for (size_t di = 0; di < domain_order.size(); ++di) {
    const std::string& dname = domain_order[di];
    const BuiltinDomain& dom = builtin_domain(dname);
    const DomainSchema& dschema = *schema.find_domain(dname);
    const DomainGoal& dgoal = dlg.goal.at(dname);

    // --- inform turn: user states constraints, system offers an entity
    std::vector<std::string> utt_tokens;
    std::vector<int> utt_tags;
    const auto& openings = di == 0 ? dom.opening_first : dom.opening_followup;
    append_fragment(pick(openings, rng), "", 0, utt_tokens, utt_tags);
    for (const auto& slot : dschema.informable) {
      if (!dgoal.constraints.count(slot.name)) continue;
      append_fragment(pick(slot_fragments(slot.name), rng), "[value_" + slot.name + "]",
                      schema.span_tag_id(slot.name, true), utt_tokens, utt_tags);
    }

    for (const auto& [slot, value] : dgoal.constraints) belief[dname][slot] = value;

    DialogueTurn inform;
    inform.dialogue_id = id;
    inform.turn_index = turn_index++;
    inform.history = history;
    inform.user_utterance = detokenize_words(utt_tokens);
    inform.span_tags = utt_tags;
    inform.belief_state = belief;
    inform.db_state = db_query(belief, schema, dname);
    inform.system_action = {{dname, "inform", "name"}};
    inform.response = pick(dom.inform_responses, rng);
    inform.goal = dlg.goal;
    history.push_back(inform.user_utterance);
    history.push_back(inform.response);
    dlg.turns.push_back(std::move(inform));

    // --- request turn: user asks for the goal requestables
    std::vector<std::string> req_names;
    for (const auto& r : dgoal.requestables) req_names.push_back(r == "entrancefee" ? "entrance fee" : r);
    const std::string slot_list = join(req_names, " and the ");
    std::string lead = pick(kRequestLeadins, rng);
    lead.replace(lead.find("{s}"), 3, slot_list);

    DialogueTurn request;
    request.dialogue_id = id;
    request.turn_index = turn_index++;
    request.history = history;
    request.user_utterance = lead;
    request.span_tags.assign(tokenize_words(lead).size(), 0);
    request.belief_state = belief;
    request.db_state = db_query(belief, schema, dname);
    for (const auto& r : dgoal.requestables) request.system_action.push_back({dname, "inform", r});
    std::vector<std::string> resp_parts;
    for (const auto& r : dgoal.requestables) resp_parts.push_back(requestable_fragment(r));
    request.response = join(resp_parts, " ");
    request.goal = dlg.goal;
    history.push_back(request.user_utterance);
    history.push_back(request.response);
    dlg.turns.push_back(std::move(request));
  }
  return dlg;
}

Vocab build_vocab(const Corpus& corpus) {
  std::set<std::string> words;
  for (const auto& dlg : corpus.dialogues) {
    for (const auto& turn : dlg.turns) {
      for (const auto& tok : tokenize_words(turn.user_utterance)) words.insert(tok);
      for (const auto& tok : tokenize_words(turn.response)) words.insert(tok);
      const auto order = Corpus::belief_domain_order(dlg, turn.turn_index);
      for (const auto& tok : tokenize_words(
               belief_sequence_text(turn.belief_state, corpus.schema, order)))
        words.insert(tok);
      for (const auto& tok :
           tokenize_words(response_sequence_text(turn.system_action, turn.response)))
        words.insert(tok);
      words.insert(turn.db_state);
    }
  }
  std::vector<std::string> tokens = Vocab::special_tokens();
  const std::set<std::string> specials(tokens.begin(), tokens.end());
  for (const auto& w : words)
    if (!specials.count(w)) tokens.push_back(w);
  return Vocab(std::move(tokens));
}

}  // namespace

Corpus generate_corpus(const CorpusSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng = ts::stream_rng(seed, ts::Stream::corpus);

  Corpus corpus;
  for (const auto& dname : spec.domains) {
    const BuiltinDomain& dom = builtin_domain(dname);
    DomainSchema ds;
    ds.name = dom.name;
    ds.informable = dom.informable;
    ds.requestable = dom.requestable;
    corpus.schema.domains.push_back(std::move(ds));
    int n_rows = 16;
    const auto it = spec.db_rows.find(dname);
    if (it != spec.db_rows.end()) n_rows = it->second;
    corpus.schema.db.emplace(dname, make_db_rows(dom, n_rows, rng));
  }

  // combinations: singles in spec order, then unordered pairs
  std::vector<std::vector<std::string>> combos;
  for (const auto& d : spec.domains) combos.push_back({d});
  for (size_t i = 0; i < spec.domains.size(); ++i)
    for (size_t j = i + 1; j < spec.domains.size(); ++j)
      combos.push_back({spec.domains[i], spec.domains[j]});

  std::vector<int> counts(combos.size(), spec.dialogues_per_combination);
  if (spec.dialogues_total > 0) {
    std::fill(counts.begin(), counts.end(), spec.dialogues_total / static_cast<int>(combos.size()));
    for (int r = 0; r < spec.dialogues_total % static_cast<int>(combos.size()); ++r) counts[r]++;
  }

  int global_index = 0;
  for (size_t c = 0; c < combos.size(); ++c) {
    for (int k = 0; k < counts[c]; ++k) {
      std::vector<std::string> order = combos[c];
      rng.shuffle(order.begin(), order.end());
      char idbuf[16];
      std::snprintf(idbuf, sizeof(idbuf), "dlg_%04d", global_index++);
      const std::string id = std::string(idbuf) + "_" + join(combos[c], "+");
      corpus.dialogues.push_back(make_dialogue(id, order, corpus.schema, rng));
    }
  }
  std::sort(corpus.dialogues.begin(), corpus.dialogues.end(),
            [](const Dialogue& a, const Dialogue& b) { return a.id < b.id; });

  // 80/10/10 split: train = floor(0.8 n), dev = floor(0.1 n), test = rest
  std::vector<std::string> ids;
  for (const auto& d : corpus.dialogues) ids.push_back(d.id);
  rng.shuffle(ids.begin(), ids.end());
  const size_t n = ids.size();
  const size_t n_train = static_cast<size_t>(0.8 * static_cast<double>(n));
  const size_t n_dev = static_cast<size_t>(0.1 * static_cast<double>(n));
  std::vector<std::string> train(ids.begin(), ids.begin() + n_train);
  std::vector<std::string> dev(ids.begin() + n_train, ids.begin() + n_train + n_dev);
  std::vector<std::string> test(ids.begin() + n_train + n_dev, ids.end());
  std::sort(train.begin(), train.end());
  std::sort(dev.begin(), dev.end());
  std::sort(test.begin(), test.end());
  corpus.splits = {{"train", train}, {"dev", dev}, {"test", test}};

  corpus.vocab = build_vocab(corpus);
  return corpus;
}

// ---------------------------------------------------------------------------
// delexicalization

std::string delexicalize(const std::string& text,
                         const std::map<std::string, std::string>& entities) {
  if (entities.empty()) return text;
  // longest surface value first; ties broken by slot name
  std::vector<std::pair<std::string, std::string>> ordered;  // (value, slot)
  for (const auto& [slot, value] : entities) {
    if (value.empty()) throw ValidationError("delexicalize: empty surface value for '" + slot + "'");
    ordered.emplace_back(value, slot);
  }
  std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
    if (a.first.size() != b.first.size()) return a.first.size() > b.first.size();
    return a.second < b.second;
  });

  const auto lower = [](char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); };
  const auto matches_at = [&](const std::string& value, size_t i) {
    if (i + value.size() > text.size()) return false;
    for (size_t k = 0; k < value.size(); ++k)
      if (lower(text[i + k]) != lower(value[k])) return false;
    const bool left_ok = i == 0 || !is_word_char(text[i - 1]);
    const size_t end = i + value.size();
    const bool right_ok = end == text.size() || !is_word_char(text[end]);
    return left_ok && right_ok;
  };

  std::string out;
  size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '[') {  // existing placeholder: copy through untouched
      size_t j = text.find(']', i);
      if (j == std::string::npos) j = text.size() - 1;
      out.append(text, i, j - i + 1);
      i = j + 1;
      continue;
    }
    bool replaced = false;
    for (const auto& [value, slot] : ordered) {
      if (matches_at(value, i)) {
        out += "[value_" + slot + "]";
        i += value.size();
        replaced = true;
        break;
      }
    }
    if (!replaced) out += text[i++];
  }
  return out;
}

// ---------------------------------------------------------------------------
// distractor sampling

std::string sample_distractor(const Corpus& corpus, const DialogueTurn& turn, Rng& rng) {
  std::vector<const std::string*> responses;
  for (const Dialogue* d : corpus.split_dialogues("train"))
    for (const auto& t : d->turns) responses.push_back(&t.response);
  if (responses.size() < 2)
    throw ValidationError("sample_distractor: training split has fewer than 2 responses");
  bool any_different = false;
  for (const auto* r : responses)
    if (*r != turn.response) {
      any_different = true;
      break;
    }
  if (!any_different)
    throw ValidationError("unsatisfiable-distractor: every training response equals the target");
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const std::string& cand = *responses[rng.uniform_int(responses.size())];
    if (cand != turn.response) return cand;
  }
  throw ValidationError("unsatisfiable-distractor: retry budget exhausted");
}

// ---------------------------------------------------------------------------
// database

int db_match_count(const BeliefState& belief, const Schema& schema, const std::string& domain) {
  const DomainSchema* dom = schema.find_domain(domain);
  if (!dom) throw ValidationError("db_query: unknown domain '" + domain + "'");
  const auto rows_it = schema.db.find(domain);
  if (rows_it == schema.db.end()) throw ValidationError("db_query: no table for domain '" + domain + "'");

  std::map<std::string, std::string> constraints;
  const auto bit = belief.find(domain);
  if (bit != belief.end()) {
    for (const auto& [slot, value] : bit->second) {
      if (!dom->find_slot(slot))
        throw ValidationError("db_query: slot '" + slot + "' not informable for domain '" +
                              domain + "'");
      constraints[slot] = value;
    }
  }

  int count = 0;
  for (const auto& row : rows_it->second) {
    bool ok = true;
    for (const auto& [slot, value] : constraints) {
      const auto f = row.fields.find(slot);
      if (f == row.fields.end() || f->second != value) {
        ok = false;
        break;
      }
    }
    if (ok) count++;
  }
  return count;
}

std::string db_query(const BeliefState& belief, const Schema& schema, const std::string& domain) {
  const int count = db_match_count(belief, schema, domain);
  if (count <= 3) return "[db_" + std::to_string(count) + "]";
  return "[db_4plus]";
}

// ---------------------------------------------------------------------------
// sequence construction

std::string belief_sequence_text(const BeliefState& belief, const Schema& schema,
                                 const std::vector<std::string>& domain_order) {
  std::vector<std::string> toks = {"<sos_b>"};
  for (const auto& dname : domain_order) {
    const auto it = belief.find(dname);
    if (it == belief.end() || it->second.empty()) continue;
    const DomainSchema* dom = schema.find_domain(dname);
    toks.push_back("[" + dname + "]");
    if (dom) {
      for (const auto& slot : dom->informable) {
        const auto sv = it->second.find(slot.name);
        if (sv == it->second.end()) continue;
        toks.push_back(slot.name);
        toks.push_back("[value_" + slot.name + "]");
      }
    }
  }
  toks.push_back("<eos_b>");
  return detokenize_words(toks);
}

std::string response_sequence_text(const std::vector<ActionTriple>& actions,
                                   const std::string& response) {
  std::vector<std::string> toks = {"<sos_a>"};
  std::string cur_domain, cur_act;
  for (const auto& a : actions) {
    if (a.domain != cur_domain || a.act != cur_act) {
      toks.push_back("[" + a.domain + "]");
      toks.push_back("[" + a.act + "]");
      cur_domain = a.domain;
      cur_act = a.act;
    }
    if (!a.slot.empty()) toks.push_back(a.slot);
  }
  toks.push_back("<eos_a>");
  toks.push_back("<sos_r>");
  for (const auto& t : tokenize_words(response)) toks.push_back(t);
  toks.push_back("<eos_r>");
  return detokenize_words(toks);
}

ParsedBelief parse_belief_tokens(const std::vector<std::string>& tokens, const Schema& schema) {
  ParsedBelief out;
  const DomainSchema* current = nullptr;
  for (size_t i = 0; i < tokens.size(); ++i) {
    const std::string& tok = tokens[i];
    if (tok == "<sos_b>" || tok == "<eos_b>" || tok == "<pad>") continue;
    if (tok.size() > 2 && tok.front() == '[' && tok.back() == ']') {
      const std::string dname = tok.substr(1, tok.size() - 2);
      const DomainSchema* dom = schema.find_domain(dname);
      if (dom) {
        current = dom;
        if (!out.belief.count(dname)) {
          out.belief[dname] = {};
          out.domain_order.push_back(dname);
        }
      } else {
        out.malformed = true;
      }
      continue;
    }
    if (current && current->find_slot(tok)) {
      if (i + 1 < tokens.size()) {
        out.belief[current->name][tok] = tokens[++i];
      } else {
        out.malformed = true;
      }
      continue;
    }
    out.malformed = true;
  }
  return out;
}

std::vector<std::string> Corpus::belief_domain_order(const Dialogue& d, int turn_index) {
  std::vector<std::string> order;
  for (const auto& turn : d.turns) {
    if (turn.turn_index > turn_index) break;
    for (const auto& [dname, slots] : turn.belief_state) {
      if (slots.empty()) continue;
      if (std::find(order.begin(), order.end(), dname) == order.end()) order.push_back(dname);
    }
  }
  return order;
}

const Dialogue* Corpus::find_dialogue(const std::string& id) const {
  const auto it = std::lower_bound(dialogues.begin(), dialogues.end(), id,
                                   [](const Dialogue& d, const std::string& s) { return d.id < s; });
  if (it == dialogues.end() || it->id != id) return nullptr;
  return &*it;
}

std::vector<const Dialogue*> Corpus::split_dialogues(const std::string& split) const {
  const auto it = splits.find(split);
  if (it == splits.end()) throw ValidationError("unknown split '" + split + "'");
  std::vector<const Dialogue*> out;
  for (const auto& id : it->second) {
    const Dialogue* d = find_dialogue(id);
    if (!d) throw ValidationError("split '" + split + "' references missing dialogue '" + id + "'");
    out.push_back(d);
  }
  return out;
}

TurnSequences build_sequences(const Corpus& corpus, const DialogueTurn& turn,
                              const std::string* distractor_text) {
  const Dialogue* dlg = corpus.find_dialogue(turn.dialogue_id);
  if (!dlg) throw ValidationError("build_sequences: dialogue '" + turn.dialogue_id + "' not found");
  const Vocab& v = corpus.vocab;
  TurnSequences seq;

  const int usr = v.require("<usr>");
  const int sys = v.require("<sys>");

  // C_t = history with speaker markers, then the current user utterance
  auto append_text = [&](std::vector<int>& dst, const std::string& text) {
    const auto ids = v.encode(text, false);
    dst.insert(dst.end(), ids.begin(), ids.end());
    return ids.size();
  };
  for (size_t j = 0; j < turn.history.size(); ++j) {
    seq.encoder_input_belief.push_back(j % 2 == 0 ? usr : sys);
    append_text(seq.encoder_input_belief, turn.history[j]);
  }
  seq.encoder_input_belief.push_back(usr);
  const size_t utt_start = seq.encoder_input_belief.size();
  const size_t utt_len = append_text(seq.encoder_input_belief, turn.user_utterance);

  seq.span_targets.assign(seq.encoder_input_belief.size(), 0);
  seq.span_mask.assign(seq.encoder_input_belief.size(), 0);
  if (turn.span_tags.size() != utt_len)
    throw ValidationError("build_sequences: span tag length mismatch on " + turn.dialogue_id +
                          "#" + std::to_string(turn.turn_index));
  for (size_t k = 0; k < utt_len; ++k) {
    seq.span_targets[utt_start + k] = turn.span_tags[k];
    seq.span_mask[utt_start + k] = 1;
  }

  const auto order = Corpus::belief_domain_order(*dlg, turn.turn_index);
  append_text(seq.belief_target, belief_sequence_text(turn.belief_state, corpus.schema, order));

  seq.encoder_input_resp = seq.encoder_input_belief;
  seq.encoder_input_resp.insert(seq.encoder_input_resp.end(), seq.belief_target.begin(),
                                seq.belief_target.end());
  seq.encoder_input_resp.push_back(v.require(turn.db_state));

  append_text(seq.resp_target, response_sequence_text(turn.system_action, turn.response));

  seq.select_truth = seq.encoder_input_belief;
  seq.select_truth.push_back(sys);
  append_text(seq.select_truth, turn.response);

  if (distractor_text) {
    seq.select_distractor = seq.encoder_input_belief;
    seq.select_distractor.push_back(sys);
    append_text(seq.select_distractor, *distractor_text);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// files

static nlohmann::json goal_to_json(const Goal& goal) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [dname, dg] : goal)
    j[dname] = {{"constraints", dg.constraints}, {"requestables", dg.requestables}};
  return j;
}

static Goal goal_from_json(const nlohmann::json& j) {
  Goal goal;
  for (const auto& [dname, jd] : j.items()) {
    DomainGoal dg;
    dg.constraints = jd.at("constraints").get<std::map<std::string, std::string>>();
    dg.requestables = jd.at("requestables").get<std::vector<std::string>>();
    goal.emplace(dname, std::move(dg));
  }
  return goal;
}

nlohmann::json dialogue_to_json(const Dialogue& d) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : d.turns) {
    nlohmann::json actions = nlohmann::json::array();
    for (const auto& a : t.system_action)
      actions.push_back(std::vector<std::string>{a.domain, a.act, a.slot});
    turns.push_back({{"dialogue_id", t.dialogue_id},
                     {"turn_index", t.turn_index},
                     {"history", t.history},
                     {"user_utterance", t.user_utterance},
                     {"belief_state", t.belief_state},
                     {"db_state", t.db_state},
                     {"system_action", actions},
                     {"response", t.response},
                     {"span_tags", t.span_tags},
                     {"goal", goal_to_json(t.goal)}});
  }
  return {{"dialogue_id", d.id}, {"goal", goal_to_json(d.goal)}, {"turns", turns}};
}

Dialogue dialogue_from_json(const nlohmann::json& j) {
  Dialogue d;
  d.id = j.at("dialogue_id").get<std::string>();
  d.goal = goal_from_json(j.at("goal"));
  for (const auto& jt : j.at("turns")) {
    DialogueTurn t;
    t.dialogue_id = jt.at("dialogue_id").get<std::string>();
    t.turn_index = jt.at("turn_index").get<int>();
    t.history = jt.at("history").get<std::vector<std::string>>();
    t.user_utterance = jt.at("user_utterance").get<std::string>();
    t.belief_state = jt.at("belief_state").get<BeliefState>();
    t.db_state = jt.at("db_state").get<std::string>();
    for (const auto& ja : jt.at("system_action")) {
      const auto triple = ja.get<std::vector<std::string>>();
      if (triple.size() != 3)
        throw ValidationError("system_action entries must be [domain, act, slot] triples");
      t.system_action.push_back({triple[0], triple[1], triple[2]});
    }
    t.response = jt.at("response").get<std::string>();
    t.span_tags = jt.at("span_tags").get<std::vector<int>>();
    t.goal = goal_from_json(jt.at("goal"));
    d.turns.push_back(std::move(t));
  }
  return d;
}

void save_corpus(const Corpus& corpus, const std::string& dir) {
  fs::create_directories(dir);
  write_text_file((fs::path(dir) / "schema.json").string(), corpus.schema.to_json().dump(2) + "\n");

  std::string vocab_text;
  for (const auto& tok : corpus.vocab.tokens()) vocab_text += tok + "\n";
  write_text_file((fs::path(dir) / "vocab.txt").string(), vocab_text);

  for (const auto& [split, ids] : corpus.splits) {
    nlohmann::json dialogues = nlohmann::json::array();
    for (const auto& id : ids) {
      const Dialogue* d = corpus.find_dialogue(id);
      if (!d) throw ValidationError("save_corpus: missing dialogue '" + id + "'");
      dialogues.push_back(dialogue_to_json(*d));
    }
    write_text_file((fs::path(dir) / (split + ".json")).string(),
                    nlohmann::json{{"dialogues", dialogues}}.dump(2) + "\n");
  }
}

Corpus load_corpus(const std::string& dir) {
  Corpus corpus;
  corpus.schema = Schema::from_json(
      nlohmann::json::parse(read_text_file((fs::path(dir) / "schema.json").string())));

  std::vector<std::string> vocab_tokens;
  std::istringstream vin(read_text_file((fs::path(dir) / "vocab.txt").string()));
  std::string line;
  while (std::getline(vin, line))
    if (!line.empty()) vocab_tokens.push_back(line);
  corpus.vocab = Vocab(std::move(vocab_tokens));

  for (const std::string split : {"train", "dev", "test"}) {
    const auto path = fs::path(dir) / (split + std::string(".json"));
    const auto j = nlohmann::json::parse(read_text_file(path.string()));
    std::vector<std::string> ids;
    for (const auto& jd : j.at("dialogues")) {
      Dialogue d = dialogue_from_json(jd);
      ids.push_back(d.id);
      corpus.dialogues.push_back(std::move(d));
    }
    std::sort(ids.begin(), ids.end());
    corpus.splits.emplace(split, std::move(ids));
  }
  std::sort(corpus.dialogues.begin(), corpus.dialogues.end(),
            [](const Dialogue& a, const Dialogue& b) { return a.id < b.id; });
  return corpus;
}

// ---------------------------------------------------------------------------
// validation

std::vector<std::string> validate_corpus(const Corpus& corpus) {
  std::vector<std::string> problems;
  const auto problem = [&](const std::string& msg) { problems.push_back(msg); };

  // placeholder inventory
  std::set<std::string> inventory;
  for (const auto& d : corpus.schema.domains) {
    inventory.insert("[value_name]");
    for (const auto& s : d.informable) inventory.insert("[value_" + s.name + "]");
    for (const auto& r : d.requestable) inventory.insert("[value_" + r + "]");
  }

  // split disjointness and coverage
  std::set<std::string> seen_ids;
  size_t split_total = 0;
  for (const auto& [split, ids] : corpus.splits) {
    split_total += ids.size();
    for (const auto& id : ids)
      if (!seen_ids.insert(id).second) problem("dialogue '" + id + "' appears in multiple splits");
  }
  if (split_total != corpus.dialogues.size())
    problem("splits cover " + std::to_string(split_total) + " dialogues, corpus has " +
            std::to_string(corpus.dialogues.size()));

  for (const auto& dlg : corpus.dialogues) {
    std::vector<std::string> expected_history;
    std::set<std::string> response_placeholders;
    for (const auto& turn : dlg.turns) {
      const std::string where = dlg.id + "#" + std::to_string(turn.turn_index);
      if (turn.dialogue_id != dlg.id) problem(where + ": dialogue_id mismatch");
      if (!(turn.goal == dlg.goal)) problem(where + ": goal differs from dialogue goal");

      const auto utt_tokens = tokenize_words(turn.user_utterance);
      if (turn.span_tags.size() != utt_tokens.size()) {
        problem(where + ": span_tags length " + std::to_string(turn.span_tags.size()) +
                " != utterance tokens " + std::to_string(utt_tokens.size()));
      } else {
        // tags mark exactly the informable-slot placeholder tokens
        const auto informable = corpus.schema.informable_slot_types();
        for (size_t i = 0; i < utt_tokens.size(); ++i) {
          const int tag = turn.span_tags[i];
          if (tag < 0 || static_cast<size_t>(tag) >= corpus.schema.n_span_tags()) {
            problem(where + ": span tag " + std::to_string(tag) + " out of range");
            continue;
          }
          std::string slot_of_token;
          if (utt_tokens[i].rfind("[value_", 0) == 0 && utt_tokens[i].back() == ']') {
            const std::string slot = utt_tokens[i].substr(7, utt_tokens[i].size() - 8);
            if (std::find(informable.begin(), informable.end(), slot) != informable.end())
              slot_of_token = slot;
          }
          if (slot_of_token.empty()) {
            if (tag != 0)
              problem(where + ": token '" + utt_tokens[i] + "' at " + std::to_string(i) +
                      " tagged " + std::to_string(tag) + " but is not a slot value");
          } else if (tag != corpus.schema.span_tag_id(slot_of_token, true) &&
                     tag != corpus.schema.span_tag_id(slot_of_token, false)) {
            problem(where + ": slot value token '" + utt_tokens[i] + "' at " + std::to_string(i) +
                    " carries tag " + std::to_string(tag) + " instead of its own slot tag");
          }
        }
      }

      if (detokenize_words(utt_tokens) != turn.user_utterance)
        problem(where + ": user utterance does not round-trip through the tokenizer");
      if (detokenize_words(tokenize_words(turn.response)) != turn.response)
        problem(where + ": response does not round-trip through the tokenizer");

      for (const auto& tok : tokenize_words(turn.response))
        if (tok.rfind("[value_", 0) == 0) {
          response_placeholders.insert(tok);
          if (!inventory.count(tok)) problem(where + ": placeholder " + tok + " not in inventory");
        }

      for (const auto& [dname, slots] : turn.belief_state) {
        const DomainSchema* dom = corpus.schema.find_domain(dname);
        if (!dom) {
          problem(where + ": belief domain '" + dname + "' not in schema");
          continue;
        }
        for (const auto& [slot, value] : slots) {
          if (!dom->find_slot(slot))
            problem(where + ": belief slot '" + dname + "." + slot + "' not in schema");
          const auto git = turn.goal.find(dname);
          if (git == turn.goal.end() || !git->second.constraints.count(slot) ||
              git->second.constraints.at(slot) != value)
            problem(where + ": belief value " + dname + "." + slot + "='" + value +
                    "' not backed by the goal");
        }
      }

      if (turn.history != expected_history) problem(where + ": history inconsistent with prior turns");
      expected_history.push_back(turn.user_utterance);
      expected_history.push_back(turn.response);

      if (!turn.system_action.empty()) {
        const std::string recomputed =
            db_query(turn.belief_state, corpus.schema, turn.active_domain());
        if (recomputed != turn.db_state)
          problem(where + ": db_state '" + turn.db_state + "' != recomputed '" + recomputed + "'");
      } else {
        problem(where + ": empty system action");
      }

      try {
        corpus.vocab.encode(turn.user_utterance, false);
        corpus.vocab.encode(turn.response, false);
      } catch (const ValidationError& e) {
        problem(where + ": " + e.what());
      }
    }

    // every goal requestable must be answerable from this dialogue's responses
    for (const auto& [dname, dg] : dlg.goal)
      for (const auto& r : dg.requestables)
        if (!response_placeholders.count("[value_" + r + "]"))
          problem(dlg.id + ": requestable '" + dname + "." + r +
                  "' never answered in responses");
  }
  return problems;
}

}  // namespace todsel::corpus
