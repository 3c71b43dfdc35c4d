// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
#include "todsel/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace todsel::evaluation {

using corpus::BeliefState;
using corpus::Corpus;
using corpus::Dialogue;
using corpus::DialogueTurn;

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json jd = nlohmann::json::array();
  for (const auto& d : details) {
    nlohmann::json jturns = nlohmann::json::array();
    for (const auto& t : d.turns)
      jturns.push_back({{"turn_index", t.turn_index},
                        {"gen_belief", t.gen_belief_text},
                        {"gen_db_state", t.gen_db_state},
                        {"gen_response", t.gen_response},
                        {"flags", t.flags}});
    jd.push_back({{"dialogue_id", d.dialogue_id},
                  {"informed", d.informed},
                  {"successful", d.successful},
                  {"excluded", d.excluded},
                  {"flags", d.flags},
                  {"turns", jturns}});
  }
  return {{"inform", inform},   {"success", success},       {"bleu", bleu},
          {"combined", combined}, {"n_dialogues", n_dialogues}, {"n_excluded", n_excluded},
          {"details", jd}};
}

std::vector<int> OracleBackend::generate_belief(const DialogueTurn& turn,
                                                const std::vector<int>&) {
  const Dialogue* dlg = corpus_->find_dialogue(turn.dialogue_id);
  const auto order = Corpus::belief_domain_order(*dlg, turn.turn_index);
  auto ids = corpus_->vocab.encode(
      corpus::belief_sequence_text(turn.belief_state, corpus_->schema, order), false);
  ids.erase(ids.begin());  // greedy convention: no start marker
  return ids;
}

std::vector<int> OracleBackend::generate_response(const DialogueTurn& turn,
                                                  const std::vector<int>&) {
  auto ids = corpus_->vocab.encode(
      corpus::response_sequence_text(turn.system_action, turn.response), false);
  ids.erase(ids.begin());
  return ids;
}

namespace {

// Resolve generated "[value_x]" placeholders against the gold belief; slots
// the gold belief does not carry resolve to a sentinel that matches no row.
BeliefState resolve_belief(const corpus::ParsedBelief& parsed, const DialogueTurn& gold,
                           std::vector<std::string>& flags) {
  BeliefState resolved;
  for (const auto& [dname, slots] : parsed.belief) {
    for (const auto& [slot, value_tok] : slots) {
      std::string value = "__unmatched__";
      const auto git = gold.belief_state.find(dname);
      if (git != gold.belief_state.end()) {
        const auto sit = git->second.find(slot);
        if (sit != git->second.end()) value = sit->second;
      }
      if (value == "__unmatched__")
        flags.push_back("unresolved_slot:" + dname + "." + slot);
      resolved[dname][slot] = value;
    }
  }
  return resolved;
}

std::vector<int> build_context_ids(const corpus::Vocab& vocab,
                                   const std::vector<std::string>& history,
                                   const std::string& user_utterance) {
  std::vector<int> ids;
  const int usr = vocab.require("<usr>");
  const int sys = vocab.require("<sys>");
  for (size_t j = 0; j < history.size(); ++j) {
    ids.push_back(j % 2 == 0 ? usr : sys);
    const auto h = vocab.encode(history[j], /*allow_unk=*/true);
    ids.insert(ids.end(), h.begin(), h.end());
  }
  ids.push_back(usr);
  const auto u = vocab.encode(user_utterance, /*allow_unk=*/true);
  ids.insert(ids.end(), u.begin(), u.end());
  return ids;
}

}  // namespace

std::vector<DialogueResult> run_inference(GenerationBackend& backend, const Corpus& corpus,
                                          const std::string& split, const EvalOptions& opts) {
  std::vector<DialogueResult> results;
  const corpus::Vocab& vocab = corpus.vocab;
  const int sos_b = vocab.require("<sos_b>");
  const int eos_b = vocab.require("<eos_b>");

  for (const Dialogue* dlg : corpus.split_dialogues(split)) {
    DialogueResult dres;
    dres.dialogue_id = dlg->id;
    std::vector<std::string> history;  // rolls forward with generated responses

    for (const auto& turn : dlg->turns) {
      TurnResult tres;
      tres.turn_index = turn.turn_index;
      const auto ctx = build_context_ids(vocab, history, turn.user_utterance);

      // ---- belief
      std::vector<int> belief_region;
      if (opts.oracle_belief) {
        OracleBackend oracle(corpus);
        belief_region = oracle.generate_belief(turn, ctx);
      } else {
        belief_region = backend.generate_belief(turn, ctx);
      }
      std::vector<int> belief_ids = {sos_b};
      belief_ids.insert(belief_ids.end(), belief_region.begin(), belief_region.end());
      if (belief_ids.back() != eos_b) {
        belief_ids.push_back(eos_b);
        tres.flags.push_back("belief_missing_eos");
      }
      tres.gen_belief_text = vocab.decode(belief_ids);

      std::vector<std::string> belief_tokens;
      for (int id : belief_ids) belief_tokens.push_back(vocab.token(id));
      const auto parsed = corpus::parse_belief_tokens(belief_tokens, corpus.schema);
      if (parsed.malformed) tres.flags.push_back("unparseable_belief");
      tres.resolved_belief = resolve_belief(parsed, turn, tres.flags);

      // ---- DB state from the generated belief
      if (parsed.domain_order.empty()) {
        tres.gen_db_state = "[db_0]";
        tres.flags.push_back("no_domain_in_belief");
      } else {
        tres.gen_db_state =
            corpus::db_query(tres.resolved_belief, corpus.schema, parsed.domain_order.back());
      }

      // ---- action + response conditioned on context, belief, DB token
      std::vector<int> enc2 = ctx;
      enc2.insert(enc2.end(), belief_ids.begin(), belief_ids.end());
      enc2.push_back(vocab.require(tres.gen_db_state));
      const auto resp_region = backend.generate_response(turn, enc2);

      std::vector<std::string> resp_tokens;
      for (int id : resp_region) resp_tokens.push_back(vocab.token(id));
      const auto sos_r = std::find(resp_tokens.begin(), resp_tokens.end(), "<sos_r>");
      if (sos_r == resp_tokens.end()) {
        tres.flags.push_back("missing_sos_r");
        tres.gen_response = "";
      } else {
        std::vector<std::string> resp_only(sos_r + 1, resp_tokens.end());
        while (!resp_only.empty() && (resp_only.back() == "<eos_r>" || resp_only.back() == "<pad>"))
          resp_only.pop_back();
        tres.gen_response = corpus::detokenize_words(resp_only);
      }

      history.push_back(turn.user_utterance);
      history.push_back(tres.gen_response);
      dres.turns.push_back(std::move(tres));
    }
    results.push_back(std::move(dres));
  }
  std::sort(results.begin(), results.end(),
            [](const DialogueResult& a, const DialogueResult& b) {
              return a.dialogue_id < b.dialogue_id;
            });
  return results;
}

// ---------------------------------------------------------------------------
// BLEU

namespace {

std::map<std::vector<std::string>, int> ngram_counts(const std::vector<std::string>& toks,
                                                     size_t n) {
  std::map<std::vector<std::string>, int> counts;
  if (toks.size() < n) return counts;
  for (size_t i = 0; i + n <= toks.size(); ++i)
    counts[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)]++;
  return counts;
}

}  // namespace

double bleu(const std::vector<std::string>& references,
            const std::vector<std::string>& hypotheses) {
  if (references.size() != hypotheses.size())
    throw ValidationError("bleu: " + std::to_string(references.size()) + " references vs " +
                          std::to_string(hypotheses.size()) + " hypotheses");
  constexpr double kEps = 1e-9;
  double ref_len = 0, hyp_len = 0;
  double log_prec_sum = 0;
  for (size_t n = 1; n <= 4; ++n) {
    long long matched = 0, total = 0;
    for (size_t i = 0; i < references.size(); ++i) {
      const auto ref_toks = corpus::tokenize_words(references[i]);
      const auto hyp_toks = corpus::tokenize_words(hypotheses[i]);
      if (n == 1) {
        ref_len += static_cast<double>(ref_toks.size());
        hyp_len += static_cast<double>(hyp_toks.size());
      }
      const auto ref_counts = ngram_counts(ref_toks, n);
      for (const auto& [gram, count] : ngram_counts(hyp_toks, n)) {
        total += count;
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matched += std::min(count, it->second);
      }
    }
    double p;
    if (total == 0) {
      p = kEps;
    } else if (matched == 0) {
      p = kEps / static_cast<double>(total);
    } else {
      p = static_cast<double>(matched) / static_cast<double>(total);
    }
    log_prec_sum += std::log(p);
  }
  if (hyp_len == 0) return 0.0;
  const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return 100.0 * bp * std::exp(log_prec_sum / 4.0);
}

// ---------------------------------------------------------------------------
// Inform / Success

std::pair<double, double> inform_success(std::vector<DialogueResult>& results,
                                         const Corpus& corpus) {
  size_t informed = 0, successful = 0, counted = 0;
  for (auto& dres : results) {
    const Dialogue* dlg = corpus.find_dialogue(dres.dialogue_id);
    if (!dlg) throw ValidationError("inform_success: unknown dialogue '" + dres.dialogue_id + "'");
    if (dlg->goal.empty()) {
      dres.excluded = true;
      dres.flags.push_back("missing_goal");
      continue;
    }
    counted++;
    if (dres.turns.empty()) continue;
    const BeliefState& final_belief = dres.turns.back().resolved_belief;

    // placeholders offered per goal domain, read off that domain's turns
    std::map<std::string, std::set<std::string>> offered;
    for (size_t ti = 0; ti < dres.turns.size() && ti < dlg->turns.size(); ++ti) {
      const std::string& dom = dlg->turns[ti].active_domain();
      for (const auto& tok : corpus::tokenize_words(dres.turns[ti].gen_response))
        if (tok.rfind("[value_", 0) == 0) offered[dom].insert(tok);
    }

    bool inform_ok = true;
    for (const auto& [dname, dgoal] : dlg->goal) {
      // constraint slot set must match the goal exactly
      std::set<std::string> want, got;
      for (const auto& [slot, value] : dgoal.constraints) want.insert(slot);
      const auto bit = final_belief.find(dname);
      if (bit != final_belief.end())
        for (const auto& [slot, value] : bit->second) got.insert(slot);
      if (want != got) {
        inform_ok = false;
        break;
      }
      // resolved constraints must still match at least one database row
      BeliefState domain_only;
      if (bit != final_belief.end()) domain_only[dname] = bit->second;
      if (corpus::db_match_count(domain_only, corpus.schema, dname) < 1) {
        inform_ok = false;
        break;
      }
      // an entity must have been offered in this domain's turns
      if (!offered[dname].count("[value_name]")) {
        inform_ok = false;
        break;
      }
    }

    bool success_ok = inform_ok;
    if (success_ok) {
      for (const auto& [dname, dgoal] : dlg->goal) {
        for (const auto& req : dgoal.requestables)
          if (!offered[dname].count("[value_" + req + "]")) {
            success_ok = false;
            break;
          }
        if (!success_ok) break;
      }
    }

    dres.informed = inform_ok;
    dres.successful = success_ok;
    informed += inform_ok;
    successful += success_ok;
  }
  if (counted == 0) return {0.0, 0.0};
  return {100.0 * static_cast<double>(informed) / static_cast<double>(counted),
          100.0 * static_cast<double>(successful) / static_cast<double>(counted)};
}

MetricsReport evaluate(GenerationBackend& backend, const Corpus& corpus, const std::string& split,
                       const EvalOptions& opts) {
  MetricsReport report;
  report.details = run_inference(backend, corpus, split, opts);

  std::vector<std::string> refs, hyps;
  for (const auto& dres : report.details) {
    const Dialogue* dlg = corpus.find_dialogue(dres.dialogue_id);
    for (size_t ti = 0; ti < dres.turns.size(); ++ti) {
      refs.push_back(dlg->turns[ti].response);
      hyps.push_back(dres.turns[ti].gen_response);
    }
  }
  report.bleu = bleu(refs, hyps);

  const auto [inf, suc] = inform_success(report.details, corpus);
  report.inform = inf;
  report.success = suc;
  report.combined = combined_score(inf, suc, report.bleu);
  report.n_dialogues = report.details.size();
  for (const auto& d : report.details) report.n_excluded += d.excluded;
  return report;
}

}  // namespace todsel::evaluation
