// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "todsel/evaluator.hpp"
#include "todsel/report.hpp"

using namespace todsel;
using namespace todsel::evaluation;
using corpus::Corpus;
using corpus::CorpusSpec;

namespace {

Corpus& eval_corpus() {
  static Corpus c = [] {
    CorpusSpec spec;
    spec.domains = {"restaurant", "hotel", "attraction"};
    spec.dialogues_total = 40;
    return corpus::generate_corpus(spec, 21);
  }();
  return c;
}

// Independent brute-force Inform/Success checker: enumerates placeholders per
// dialogue and scans database tables directly, sharing no code with
// inform_success beyond the data structures.
std::pair<bool, bool> brute_force_check(const corpus::Dialogue& dlg,
                                        const std::vector<TurnResult>& turns,
                                        const corpus::Schema& schema) {
  // per-domain placeholder inventory mentioned in that domain's turns
  std::map<std::string, std::set<std::string>> mentioned;
  for (size_t ti = 0; ti < turns.size(); ++ti) {
    const std::string& dom = dlg.turns[ti].system_action.front().domain;
    std::istringstream ss(turns[ti].gen_response);
    std::string tok;
    while (ss >> tok)
      if (tok.size() > 8 && tok.substr(0, 7) == "[value_" && tok.back() == ']')
        mentioned[dom].insert(tok);
  }
  const corpus::BeliefState& final_belief = turns.back().resolved_belief;

  bool informed = true;
  for (const auto& [dname, dgoal] : dlg.goal) {
    std::set<std::string> want;
    for (const auto& [s, v] : dgoal.constraints) want.insert(s);
    std::set<std::string> got;
    const auto bit = final_belief.find(dname);
    if (bit != final_belief.end())
      for (const auto& [s, v] : bit->second) got.insert(s);
    if (want != got) informed = false;
    // direct table scan
    int rows_matching = 0;
    for (const auto& row : schema.db.at(dname)) {
      bool ok = true;
      if (bit != final_belief.end())
        for (const auto& [s, v] : bit->second)
          if (!row.fields.count(s) || row.fields.at(s) != v) ok = false;
      rows_matching += ok;
    }
    if (rows_matching < 1) informed = false;
    if (!mentioned[dname].count("[value_name]")) informed = false;
  }
  bool successful = informed;
  for (const auto& [dname, dgoal] : dlg.goal)
    for (const auto& req : dgoal.requestables)
      if (!mentioned[dname].count("[value_" + req + "]")) successful = false;
  return {informed, successful && informed};
}

}  // namespace

TEST_CASE("combined_score: Table-style arithmetic and degenerate case") {
  CHECK(std::abs(combined_score(92.10, 83.30, 19.69) - 107.39) < 5e-3);
  CHECK(std::abs(combined_score(93.50, 84.70, 19.24) - 108.34) < 5e-3);
  CHECK(std::abs(combined_score(92.30, 84.00, 19.41) - 107.56) < 5e-3);
  CHECK(std::abs(combined_score(89.20, 80.50, 19.14) - 103.99) < 5e-3);
  CHECK(combined_score(0, 0, 0) == 0.0);
}

TEST_CASE("bleu: identity, disjoint, and hand-computed oracle") {
  const std::vector<std::string> refs = {"the golden palace is nice .",
                                         "what is the phone number ?"};
  CHECK(bleu(refs, refs) == doctest::Approx(100.0).epsilon(1e-9));

  CHECK(bleu({"aa bb cc dd"}, {"xx yy zz ww"}) < 0.01);

  // ref "the cat sat on the mat", hyp "the cat on the mat":
  // p1=5/5, p2=3/4, p3=1/3, p4=(1e-9)/2, BP=exp(1-6/5); frozen evaluation
  const double expect = 0.27375912675347263;
  CHECK(bleu({"the cat sat on the mat"}, {"the cat on the mat"}) ==
        doctest::Approx(expect).epsilon(1e-6));

  CHECK_THROWS_AS(bleu({"a"}, {"a", "b"}), ValidationError);
  CHECK(bleu({"some reference here"}, {""}) == 0.0);
}

TEST_CASE("bleu: invariant under consistent pair reordering") {
  const std::vector<std::string> refs = {"a b c d", "e f g h i", "j k", "l m n o p q"};
  const std::vector<std::string> hyps = {"a b d", "e f g h", "j", "l m n p q"};
  const double base = bleu(refs, hyps);
  const std::vector<size_t> perm = {2, 0, 3, 1};
  std::vector<std::string> refs2, hyps2;
  for (size_t i : perm) {
    refs2.push_back(refs[i]);
    hyps2.push_back(hyps[i]);
  }
  CHECK(bleu(refs2, hyps2) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("oracle backend scores perfect metrics on every split") {
  const Corpus& c = eval_corpus();
  OracleBackend oracle(c);
  for (const std::string split : {"train", "dev", "test"}) {
    const auto report = evaluate(oracle, c, split);
    CHECK(report.inform == doctest::Approx(100.0));
    CHECK(report.success == doctest::Approx(100.0));
    CHECK(report.bleu == doctest::Approx(100.0).epsilon(1e-9));
    CHECK(report.combined == doctest::Approx(200.0).epsilon(1e-6));
    CHECK(report.n_excluded == 0);
  }
}

TEST_CASE("empty responses score zero success and near-zero bleu") {
  // backend that answers with an empty action/response sequence
  struct EmptyBackend : GenerationBackend {
    const Corpus* c;
    explicit EmptyBackend(const Corpus& corpus) : c(&corpus) {}
    std::vector<int> generate_belief(const corpus::DialogueTurn& t,
                                     const std::vector<int>& ctx) override {
      OracleBackend oracle(*c);
      return oracle.generate_belief(t, ctx);
    }
    std::vector<int> generate_response(const corpus::DialogueTurn&,
                                       const std::vector<int>&) override {
      return {c->vocab.require("<eos_r>")};
    }
  } backend(eval_corpus());

  const auto report = evaluate(backend, eval_corpus(), "test");
  CHECK(report.success == 0.0);
  CHECK(report.inform == 0.0);  // no entity offered anywhere
  CHECK(report.bleu < 0.01);
}

TEST_CASE("success never exceeds inform and is per-dialogue consistent") {
  const Corpus& c = eval_corpus();
  OracleBackend oracle(c);
  auto report = evaluate(oracle, c, "train");
  CHECK(report.success <= report.inform);
  for (const auto& d : report.details) {
    if (d.successful) CHECK(d.informed);
  }
}

TEST_CASE("inform_success agrees exactly with the brute-force checker on corrupted fixtures") {
  const Corpus& c = eval_corpus();
  OracleBackend oracle(c);
  auto results = run_inference(oracle, c, "train");
  REQUIRE(results.size() >= 20);
  results.resize(20);

  // corrupt the generations in varied, seeded ways
  ts::Rng rng(99);
  for (auto& dres : results) {
    for (auto& tres : dres.turns) {
      const double roll = rng.uniform01();
      if (roll < 0.25) {
        // drop one placeholder occurrence from the response
        auto toks = corpus::tokenize_words(tres.gen_response);
        for (size_t i = 0; i < toks.size(); ++i)
          if (toks[i].rfind("[value_", 0) == 0) {
            toks.erase(toks.begin() + static_cast<ptrdiff_t>(i));
            break;
          }
        tres.gen_response = corpus::detokenize_words(toks);
      } else if (roll < 0.45) {
        // corrupt the belief: drop one domain's slot
        for (auto& [dname, slots] : tres.resolved_belief) {
          if (!slots.empty()) {
            slots.erase(slots.begin());
            break;
          }
        }
      } else if (roll < 0.6) {
        // corrupt a value so no database row matches
        for (auto& [dname, slots] : tres.resolved_belief) {
          if (!slots.empty()) {
            slots.begin()->second = "__corrupted__";
            break;
          }
        }
      } else if (roll < 0.7) {
        tres.gen_response = "";
      }
    }
  }

  auto copy = results;  // inform_success mutates the per-dialogue fields
  inform_success(copy, c);
  for (const auto& dres : copy) {
    const corpus::Dialogue* dlg = c.find_dialogue(dres.dialogue_id);
    const auto [want_informed, want_success] = brute_force_check(*dlg, dres.turns, c.schema);
    CHECK(dres.informed == want_informed);
    CHECK(dres.successful == want_success);
  }
}

TEST_CASE("metrics report json recomputes to the headline numbers") {
  const Corpus& c = eval_corpus();
  OracleBackend oracle(c);
  const auto report = evaluate(oracle, c, "dev");
  const auto j = report.to_json();

  size_t informed = 0, successful = 0, counted = 0;
  for (const auto& jd : j.at("details")) {
    if (jd.at("excluded").get<bool>()) continue;
    counted++;
    informed += jd.at("informed").get<bool>();
    successful += jd.at("successful").get<bool>();
  }
  REQUIRE(counted > 0);
  CHECK(100.0 * informed / counted == doctest::Approx(j.at("inform").get<double>()));
  CHECK(100.0 * successful / counted == doctest::Approx(j.at("success").get<double>()));
  CHECK(j.at("combined").get<double>() ==
        doctest::Approx(combined_score(j.at("inform").get<double>(),
                                       j.at("success").get<double>(),
                                       j.at("bleu").get<double>()))
            .epsilon(5e-3));
}

TEST_CASE("dialogues without goals are excluded and counted") {
  Corpus c = eval_corpus();
  // strip the goal from one test dialogue
  const std::string victim = c.splits.at("test").front();
  for (auto& d : c.dialogues)
    if (d.id == victim) {
      d.goal.clear();
      for (auto& t : d.turns) t.goal.clear();
    }
  OracleBackend oracle(c);
  const auto report = evaluate(oracle, c, "test");
  CHECK(report.n_excluded == 1);
  CHECK(report.inform == doctest::Approx(100.0));
}

TEST_CASE("comparison table mirrors the benchmark layout and recomputes scores") {
  std::vector<ReportRow> rows = {{"baseline_large", "none", 360900000, 92.30, 84.00, 19.41},
                                 {"baseline_small", "none", 102200000, 89.20, 80.50, 19.14},
                                 {"run_a", "after_encoder", 102200000, 92.10, 83.30, 19.69},
                                 {"run_b", "differentiable", 105500000, 93.50, 84.70, 19.24}};
  const std::string table = comparison_table(rows);
  CHECK(table.find("Model") != std::string::npos);
  CHECK(table.find("Inform") != std::string::npos);
  CHECK(table.find("Score") != std::string::npos);
  CHECK(table.find("107.56") != std::string::npos);
  CHECK(table.find("103.99") != std::string::npos);
  CHECK(table.find("107.39") != std::string::npos);
  CHECK(table.find("108.34") != std::string::npos);
}

TEST_CASE("curve svg renders polylines for requested keys") {
  std::vector<nlohmann::json> recs;
  for (int s = 0; s < 20; ++s)
    recs.push_back({{"step", s}, {"total", 3.0 / (1 + s)}, {"resp_nll", 2.0 / (1 + s)}});
  const std::string svg = curve_svg(recs, {"total", "resp_nll"});
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("polyline") != std::string::npos);
  CHECK(svg.find("resp_nll") != std::string::npos);
}
