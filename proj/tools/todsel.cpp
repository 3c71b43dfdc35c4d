// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point. Subcommands: generate-corpus, train, eval,
// gradcheck, report. Exit codes: 0 success, 1 usage/config error, 2 runtime
// failure.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "todsel/corpus.hpp"
#include "todsel/evaluator.hpp"
#include "todsel/gradcheck.hpp"
#include "todsel/model.hpp"
#include "todsel/report.hpp"
#include "todsel/run_manifest.hpp"
#include "todsel/trainer.hpp"

namespace fs = std::filesystem;
using namespace todsel;

namespace {

nlohmann::json load_json_config(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

corpus::Corpus load_corpus_checked(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "schema.json"))
    throw ConfigError("corpus directory not found or incomplete: " + dir);
  corpus::Corpus c = corpus::load_corpus(dir);
  const auto problems = corpus::validate_corpus(c);
  if (!problems.empty()) {
    std::string msg = "corpus failed validation (" + std::to_string(problems.size()) + " problems):";
    for (size_t i = 0; i < problems.size() && i < 5; ++i) msg += "\n  " + problems[i];
    throw ValidationError(msg);
  }
  return c;
}

model::ModelConfig model_config_from(const nlohmann::json& j, const corpus::Corpus& c) {
  nlohmann::json resolved = j.is_object() ? j : nlohmann::json::object();
  if (!resolved.contains("vocab_size") || resolved.at("vocab_size").get<size_t>() == 0)
    resolved["vocab_size"] = c.vocab.size();
  if (!resolved.contains("n_span_tags")) resolved["n_span_tags"] = c.schema.n_span_tags();
  auto cfg = model::ModelConfig::from_json(resolved);
  if (cfg.vocab_size != c.vocab.size())
    throw ConfigError("model.vocab_size " + std::to_string(cfg.vocab_size) +
                      " does not match corpus vocabulary of " + std::to_string(c.vocab.size()));
  return cfg;
}

// ---------------------------------------------------------------------------

int cmd_generate_corpus(const std::string& spec_path, const std::string& out,
                        uint64_t seed) {
  const auto spec = corpus::CorpusSpec::from_json(load_json_config(spec_path));
  const auto c = corpus::generate_corpus(spec, seed);
  const auto problems = corpus::validate_corpus(c);
  if (!problems.empty())
    throw ValidationError("generated corpus failed validation: " + problems.front());
  corpus::save_corpus(c, out);

  cli::RunManifest manifest;
  manifest.command = "generate-corpus";
  manifest.config_path = spec_path;
  manifest.seed = seed;
  manifest.corpus_hash = cli::corpus_dir_hash(out);
  manifest.out_dir = out;
  manifest.extra = {{"n_dialogues", c.dialogues.size()},
                    {"vocab_size", c.vocab.size()},
                    {"splits",
                     {{"train", c.splits.at("train").size()},
                      {"dev", c.splits.at("dev").size()},
                      {"test", c.splits.at("test").size()}}}};
  manifest.write();
  std::cout << "wrote corpus with " << c.dialogues.size() << " dialogues to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_override,
              const std::string& variant_override, int64_t seed_override,
              const std::string& resume) {
  const auto config = load_json_config(config_path);
  if (!config.contains("corpus_dir")) throw ConfigError("train config: missing field 'corpus_dir'");
  const std::string corpus_dir = config.at("corpus_dir").get<std::string>();
  const auto c = load_corpus_checked(corpus_dir);

  auto tcfg = training::TrainConfig::from_json(config.value("train", nlohmann::json::object()));
  if (!variant_override.empty()) tcfg.variant = objectives::variant_from_string(variant_override);
  if (seed_override >= 0) tcfg.seed = static_cast<uint64_t>(seed_override);
  const auto mcfg = model_config_from(config.value("model", nlohmann::json::object()), c);

  std::string out = out_override;
  if (out.empty()) out = config.value("out_dir", std::string());
  if (out.empty()) throw ConfigError("train: no output directory (--out or config out_dir)");
  fs::create_directories(out);

  std::map<std::string, ts::Array<float>> resume_weights;
  const std::map<std::string, ts::Array<float>>* init_weights = nullptr;
  if (!resume.empty()) {
    if (!fs::exists(fs::path(resume) / "manifest.json"))
      throw ConfigError("resume checkpoint not found: " + resume);
    resume_weights = ts::load_tensor_set(resume);
    init_weights = &resume_weights;
  }

  nlohmann::json resolved = {{"corpus_dir", corpus_dir},
                             {"model", mcfg.to_json()},
                             {"train", tcfg.to_json()},
                             {"out_dir", out}};
  write_text_file((fs::path(out) / "config_resolved.json").string(), resolved.dump(2) + "\n");

  std::ofstream log_stream((fs::path(out) / "train_log.jsonl").string());
  if (!log_stream) throw IoError("cannot write training log in " + out);
  const auto sink = [&](const nlohmann::json& rec) { log_stream << rec.dump() << "\n"; };

  auto result = training::train<float>(c, mcfg, tcfg, out, sink, init_weights);
  log_stream.flush();

  result.trained->save_checkpoint(out + "/checkpoint_last",
                                  {{"variant", objectives::variant_name(tcfg.variant)},
                                   {"seed", tcfg.seed}});

  cli::RunManifest manifest;
  manifest.command = "train";
  manifest.config_path = config_path;
  manifest.seed = tcfg.seed;
  manifest.corpus_hash = cli::corpus_dir_hash(corpus_dir);
  manifest.out_dir = out;
  manifest.extra = {{"variant", objectives::variant_name(tcfg.variant)},
                    {"steps", result.state.step},
                    {"best_dev_combined", result.state.best_dev_combined},
                    {"n_parameters", result.trained->n_parameters()},
                    {"aborted", result.aborted}};
  manifest.write();

  if (result.aborted) {
    std::cerr << "training aborted: " << result.abort_record.dump() << "\n";
    return 2;
  }
  std::cout << "trained " << result.state.step << " steps; best dev combined "
            << result.state.best_dev_combined << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus_dir,
             const std::string& split, const std::string& out, bool oracle_belief,
             const std::string& name) {
  if (!fs::exists(fs::path(checkpoint) / "manifest.json"))
    throw ConfigError("checkpoint not found: " + checkpoint);
  if (split != "train" && split != "dev" && split != "test")
    throw ConfigError("--split must be train, dev, or test");
  const auto c = load_corpus_checked(corpus_dir);

  nlohmann::json ckpt_manifest;
  const auto tensors = ts::load_tensor_set(checkpoint, &ckpt_manifest);
  model::Model<float> m(model::ModelConfig::from_json(ckpt_manifest.at("model_config")), 0);
  std::vector<std::string> missing;
  m.load_state_dict(tensors, &missing);
  for (const auto& t : missing) warn("checkpoint has no tensor '" + t + "', loaded as zeros");

  evaluation::EvalOptions opts;
  opts.oracle_belief = oracle_belief;
  const auto report = evaluation::evaluate_model(m, c, split, opts);

  fs::create_directories(out);
  const nlohmann::json full_report = report.to_json();
  nlohmann::json metrics = full_report;
  metrics.erase("details");
  metrics["model_name"] = name.empty() ? fs::path(checkpoint).parent_path().filename().string() : name;
  metrics["variant"] = ckpt_manifest.value("variant", "unknown");
  metrics["n_parameters"] = ckpt_manifest.value("n_parameters", 0);
  metrics["checkpoint"] = checkpoint;
  metrics["split"] = split;
  metrics["oracle_belief"] = oracle_belief;
  write_text_file((fs::path(out) / "metrics.json").string(), metrics.dump(2) + "\n");

  std::ofstream details((fs::path(out) / "details.jsonl").string());
  for (const auto& d : full_report.at("details")) details << d.dump() << "\n";
  details.flush();

  evaluation::ReportRow row{metrics["model_name"].get<std::string>(),
                            metrics["variant"].get<std::string>(),
                            metrics["n_parameters"].get<size_t>(),
                            report.inform,
                            report.success,
                            report.bleu};
  const std::string table = evaluation::comparison_table({row});
  write_text_file((fs::path(out) / "report.txt").string(), table);
  std::cout << table;

  cli::RunManifest manifest;
  manifest.command = "eval";
  manifest.config_path = checkpoint;
  manifest.seed = 0;
  manifest.corpus_hash = cli::corpus_dir_hash(corpus_dir);
  manifest.out_dir = out;
  manifest.extra = {{"split", split}, {"oracle_belief", oracle_belief}};
  manifest.write();
  return 0;
}

int cmd_gradcheck(const std::string& config_path, const std::string& out, bool argmax_control,
                  int precision) {
  if (precision != 64) {
    std::cerr << "gradcheck runs in 64-bit only; float32 finite differences are dominated by "
                 "rounding error (requested --precision "
              << precision << ")\n";
    return 1;
  }
  const auto config = load_json_config(config_path);

  corpus::Corpus c;
  std::string corpus_hash;
  if (config.contains("corpus_dir")) {
    c = load_corpus_checked(config.at("corpus_dir").get<std::string>());
    corpus_hash = cli::corpus_dir_hash(config.at("corpus_dir").get<std::string>());
  } else if (config.contains("corpus")) {
    c = corpus::generate_corpus(corpus::CorpusSpec::from_json(config.at("corpus")),
                                config.value("corpus_seed", 7));
  } else {
    throw ConfigError("gradcheck config: need 'corpus_dir' or an inline 'corpus' spec");
  }

  const auto mcfg = model_config_from(config.value("model", nlohmann::json::object()), c);
  const uint64_t seed = config.value("seed", 11);
  const double tau = config.value("tau", 1.0);
  ts::GradCheckOptions opts;
  opts.step = config.value("step", 1e-5);
  opts.tolerance = config.value("tolerance", 1e-4);
  opts.sample_entries = config.value("samples", 200);
  opts.sample_seed = seed + 1;
  const int n_turns = config.value("n_turns", 2);

  std::vector<const corpus::DialogueTurn*> turns;
  for (const corpus::Dialogue* d : c.split_dialogues("train")) {
    for (const auto& t : d->turns) {
      turns.push_back(&t);
      if (static_cast<int>(turns.size()) >= n_turns) break;
    }
    if (static_cast<int>(turns.size()) >= n_turns) break;
  }
  if (turns.empty()) throw ConfigError("gradcheck: train split has no turns");

  gumbel::GumbelConfig gcfg;
  gcfg.hard = false;  // soft relaxation: finite differences measure the same function
  objectives::LossWeights weights;

  nlohmann::json out_report = nlohmann::json::object();
  out_report["precision"] = 64;
  out_report["tau"] = tau;
  out_report["samples"] = opts.sample_entries;
  out_report["tolerance"] = opts.tolerance;
  bool all_ok = true;

  for (const auto variant : {objectives::Variant::after_encoder,
                             objectives::Variant::differentiable}) {
    model::Model<double> m(mcfg, seed);
    ts::Rng distractor_rng = ts::stream_rng(seed, ts::Stream::distractor);
    ts::Rng gumbel_rng = ts::stream_rng(seed, ts::Stream::gumbel);
    training::TurnRngs rngs{&distractor_rng, &gumbel_rng, nullptr};
    std::vector<training::SelectInputs<double>> inputs;
    for (const auto* t : turns)
      inputs.push_back(training::sample_select_inputs<double>(c, *t, variant, rngs, gcfg,
                                                              mcfg.vocab_size));
    const std::string vname = objectives::variant_name(variant);

    if (argmax_control && variant == objectives::Variant::differentiable) {
      // Negative control: plain argmax one-hot must carry zero gradient to
      // the response decoder; this is the expected failure mode.
      m.zero_grads();
      auto tl = training::turn_losses(m, c, *turns[0], variant, tau, inputs[0], gcfg,
                                      /*argmax_control=*/true, /*training=*/false);
      ts::backward(tl.select_bce);
      double decoder_norm = 0;
      for (const auto& p : m.params())
        if (p.group == "response_decoder" && p.var.has_grad())
          for (double g : p.var.grad().data) decoder_norm += g * g;
      decoder_norm = std::sqrt(decoder_norm);
      const bool confirmed = decoder_norm == 0.0;
      out_report[vname] = {{"negative_control", true},
                           {"decoder_select_grad_norm", decoder_norm},
                           {"expected_fail", true},
                           {"confirmed", confirmed}};
      all_ok = all_ok && confirmed;
      continue;
    }

    const auto loss_fn = [&]() {
      ts::Var<double> sum;
      for (size_t i = 0; i < turns.size(); ++i) {
        auto tl = training::turn_losses(m, c, *turns[i], variant, tau, inputs[i], gcfg,
                                        /*argmax_control=*/false, /*training=*/false);
        auto breakdown = objectives::total_loss(tl.belief_nll, tl.resp_nll, tl.span_ce,
                                                tl.select_bce, weights, variant);
        sum = sum.defined() ? ts::add(sum, breakdown.total) : breakdown.total;
      }
      return ts::scale(sum, 1.0 / static_cast<double>(turns.size()));
    };

    std::vector<ts::NamedParam> named;
    for (const auto& p : m.params()) named.push_back({p.name, p.var});
    const auto report = ts::grad_check(loss_fn, named, opts);
    const auto* worst = report.worst();
    out_report[vname] = {{"passed", report.passed},
                         {"max_rel_error", report.max_rel_error},
                         {"checked", report.checked},
                         {"non_checkable", report.non_checkable},
                         {"failure", report.failure},
                         {"worst_param", worst ? worst->param : ""},
                         {"worst_rel_error", worst ? worst->rel_error : 0.0}};
    all_ok = all_ok && report.passed;
  }

  fs::create_directories(out);
  out_report["all_passed"] = all_ok;
  write_text_file((fs::path(out) / "gradcheck_report.json").string(), out_report.dump(2) + "\n");
  std::cout << out_report.dump(2) << "\n";

  cli::RunManifest manifest;
  manifest.command = "gradcheck";
  manifest.config_path = config_path;
  manifest.seed = seed;
  manifest.corpus_hash = corpus_hash;
  manifest.out_dir = out;
  manifest.extra = {{"all_passed", all_ok}, {"argmax_control", argmax_control}};
  manifest.write();
  return all_ok ? 0 : 2;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out, bool plots) {
  std::vector<evaluation::ReportRow> rows;
  std::vector<std::pair<std::string, std::string>> plot_jobs;  // (name, log path)
  for (const auto& dir : run_dirs) {
    const auto metrics_path = fs::path(dir) / "metrics.json";
    if (fs::exists(metrics_path)) {
      const auto j = nlohmann::json::parse(read_text_file(metrics_path.string()));
      rows.push_back({j.value("model_name", fs::path(dir).filename().string()),
                      j.value("variant", "unknown"), j.value("n_parameters", size_t(0)),
                      j.at("inform").get<double>(), j.at("success").get<double>(),
                      j.at("bleu").get<double>()});
    }
    const auto log_path = fs::path(dir) / "train_log.jsonl";
    if (plots && fs::exists(log_path))
      plot_jobs.emplace_back(fs::path(dir).filename().string(), log_path.string());
  }
  if (rows.empty() && plot_jobs.empty())
    throw ConfigError("report: no metrics.json or train_log.jsonl found in the given run dirs");

  fs::create_directories(out);
  if (!rows.empty()) {
    const std::string table = evaluation::comparison_table(rows);
    write_text_file((fs::path(out) / "comparison.txt").string(), table);
    std::cout << table;
  }
  for (const auto& [name, log_path] : plot_jobs) {
    std::vector<nlohmann::json> records;
    std::istringstream in(read_text_file(log_path));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) records.push_back(nlohmann::json::parse(line));
    std::vector<std::string> keys = {"total", "resp_nll", "belief_nll"};
    write_text_file((fs::path(out) / (name + "_curves.svg")).string(),
                    evaluation::curve_svg(records, keys));
  }

  cli::RunManifest manifest;
  manifest.command = "report";
  manifest.config_path = "";
  manifest.seed = 0;
  manifest.out_dir = out;
  manifest.extra = {{"rows", rows.size()}, {"plots", plot_jobs.size()}};
  manifest.write();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"task-oriented dialogue system with response-selection auxiliary objectives"};
  app.require_subcommand(1);

  std::function<int()> run;

  // generate-corpus
  {
    auto* sub = app.add_subcommand("generate-corpus", "generate a synthetic corpus");
    auto spec = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto seed = std::make_shared<uint64_t>(7);
    sub->add_option("--spec", *spec, "corpus spec JSON file")->required();
    sub->add_option("--out", *out, "output directory")->required();
    sub->add_option("--seed", *seed, "generation seed");
    sub->callback([=, &run]() { run = [=]() { return cmd_generate_corpus(*spec, *out, *seed); }; });
  }
  // train
  {
    auto* sub = app.add_subcommand("train", "train a model");
    auto config = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto variant = std::make_shared<std::string>();
    auto seed = std::make_shared<int64_t>(-1);
    auto resume = std::make_shared<std::string>();
    sub->add_option("--config", *config, "train config JSON file")->required();
    sub->add_option("--out", *out, "output directory (overrides config out_dir)");
    sub->add_option("--variant", *variant, "none|after-encoder|differentiable");
    sub->add_option("--seed", *seed, "seed override");
    sub->add_option("--resume", *resume, "checkpoint directory to initialize weights from");
    sub->callback([=, &run]() {
      run = [=]() { return cmd_train(*config, *out, *variant, *seed, *resume); };
    });
  }
  // eval
  {
    auto* sub = app.add_subcommand("eval", "evaluate a checkpoint");
    auto ckpt = std::make_shared<std::string>();
    auto corpus_dir = std::make_shared<std::string>();
    auto split = std::make_shared<std::string>("test");
    auto out = std::make_shared<std::string>();
    auto oracle = std::make_shared<bool>(false);
    auto name = std::make_shared<std::string>();
    sub->add_option("--checkpoint", *ckpt, "checkpoint directory")->required();
    sub->add_option("--corpus", *corpus_dir, "corpus directory")->required();
    sub->add_option("--split", *split, "train|dev|test");
    sub->add_option("--out", *out, "output directory")->required();
    sub->add_flag("--oracle-belief", *oracle, "use gold beliefs (diagnostic)");
    sub->add_option("--name", *name, "row name for reports");
    sub->callback([=, &run]() {
      run = [=]() { return cmd_eval(*ckpt, *corpus_dir, *split, *out, *oracle, *name); };
    });
  }
  // gradcheck
  {
    auto* sub = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    auto config = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto control = std::make_shared<bool>(false);
    auto precision = std::make_shared<int>(64);
    sub->add_option("--config", *config, "gradcheck config JSON file")->required();
    sub->add_option("--out", *out, "output directory")->required();
    sub->add_flag("--argmax-control", *control,
                  "negative control: plain argmax in place of straight-through");
    sub->add_option("--precision", *precision, "floating point width (64 only)");
    sub->callback([=, &run]() {
      run = [=]() { return cmd_gradcheck(*config, *out, *control, *precision); };
    });
  }
  // report
  {
    auto* sub = app.add_subcommand("report", "comparison table and plots across runs");
    auto dirs = std::make_shared<std::vector<std::string>>();
    auto out = std::make_shared<std::string>();
    auto plots = std::make_shared<bool>(false);
    sub->add_option("runs", *dirs, "run directories")->required();
    sub->add_option("--out", *out, "output directory")->required();
    sub->add_flag("--plots", *plots, "emit SVG curves from training logs");
    sub->callback([=, &run]() { run = [=]() { return cmd_report(*dirs, *out, *plots); }; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    return run();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
