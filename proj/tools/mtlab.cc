// mtlab: command-line front end for the experiment harness.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "mtlab/checkpoint.h"
#include "mtlab/evaluate.h"
#include "mtlab/experiment.h"
#include "mtlab/icl.h"
#include "mtlab/report.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
  auto* opt = cmd->add_option("--config", c.config, "experiment config (JSON)");
  if (config_required) opt->required();
  cmd->add_option("--seed", c.seed, "override the config seed");
  cmd->add_option("--out", c.out, "override output_dir");
}

mtlab::ExperimentConfig load_config(const Common& c) {
  auto config = mtlab::validate_config(c.config);
  if (!c.seed && c.out.empty()) return config;
  json r = config.resolved;
  if (c.seed) r["seed"] = *c.seed;
  if (!c.out.empty()) r["output_dir"] = fs::absolute(c.out).lexically_normal().string();
  return mtlab::parse_config(r, fs::current_path());
}

int finish(const mtlab::RunRecord& record) {
  if (record.status == "completed") {
    std::cout << "completed " << record.name << "\n";
    return 0;
  }
  std::cerr << record.name << ": failed at stage " << record.failed_stage.value_or("?") << ": "
            << record.error.value_or("") << "\n";
  return 1;
}

std::vector<std::size_t> parse_edges(const std::string& text) {
  std::vector<std::size_t> edges;
  std::size_t start = 0;
  while (start < text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string part = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!part.empty()) edges.push_back(std::stoul(part));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return edges;
}

// Model, tokenizer and generation defaults from a run directory or explicit
// files.
struct Loaded {
  mtlab::TranslationModel model;
  mtlab::SubwordTokenizer tokenizer;
  mtlab::GenerationConfig generation;
};

Loaded load_model(const std::string& run, const std::string& checkpoint, const std::string& tokenizer) {
  fs::path ckpt = checkpoint, tok = tokenizer;
  mtlab::GenerationConfig gc;
  if (!run.empty()) {
    const mtlab::RunPaths paths{run};
    if (ckpt.empty()) ckpt = paths.final_checkpoint();
    if (tok.empty()) tok = paths.tokenizer();
    const json g = json::parse(mtlab::read_file(paths.config())).at("generation");
    gc.max_new_tokens = g.at("max_new_tokens");
    gc.beam_width = g.at("beam_width");
    gc.length_penalty = g.at("length_penalty");
  }
  if (ckpt.empty() || tok.empty()) throw mtlab::Error("give --run DIR, or both --checkpoint and --tokenizer");
  return {mtlab::load_checkpoint(ckpt).model, mtlab::SubwordTokenizer::load(tok), gc};
}

struct GenFlags {
  std::optional<std::size_t> beam, max_new;
  std::optional<double> alpha;

  void add(CLI::App* cmd) {
    cmd->add_option("--beam", beam, "beam width (1 = greedy)");
    cmd->add_option("--alpha", alpha, "length penalty exponent");
    cmd->add_option("--max-new", max_new, "maximum generated tokens");
  }
  void apply(mtlab::GenerationConfig& gc) const {
    if (beam) gc.beam_width = *beam;
    if (alpha) gc.length_penalty = *alpha;
    if (max_new) gc.max_new_tokens = *max_new;
    gc.validate();
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mtlab: train and compare small translation models"};
  app.require_subcommand(1);
  bool quiet = false, verbose = false;
  app.add_flag("-q,--quiet", quiet, "warnings and errors only");
  app.add_flag("-v,--verbose", verbose, "debug logging");
  app.set_version_flag("--version", std::string(mtlab::kSoftwareVersion));

  Common validate_c;
  auto* validate = app.add_subcommand("validate", "check a config and print it with defaults filled in");
  add_common(validate, validate_c);

  Common tok_c;
  auto* tok_cmd = app.add_subcommand("tokenizer-train", "train the shared tokenizer of a run");
  add_common(tok_cmd, tok_c);

  Common train_c;
  bool resume = false;
  auto* train_cmd = app.add_subcommand("train", "build the dataset and train (tokenizer first if missing)");
  add_common(train_cmd, train_c);
  train_cmd->add_flag("--resume", resume, "continue from the newest checkpoint");

  Common eval_c;
  auto* eval_cmd = app.add_subcommand("evaluate", "translate the test split and score it");
  add_common(eval_cmd, eval_c);

  Common run_c;
  std::optional<std::size_t> jobs;
  bool run_resume = false;
  auto* run_cmd = app.add_subcommand("run", "full experiment: tokenizer, dataset, train, evaluate (or a matrix)");
  add_common(run_cmd, run_c);
  run_cmd->add_option("--jobs", jobs, "concurrent runs for matrix configs")->check(CLI::PositiveNumber);
  run_cmd->add_flag("--resume", run_resume, "continue training from the newest checkpoint");

  std::string tr_run, tr_ckpt, tr_tok, tr_tag;
  std::optional<std::string> tr_text;
  GenFlags tr_gen;
  auto* translate = app.add_subcommand("translate", "translate text with a trained model");
  translate->add_option("--run", tr_run, "run directory");
  translate->add_option("--checkpoint", tr_ckpt, "checkpoint file");
  translate->add_option("--tokenizer", tr_tok, "tokenizer file");
  translate->add_option("--tag", tr_tag, "target language code")->required();
  translate->add_option("--text", tr_text, "text to translate (default: one sentence per stdin line)");
  tr_gen.add(translate);

  std::string icl_run, icl_ckpt, icl_tok, icl_pool, icl_test, icl_src, icl_tgt, icl_out, icl_strategy = "first_k";
  std::string icl_pattern = mtlab::PromptTemplate{}.pattern, icl_edges;
  std::size_t icl_shots = 3, icl_limit = 0;
  std::uint64_t icl_seed = 0;
  bool icl_smooth = false;
  GenFlags icl_gen;
  auto* icl = app.add_subcommand("icl-eval", "few-shot prompting evaluation of a decoder-only model");
  icl->add_option("--run", icl_run, "run directory");
  icl->add_option("--checkpoint", icl_ckpt, "checkpoint file");
  icl->add_option("--tokenizer", icl_tok, "tokenizer file");
  icl->add_option("--pool", icl_pool, "exemplar pool, src<TAB>tgt per line")->required();
  icl->add_option("--test", icl_test, "test pairs, src<TAB>tgt per line")->required();
  icl->add_option("--src-lang", icl_src, "source language code")->required();
  icl->add_option("--tgt-lang", icl_tgt, "target language code")->required();
  icl->add_option("--shots", icl_shots, "exemplars per prompt");
  icl->add_option("--strategy", icl_strategy, "first_k | random");
  icl->add_option("--seed", icl_seed, "seed for random selection");
  icl->add_option("--pattern", icl_pattern, "prompt pattern with {src} and {tgt}");
  icl->add_option("--limit", icl_limit, "evaluate only the first N test pairs (0 = all)");
  icl->add_option("--buckets", icl_edges, "source-length bucket edges, e.g. 10,20,40");
  icl->add_flag("--smooth", icl_smooth, "add-one smoothing for BLEU");
  icl->add_option("--out", icl_out, "directory for icl_metrics.json and icl_audit.jsonl")->required();
  icl_gen.add(icl);

  std::string sc_hyp, sc_ref, sc_src, sc_edges, sc_out;
  bool sc_smooth = false;
  auto* score = app.add_subcommand("score", "score a hypothesis file against references");
  score->add_option("--hyp", sc_hyp, "hypotheses, one segment per line")->required();
  score->add_option("--ref", sc_ref, "references, one segment per line")->required();
  score->add_option("--src", sc_src, "sources; bucket by their whitespace token count (default: reference length)");
  score->add_option("--buckets", sc_edges, "length bucket edges, e.g. 10,20,40");
  score->add_flag("--smooth", sc_smooth, "add-one smoothing for BLEU");
  score->add_option("--out", sc_out, "write the JSON report here instead of stdout");

  std::vector<std::string> rp_dirs;
  std::string rp_csv, rp_text;
  mtlab::ReportOptions rp_opts;
  auto* report = app.add_subcommand("report", "comparison table over run or matrix directories");
  report->add_option("dirs", rp_dirs, "run, matrix or parent directories")->required();
  report->add_option("--csv", rp_csv, "write CSV here");
  report->add_option("--text", rp_text, "write the text table here (default: stdout)");
  report->add_flag("--buckets", rp_opts.bucket_columns, "per-bucket score columns");
  report->add_flag("--aggregate-seeds", rp_opts.aggregate_seeds, "mean [min, max] over seeds");
  report->add_flag("--verify", rp_opts.verify, "recompute scores from stored hypotheses");

  CLI11_PARSE(app, argc, argv);

  auto logger = spdlog::stderr_color_mt("mtlab");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  spdlog::set_level(quiet ? spdlog::level::warn : verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*validate) {
      std::cout << load_config(validate_c).resolved.dump(2) << "\n";
      return 0;
    }
    if (*tok_cmd) {
      return finish(mtlab::run_experiment(load_config(tok_c), {{mtlab::Stage::kTokenizer}}));
    }
    if (*train_cmd) {
      const auto config = load_config(train_c);
      mtlab::RunOptions opts{{mtlab::Stage::kDataset, mtlab::Stage::kTrain}, resume};
      if (!fs::exists(mtlab::RunPaths{config.output_dir / config.name}.tokenizer())) {
        opts.stages.insert(opts.stages.begin(), mtlab::Stage::kTokenizer);
      }
      return finish(mtlab::run_experiment(config, opts));
    }
    if (*eval_cmd) {
      return finish(mtlab::run_experiment(load_config(eval_c), {{mtlab::Stage::kEvaluate}}));
    }
    if (*run_cmd) {
      const auto config = load_config(run_c);
      if (config.matrix) {
        const auto result = mtlab::run_matrix(config, fs::read_symlink("/proc/self/exe"),
                                              jobs.value_or(config.matrix->jobs));
        std::cout << mtlab::read_file(result.root / "report.txt");
        if (!result.all_completed) std::cerr << "some matrix runs failed; see " << result.root.string() << "\n";
        return result.all_completed ? 0 : 1;
      }
      mtlab::RunOptions opts;
      opts.resume = run_resume;
      return finish(mtlab::run_experiment(config, opts));
    }
    if (*translate) {
      auto loaded = load_model(tr_run, tr_ckpt, tr_tok);
      tr_gen.apply(loaded.generation);
      loaded.tokenizer.tag_id(tr_tag);
      auto one = [&](const std::string& text) {
        std::cout << mtlab::translate_text(loaded.model, loaded.tokenizer, text, tr_tag, loaded.generation) << "\n";
      };
      if (tr_text) {
        one(*tr_text);
      } else {
        for (std::string line; std::getline(std::cin, line);) one(line);
      }
      return 0;
    }
    if (*icl) {
      auto loaded = load_model(icl_run, icl_ckpt, icl_tok);
      icl_gen.apply(loaded.generation);
      const auto pool = mtlab::load_corpus(icl_pool, icl_src, icl_tgt);
      auto test = mtlab::load_corpus(icl_test, icl_src, icl_tgt);
      if (icl_limit > 0 && test.size() > icl_limit) test.resize(icl_limit);
      mtlab::PromptTemplate t;
      t.pattern = icl_pattern;
      t.src_lang = icl_src;
      t.tgt_lang = icl_tgt;
      mtlab::IclOptions opts;
      opts.shots = icl_shots;
      opts.strategy = mtlab::parse_selection(icl_strategy);
      opts.seed = icl_seed;
      opts.bucket_edges = parse_edges(icl_edges);
      opts.metrics.bleu_smoothing = icl_smooth;
      const auto result =
          mtlab::icl_evaluate(loaded.model, pool, test, t, loaded.tokenizer, loaded.generation, opts);
      fs::create_directories(icl_out);
      json metrics = mtlab::to_json_value(result.report);
      metrics["shots"] = icl_shots;
      metrics["strategy"] = icl_strategy;
      metrics["shortened_prompts"] = result.shortened_prompts;
      mtlab::write_file(fs::path(icl_out) / "icl_metrics.json", metrics.dump(2) + "\n");
      mtlab::write_icl_audit(fs::path(icl_out) / "icl_audit.jsonl", result.records);
      std::cout << metrics.dump(2) << "\n";
      return 0;
    }
    if (*score) {
      const auto hyps = mtlab::read_lines(sc_hyp), refs = mtlab::read_lines(sc_ref);
      if (hyps.size() != refs.size()) {
        throw mtlab::Error(fmt::format("{} has {} lines but {} has {}", sc_hyp, hyps.size(), sc_ref, refs.size()));
      }
      const auto length_source = sc_src.empty() ? refs : mtlab::read_lines(sc_src);
      if (length_source.size() != refs.size()) throw mtlab::Error("--src line count differs from --ref");
      std::vector<std::size_t> lengths;
      for (const auto& s : length_source) lengths.push_back(mtlab::metric_tokens(s).size());
      mtlab::MetricOptions mo;
      mo.bleu_smoothing = sc_smooth;
      const auto edges = parse_edges(sc_edges);
      const auto rep = mtlab::build_report("", "", hyps, refs, lengths, edges, mo);
      json out = mtlab::to_json_value(rep.overall);
      json buckets = json::array();
      for (const auto& b : mtlab::to_json_value(rep)["buckets"]) buckets.push_back(b);
      out["buckets"] = buckets;
      if (sc_out.empty()) {
        std::cout << out.dump(2) << "\n";
      } else {
        mtlab::write_file(sc_out, out.dump(2) + "\n");
      }
      return 0;
    }
    if (*report) {
      std::vector<fs::path> dirs(rp_dirs.begin(), rp_dirs.end());
      const auto table = mtlab::build_report_table(dirs, rp_opts);
      if (!rp_csv.empty()) mtlab::write_file(rp_csv, mtlab::to_csv(table));
      if (!rp_text.empty()) {
        mtlab::write_file(rp_text, mtlab::to_text(table));
      } else {
        std::cout << mtlab::to_text(table);
      }
      const std::size_t status = std::find(table.columns.begin(), table.columns.end(), "status") -
                                 table.columns.begin();
      for (const auto& row : table.rows) {
        if (row[status].starts_with("corrupt") || row[status].starts_with("mismatch")) return 1;
      }
      return 0;
    }
  } catch (const mtlab::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
