#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtlab/data.h"
#include "mtlab/generation.h"
#include "mtlab/metrics.h"
#include "mtlab/model.h"
#include "mtlab/trainer.h"

namespace mtlab {

struct CorpusSpec {
  std::string src_lang;
  std::string tgt_lang;
  std::filesystem::path path;
  bool bidirectional = true;  // also serve tgt -> src
};

struct DataOptions {
  std::size_t min_chars = 40;
  std::size_t max_chars = 200;
  std::size_t test_size = 100;  // per corpus file, after filtering
  std::size_t val_size = 50;
  std::size_t max_pairs = 0;  // per corpus file after filtering; 0 keeps all
  bool skip_bad = false;
};

struct MatrixCell {
  Architecture architecture = Architecture::kDecoderOnly;
  Regime regime = Regime::kOneToOne;

  std::string name() const;  // "decoder_only-one_to_many"
  friend bool operator==(const MatrixCell&, const MatrixCell&) = default;
};

struct MatrixConfig {
  std::vector<Architecture> architectures;
  std::vector<Regime> regimes;
  // Subset of architectures x regimes to run; empty means all of them.
  std::vector<MatrixCell> cells;
  std::map<Regime, std::pair<std::vector<std::string>, std::vector<std::string>>> languages;
  std::size_t jobs = 1;

  std::vector<MatrixCell> enabled_cells() const;
};

struct ExperimentConfig {
  std::string name;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  std::vector<CorpusSpec> corpora;
  std::size_t vocab_size = 2000;
  std::vector<std::string> extra_alphabet;
  DataOptions data;
  DirectionConfig directions;
  ModelConfig model;  // vocab_size and seed are filled in by the harness
  TrainConfig train;  // seed likewise
  GenerationConfig generation;
  MetricOptions metrics;
  std::vector<std::size_t> bucket_edges;
  std::optional<MatrixConfig> matrix;

  // Every default filled in, corpus paths absolute.
  nlohmann::json resolved;
};

// Parses and checks a config document. `base_dir` anchors relative paths.
// Collects every problem before throwing ConfigError.
ExperimentConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir);
ExperimentConfig validate_config(const std::filesystem::path& path);

class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

// Closest candidate by edit distance, if it is close enough to be a typo.
std::optional<std::string> nearest_key(std::string_view key, const std::vector<std::string>& candidates);

// Corpora after loading, filtering and splitting. Splits are made per corpus
// file with a seeded shuffle, before any direction reversal, so a sentence
// never crosses splits.
struct Splits {
  CorpusMap train;
  CorpusMap val;
  CorpusMap test;
  std::vector<std::string> languages;  // sorted
};

Splits load_splits(const ExperimentConfig& config);

enum class Stage { kTokenizer, kDataset, kTrain, kEvaluate };
std::string_view to_string(Stage stage);

// Layout of one run directory.
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.resolved.json"; }
  std::filesystem::path tokenizer() const { return root / "tokenizer.bpe"; }
  std::filesystem::path dataset_stats() const { return root / "dataset.json"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path final_checkpoint() const { return checkpoints() / "final.ckpt"; }
  std::filesystem::path loss_log() const { return root / "loss_log.csv"; }
  std::filesystem::path hypotheses() const { return root / "hypotheses"; }
  std::filesystem::path metrics() const { return root / "metrics.json"; }
  std::filesystem::path record() const { return root / "run_record.json"; }
  std::filesystem::path timing() const { return root / "timing.csv"; }
};

struct RunOptions {
  std::vector<Stage> stages{Stage::kTokenizer, Stage::kDataset, Stage::kTrain, Stage::kEvaluate};
  // Continue training from the newest checkpoint in the run directory.
  bool resume = false;
};

struct RunRecord {
  std::string name;
  std::string status;  // "completed" | "failed"
  std::optional<std::string> failed_stage;
  std::optional<std::string> error;
  std::string architecture;
  std::string regime;
  std::uint64_t seed = 0;
  nlohmann::json json;  // the record as written
};

// The run directory is output_dir / name. Stage failures are caught and
// recorded; the returned record says which stage failed.
RunRecord run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

// Single-run view of a config: applies the matrix cell (architecture, regime,
// languages, per-architecture model overrides) and the child name.
ExperimentConfig cell_config(const ExperimentConfig& config, const MatrixCell& cell);

struct MatrixResult {
  std::filesystem::path root;
  bool all_completed = false;
  nlohmann::json record;
};

// Runs every enabled cell as a separate process (`executable run --config
// <child config> --out <root>`), at most `jobs` at a time, then writes
// matrix_record.json and the comparison report into output_dir / name.
MatrixResult run_matrix(const ExperimentConfig& config, const std::filesystem::path& executable,
                        std::size_t jobs);

}  // namespace mtlab
