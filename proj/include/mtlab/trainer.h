#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtlab/data.h"
#include "mtlab/model.h"

namespace mtlab {

struct TrainConfig {
  double learning_rate = 3e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::optional<double> grad_clip_norm = 1.0;
  std::size_t batch_size = 16;
  std::size_t max_steps = 1000;
  std::size_t warmup_steps = 100;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t log_every = 10;

  std::vector<std::string> problems() const;
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Linear warmup from 0 over warmup_steps, then constant.
double learning_rate_at(const TrainConfig& tc, std::size_t step);

// First and second moments, one buffer per parameter in model order.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState zeros_like(const std::vector<NamedTensor>& params);
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

// One bias-corrected Adam update on a flat buffer (step counts from 1).
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 const TrainConfig& tc, std::size_t step);
// Applies adam_update to every parameter using its accumulated grad; a
// parameter without a grad is treated as having a zero gradient.
void adam_step(const std::vector<NamedTensor>& params, AdamState& state, const TrainConfig& tc, std::size_t step);

double global_grad_norm(const std::vector<NamedTensor>& params);
// Rescales all grads so the global norm is at most max_norm. Returns the norm
// before clipping.
double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm);

struct LossEntry {
  std::size_t step = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> seconds;  // wall clock since the run started, when recorded
};

class LossLog {
 public:
  // Throws unless entry.step exceeds the previous step.
  void append(const LossEntry& entry);
  const std::vector<LossEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

  // `step,train_loss,val_loss,seconds`; blank cells for absent values.
  std::string to_csv() const;
  static LossLog parse_csv(std::string_view text);
  void write_csv(const std::filesystem::path& path) const;

 private:
  std::vector<LossEntry> entries_;
};

// Everything needed to continue training bit-for-bit: the batch for step s
// and the dropout stream are both derived from (seed, s), so no RNG state is
// stored.
struct TrainingState {
  TranslationModel model;
  TrainConfig config;
  AdamState adam;
  std::size_t step = 0;

  static TrainingState fresh(const ModelConfig& mc, const TrainConfig& tc);
};

nlohmann::json checkpoint_header(const TrainingState& state);
void save_checkpoint(const TrainingState& state, const std::filesystem::path& path);
TrainingState load_checkpoint(const std::filesystem::path& path);

struct TrainOptions {
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints written
  TokenId pad_id = kPadId;
  // Fills the seconds column; leave off for byte-reproducible logs.
  bool record_wall_clock = false;
  std::function<void(const LossEntry&)> on_log;
};

struct TrainResult {
  LossLog log;
  std::vector<std::filesystem::path> checkpoints;
};

// Runs steps state.step+1 .. config.max_steps. Logs every log_every steps and
// at the last step; val loss is added when `eval` is non-empty. Writes
// step-NNNNNN.ckpt every checkpoint_every steps and final.ckpt at the end.
// Throws on a non-finite loss, naming the step and batch.
TrainResult train(TrainingState& state, std::span<const TrainingExample> data,
                  std::span<const TrainingExample> eval = {}, const TrainOptions& options = {});

// Batch used at a given step (1-based): epochs reshuffle with a seed derived
// from (seed, epoch).
Batch batch_for_step(std::span<const TrainingExample> data, const TrainConfig& tc, std::size_t step, TokenId pad_id);

// Target-token-weighted mean loss over a dataset, no dropout, no graph.
double evaluate_loss(const TranslationModel& model, std::span<const TrainingExample> data, std::size_t batch_size,
                     TokenId pad_id = kPadId);

}  // namespace mtlab
