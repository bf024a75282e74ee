#include "mtlab/trainer.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "mtlab/checkpoint.h"

namespace mtlab {

std::vector<std::string> TrainConfig::problems() const {
  std::vector<std::string> out;
  if (!(learning_rate > 0.0)) out.push_back(fmt::format("learning_rate must be > 0 (got {})", learning_rate));
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) out.push_back(fmt::format("adam_beta1 must lie in [0, 1) (got {})", adam_beta1));
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) out.push_back(fmt::format("adam_beta2 must lie in [0, 1) (got {})", adam_beta2));
  if (!(adam_eps > 0.0)) out.push_back(fmt::format("adam_eps must be > 0 (got {})", adam_eps));
  if (grad_clip_norm && !(*grad_clip_norm > 0.0)) {
    out.push_back(fmt::format("grad_clip_norm must be > 0 when set (got {})", *grad_clip_norm));
  }
  if (batch_size == 0) out.emplace_back("batch_size must be >= 1");
  if (max_steps == 0) out.emplace_back("max_steps must be >= 1");
  if (log_every == 0) out.emplace_back("log_every must be >= 1");
  return out;
}

void TrainConfig::validate() const {
  const auto p = problems();
  if (!p.empty()) throw Error(fmt::format("invalid train config: {}", fmt::join(p, "; ")));
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"grad_clip_norm", c.grad_clip_norm ? nlohmann::json(*c.grad_clip_norm) : nlohmann::json()},
                     {"batch_size", c.batch_size},
                     {"max_steps", c.max_steps},
                     {"warmup_steps", c.warmup_steps},
                     {"seed", c.seed},
                     {"checkpoint_every", c.checkpoint_every},
                     {"log_every", c.log_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("adam_beta1").get_to(c.adam_beta1);
  j.at("adam_beta2").get_to(c.adam_beta2);
  j.at("adam_eps").get_to(c.adam_eps);
  const auto& clip = j.at("grad_clip_norm");
  c.grad_clip_norm = clip.is_null() ? std::nullopt : std::optional<double>(clip.get<double>());
  j.at("batch_size").get_to(c.batch_size);
  j.at("max_steps").get_to(c.max_steps);
  j.at("warmup_steps").get_to(c.warmup_steps);
  j.at("seed").get_to(c.seed);
  j.at("checkpoint_every").get_to(c.checkpoint_every);
  j.at("log_every").get_to(c.log_every);
}

double learning_rate_at(const TrainConfig& tc, std::size_t step) {
  if (tc.warmup_steps == 0 || step >= tc.warmup_steps) return tc.learning_rate;
  return tc.learning_rate * static_cast<double>(step) / static_cast<double>(tc.warmup_steps);
}

AdamState AdamState::zeros_like(const std::vector<NamedTensor>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.numel(), 0.0);
    s.v.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 const TrainConfig& tc, std::size_t step) {
  if (step == 0) throw Error("adam_update: step counts from 1");
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw Error("adam_update: buffer sizes disagree");
  }
  const double b1 = tc.adam_beta1, b2 = tc.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
  const double lr = learning_rate_at(tc, step);
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
    param[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + tc.adam_eps);
  }
}

void adam_step(const std::vector<NamedTensor>& params, AdamState& state, const TrainConfig& tc, std::size_t step) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error("adam_step: optimizer state does not match parameter list");
  }
  std::vector<double> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    std::span<const double> g;
    if (t.has_grad()) {
      g = t.grad();
    } else {
      zeros.assign(t.numel(), 0.0);
      g = zeros;
    }
    adam_update(t.mutable_data(), g, state.m[i], state.v[i], tc, step);
  }
}

double global_grad_norm(const std::vector<NamedTensor>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      Tensor t = p.tensor;
      if (!t.has_grad()) continue;
      for (double& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

void LossLog::append(const LossEntry& entry) {
  if (!entries_.empty() && entry.step <= entries_.back().step) {
    throw Error(fmt::format("loss log steps must increase ({} after {})", entry.step, entries_.back().step));
  }
  entries_.push_back(entry);
}

std::string LossLog::to_csv() const {
  std::string out = "step,train_loss,val_loss,seconds\n";
  for (const auto& e : entries_) {
    out += fmt::format("{},{:.17g},{},{}\n", e.step, e.train_loss,
                       e.val_loss ? fmt::format("{:.17g}", *e.val_loss) : std::string(),
                       e.seconds ? fmt::format("{:.3f}", *e.seconds) : std::string());
  }
  return out;
}

LossLog LossLog::parse_csv(std::string_view text) {
  LossLog log;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 4) throw Error(fmt::format("loss log line {}: expected 4 fields", line_no));
    LossEntry e;
    e.step = std::stoull(f[0]);
    e.train_loss = std::stod(f[1]);
    if (!f[2].empty()) e.val_loss = std::stod(f[2]);
    if (!f[3].empty()) e.seconds = std::stod(f[3]);
    log.append(e);
  }
  return log;
}

void LossLog::write_csv(const std::filesystem::path& path) const { write_file(path, to_csv()); }

TrainingState TrainingState::fresh(const ModelConfig& mc, const TrainConfig& tc) {
  tc.validate();
  TranslationModel model(mc);
  AdamState adam = AdamState::zeros_like(model.parameters());
  return TrainingState{std::move(model), tc, std::move(adam), 0};
}

nlohmann::json checkpoint_header(const TrainingState& state) {
  return {{"format", "mtlab-train"},
          {"config", state.model.config()},
          {"train_config", state.config},
          {"step", state.step}};
}

void save_checkpoint(const TrainingState& state, const std::filesystem::path& path) {
  CheckpointFile file;
  file.header = checkpoint_header(state);
  const auto& params = state.model.parameters();
  for (const auto& p : params) {
    file.blocks.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    file.blocks.push_back({"adam.m/" + params[i].name, params[i].tensor.shape(), state.adam.m[i]});
    file.blocks.push_back({"adam.v/" + params[i].name, params[i].tensor.shape(), state.adam.v[i]});
  }
  write_checkpoint(file, path);
}

TrainingState load_checkpoint(const std::filesystem::path& path) {
  const CheckpointFile file = read_checkpoint(path);
  if (file.header.value("format", "") != "mtlab-train") {
    throw Error(fmt::format("{} is not a training checkpoint", path.string()));
  }
  TranslationModel model = model_from_checkpoint(file);
  AdamState adam;
  for (const auto& p : model.parameters()) {
    adam.m.push_back(file.block("adam.m/" + p.name).data);
    adam.v.push_back(file.block("adam.v/" + p.name).data);
    if (adam.m.back().size() != p.tensor.numel() || adam.v.back().size() != p.tensor.numel()) {
      throw Error(fmt::format("{}: optimizer state for '{}' has the wrong size", path.string(), p.name));
    }
  }
  TrainConfig tc = file.header.at("train_config").get<TrainConfig>();
  const auto step = file.header.at("step").get<std::size_t>();
  return TrainingState{std::move(model), tc, std::move(adam), step};
}

Batch batch_for_step(std::span<const TrainingExample> data, const TrainConfig& tc, std::size_t step, TokenId pad_id) {
  if (data.empty()) throw Error("training data is empty");
  if (step == 0) throw Error("batch_for_step: steps count from 1");
  const std::size_t per_epoch = (data.size() + tc.batch_size - 1) / tc.batch_size;
  const std::size_t epoch = (step - 1) / per_epoch;
  const std::size_t index = (step - 1) % per_epoch;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(tc.seed, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t start = index * tc.batch_size;
  const std::size_t n = std::min(tc.batch_size, data.size() - start);
  return collate(data, std::span(order).subspan(start, n), pad_id);
}

double evaluate_loss(const TranslationModel& model, std::span<const TrainingExample> data, std::size_t batch_size,
                     TokenId pad_id) {
  if (data.empty()) throw Error("evaluate_loss: empty dataset");
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t count = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.resize(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch b = collate(data, idx, pad_id);
    const std::size_t n = b.target_count(pad_id);
    if (n == 0) continue;
    total += batch_loss(model, b, pad_id).item() * static_cast<double>(n);
    count += n;
  }
  if (count == 0) throw Error("evaluate_loss: no target tokens");
  return total / static_cast<double>(count);
}

TrainResult train(TrainingState& state, std::span<const TrainingExample> data, std::span<const TrainingExample> eval,
                  const TrainOptions& options) {
  const TrainConfig& tc = state.config;
  tc.validate();
  if (data.empty()) throw Error("train: dataset is empty");
  const auto& params = state.model.parameters();
  const bool use_dropout = state.model.config().dropout_rate > 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result;

  auto write = [&](const std::filesystem::path& name) {
    if (options.checkpoint_dir.empty()) return;
    const auto path = options.checkpoint_dir / name;
    save_checkpoint(state, path);
    result.checkpoints.push_back(path);
  };

  const std::size_t per_epoch = (data.size() + tc.batch_size - 1) / tc.batch_size;
  while (state.step < tc.max_steps) {
    const std::size_t step = state.step + 1;
    const Batch batch = batch_for_step(data, tc, step, options.pad_id);
    std::mt19937_64 dropout_rng(mix_seed(tc.seed ^ 0x5eed, step));
    ForwardOptions fwd{use_dropout, &dropout_rng};

    state.model.zero_grad();
    const Tensor loss = batch_loss(state.model, batch, options.pad_id, fwd);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw Error(fmt::format("non-finite loss {} at step {} (batch {} of epoch {})", value, step,
                              (step - 1) % per_epoch, (step - 1) / per_epoch));
    }
    backward(loss);
    if (tc.grad_clip_norm) clip_grad_norm(params, *tc.grad_clip_norm);
    adam_step(params, state.adam, tc, step);
    state.step = step;

    if (step % tc.log_every == 0 || step == tc.max_steps) {
      LossEntry e;
      e.step = step;
      e.train_loss = value;
      if (!eval.empty()) e.val_loss = evaluate_loss(state.model, eval, tc.batch_size, options.pad_id);
      if (options.record_wall_clock) {
        e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
      result.log.append(e);
      if (options.on_log) options.on_log(e);
      spdlog::debug("step {} loss {:.6f}", step, value);
    }
    if (tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && step != tc.max_steps) {
      write(fmt::format("step-{:06d}.ckpt", step));
    }
  }
  write("final.ckpt");
  return result;
}

}  // namespace mtlab
