#include "mtlab/model.h"

#include <algorithm>

#include <fmt/format.h>

#include "mtlab/checkpoint.h"

namespace mtlab {

std::string_view to_string(Architecture arch) {
  return arch == Architecture::kDecoderOnly ? "decoder_only" : "encoder_decoder";
}

Architecture parse_architecture(std::string_view name) {
  if (name == "decoder_only") return Architecture::kDecoderOnly;
  if (name == "encoder_decoder") return Architecture::kEncoderDecoder;
  throw Error(fmt::format("unknown architecture '{}' (expected decoder_only or encoder_decoder)", name));
}

std::vector<std::string> ModelConfig::problems() const {
  std::vector<std::string> out;
  if (d_model == 0) out.emplace_back("d_model must be positive");
  if (n_heads == 0) {
    out.emplace_back("n_heads must be positive");
  } else if (d_model % n_heads != 0) {
    out.push_back(fmt::format("d_model {} is not divisible by n_heads {}", d_model, n_heads));
  }
  if (d_ff == 0) out.emplace_back("d_ff must be positive");
  if (max_seq_len < 2) out.push_back(fmt::format("max_seq_len {} must be at least 2", max_seq_len));
  if (vocab_size < 6) out.push_back(fmt::format("vocab_size {} must exceed the 5 fixed specials", vocab_size));
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    out.push_back(fmt::format("dropout_rate {} outside [0, 1)", dropout_rate));
  }
  return out;
}

void ModelConfig::validate() const {
  const auto p = problems();
  if (!p.empty()) throw Error(fmt::format("invalid model config: {}", fmt::join(p, "; ")));
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"architecture", std::string(to_string(c.architecture))},
                     {"vocab_size", c.vocab_size},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"n_layers", c.n_layers},
                     {"n_enc_layers", c.n_enc_layers},
                     {"n_dec_layers", c.n_dec_layers},
                     {"d_ff", c.d_ff},
                     {"max_seq_len", c.max_seq_len},
                     {"dropout_rate", c.dropout_rate},
                     {"seed", c.seed},
                     {"tie_embeddings", c.tie_embeddings},
                     {"learned_positions", c.learned_positions}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.architecture = parse_architecture(j.at("architecture").get<std::string>());
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_enc_layers").get_to(c.n_enc_layers);
  j.at("n_dec_layers").get_to(c.n_dec_layers);
  j.at("d_ff").get_to(c.d_ff);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("dropout_rate").get_to(c.dropout_rate);
  j.at("seed").get_to(c.seed);
  j.at("tie_embeddings").get_to(c.tie_embeddings);
  j.at("learned_positions").get_to(c.learned_positions);
}

TranslationModel::TranslationModel(ModelConfig config) : config_(std::move(config)), init_rng_(config_.seed) {
  config_.validate();
  const std::size_t d = config_.d_model, V = config_.vocab_size, T = config_.max_seq_len;
  constexpr double kStd = 0.02;

  tok_emb_ = add("tok_emb", {V, d}, kStd);
  if (config_.architecture == Architecture::kDecoderOnly) {
    if (config_.learned_positions) pos_emb_ = add("pos_emb", {T, d}, kStd);
    blocks_.resize(config_.n_layers);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const std::string p = fmt::format("layers.{}.", l);
      add_layer_norm(p + "ln1", blocks_[l].ln1);
      add_attention(p + "attn", blocks_[l].self_attn);
      add_layer_norm(p + "ln2", blocks_[l].ln2);
      add_ffn(p + "ffn", blocks_[l].ffn);
    }
    if (config_.n_layers > 0) add_layer_norm("final_ln", final_ln_);
  } else {
    if (config_.learned_positions) {
      enc_pos_emb_ = add("enc.pos_emb", {T, d}, kStd);
      pos_emb_ = add("dec.pos_emb", {T, d}, kStd);
    }
    enc_layers_.resize(config_.n_enc_layers);
    for (std::size_t l = 0; l < enc_layers_.size(); ++l) {
      const std::string p = fmt::format("enc.layers.{}.", l);
      add_layer_norm(p + "ln1", enc_layers_[l].ln1);
      add_attention(p + "attn", enc_layers_[l].self_attn);
      add_layer_norm(p + "ln2", enc_layers_[l].ln2);
      add_ffn(p + "ffn", enc_layers_[l].ffn);
    }
    if (config_.n_enc_layers > 0) add_layer_norm("enc.final_ln", enc_final_ln_);
    dec_layers_.resize(config_.n_dec_layers);
    for (std::size_t l = 0; l < dec_layers_.size(); ++l) {
      const std::string p = fmt::format("dec.layers.{}.", l);
      add_layer_norm(p + "ln1", dec_layers_[l].ln1);
      add_attention(p + "attn", dec_layers_[l].self_attn);
      add_layer_norm(p + "ln2", dec_layers_[l].ln2);
      add_attention(p + "cross", dec_layers_[l].cross_attn);
      add_layer_norm(p + "ln3", dec_layers_[l].ln3);
      add_ffn(p + "ffn", dec_layers_[l].ffn);
    }
    if (config_.n_dec_layers > 0) add_layer_norm("dec.final_ln", final_ln_);
  }
  if (!config_.tie_embeddings) out_proj_ = add("out_proj", {d, V}, kStd);
}

Tensor& TranslationModel::add(std::string name, Shape shape, double stddev, double fill) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> values(n, fill);
  if (stddev > 0.0) {
    std::normal_distribution<double> normal(0.0, stddev);
    for (double& v : values) v = normal(init_rng_);
  }
  named_.push_back({std::move(name), Tensor(std::move(shape), std::move(values), true)});
  return named_.back().tensor;
}

void TranslationModel::add_attention(const std::string& prefix, AttentionParams& p) {
  const std::size_t d = config_.d_model;
  constexpr double kStd = 0.02;
  p.wq = add(prefix + ".wq", {d, d}, kStd);
  p.bq = add(prefix + ".bq", {d}, 0.0);
  p.wk = add(prefix + ".wk", {d, d}, kStd);
  p.bk = add(prefix + ".bk", {d}, 0.0);
  p.wv = add(prefix + ".wv", {d, d}, kStd);
  p.bv = add(prefix + ".bv", {d}, 0.0);
  p.wo = add(prefix + ".wo", {d, d}, kStd);
  p.bo = add(prefix + ".bo", {d}, 0.0);
}

void TranslationModel::add_layer_norm(const std::string& prefix, LayerNormParams& p) {
  p.gain = add(prefix + ".gain", {config_.d_model}, 0.0, 1.0);
  p.bias = add(prefix + ".bias", {config_.d_model}, 0.0);
}

void TranslationModel::add_ffn(const std::string& prefix, FeedForwardParams& p) {
  const std::size_t d = config_.d_model, f = config_.d_ff;
  p.w1 = add(prefix + ".w1", {d, f}, 0.02);
  p.b1 = add(prefix + ".b1", {f}, 0.0);
  p.w2 = add(prefix + ".w2", {f, d}, 0.02);
  p.b2 = add(prefix + ".b2", {d}, 0.0);
}

Tensor& TranslationModel::parameter(std::string_view name) {
  for (auto& p : named_)
    if (p.name == name) return p.tensor;
  throw Error(fmt::format("model has no parameter '{}'", name));
}

const Tensor& TranslationModel::parameter(std::string_view name) const {
  return const_cast<TranslationModel*>(this)->parameter(name);
}

void TranslationModel::zero_grad() {
  for (auto& p : named_) p.tensor.zero_grad();
}

TranslationModel build_model(const ModelConfig& config) { return TranslationModel(config); }

std::size_t count_parameters(const TranslationModel& model) {
  std::size_t n = 0;
  for (const auto& p : model.parameters()) n += p.tensor.numel();
  return n;
}

TokenBatch TokenBatch::from_sequences(std::span<const std::vector<TokenId>> seqs, TokenId pad_id) {
  TokenBatch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) b.len = std::max(b.len, s.size());
  b.ids.assign(b.batch * b.len, pad_id);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    std::copy(seqs[i].begin(), seqs[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.len));
    b.lengths.push_back(seqs[i].size());
  }
  return b;
}

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

Tensor maybe_dropout(const Tensor& x, const ModelConfig& c, const ForwardOptions& opts) {
  if (!opts.training || c.dropout_rate == 0.0 || opts.rng == nullptr) return x;
  return dropout(x, c.dropout_rate, *opts.rng);
}

Tensor attend(const AttentionParams& p, const Tensor& xq, const Tensor& xkv, std::size_t heads,
              const AttentionMask& mask) {
  const Tensor q = linear(xq, p.wq, p.bq);
  const Tensor k = linear(xkv, p.wk, p.bk);
  const Tensor v = linear(xkv, p.wv, p.bv);
  return linear(multi_head_attention(q, k, v, heads, mask), p.wo, p.bo);
}

Tensor feed_forward(const FeedForwardParams& p, const Tensor& x) {
  return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

Tensor norm(const LayerNormParams& p, const Tensor& x) { return layer_norm(x, p.gain, p.bias); }

void check_batch(const TranslationModel& m, const TokenBatch& b, const char* what) {
  const ModelConfig& c = m.config();
  if (b.batch == 0 || b.len == 0) throw Error(fmt::format("{}: empty token batch", what));
  if (b.len > c.max_seq_len) {
    throw Error(fmt::format("{}: sequence length {} exceeds max_seq_len {}", what, b.len, c.max_seq_len));
  }
  for (std::size_t l : b.lengths) {
    if (l == 0) throw Error(fmt::format("{}: empty sequence in batch", what));
  }
}

Tensor embed(const Tensor& tok, const Tensor& pos, const TokenBatch& b) {
  Tensor x = embedding(tok, b.ids);
  if (pos.defined()) {
    std::vector<TokenId> positions(b.batch * b.len);
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i % b.len);
    x = add(x, embedding(pos, positions));
  }
  return x;
}

Tensor output_head(const TranslationModel& m, const Tensor& x) {
  if (m.config().tie_embeddings) return matmul(x, transpose(m.token_embedding()));
  return matmul(x, m.output_projection());
}

Tensor self_attention_stack(const TranslationModel& m, const std::vector<EncoderLayerParams>& layers, Tensor x,
                            const AttentionMask& mask, const ForwardOptions& opts) {
  const ModelConfig& c = m.config();
  for (const auto& layer : layers) {
    const Tensor h = norm(layer.ln1, x);
    x = add(x, maybe_dropout(attend(layer.self_attn, h, h, c.n_heads, mask), c, opts));
    x = add(x, maybe_dropout(feed_forward(layer.ffn, norm(layer.ln2, x)), c, opts));
  }
  return x;
}

}  // namespace

Tensor decoder_only_logits(const TranslationModel& m, const TokenBatch& tokens, const ForwardOptions& opts) {
  if (m.architecture() != Architecture::kDecoderOnly) throw Error("decoder_only_logits: model is encoder-decoder");
  check_batch(m, tokens, "decoder-only forward");
  const ModelConfig& c = m.config();
  Tensor x = maybe_dropout(embed(m.token_embedding(), m.position_embedding(), tokens), c, opts);
  const AttentionMask mask = AttentionMask::padded(tokens.lengths, tokens.len, tokens.len, true);
  x = self_attention_stack(m, m.blocks(), x, mask, opts);
  if (c.n_layers > 0) x = norm(m.final_norm(), x);
  return output_head(m, x);
}

Tensor encode_source(const TranslationModel& m, const TokenBatch& src, const ForwardOptions& opts) {
  if (m.architecture() != Architecture::kEncoderDecoder) throw Error("encode_source: model is decoder-only");
  check_batch(m, src, "encoder forward");
  const ModelConfig& c = m.config();
  Tensor x = maybe_dropout(embed(m.token_embedding(), m.encoder_position_embedding(), src), c, opts);
  const AttentionMask mask = AttentionMask::padded(src.lengths, src.len, src.len, false);
  x = self_attention_stack(m, m.encoder_layers(), x, mask, opts);
  if (c.n_enc_layers > 0) x = norm(m.encoder_final_norm(), x);
  return x;
}

Tensor decode_target(const TranslationModel& m, const Tensor& memory, std::span<const std::size_t> src_lengths,
                     std::size_t src_len, const TokenBatch& tgt, const ForwardOptions& opts) {
  if (m.architecture() != Architecture::kEncoderDecoder) throw Error("decode_target: model is decoder-only");
  check_batch(m, tgt, "decoder forward");
  if (src_lengths.size() != tgt.batch) {
    throw Error(fmt::format("decode_target: {} source rows for {} target rows", src_lengths.size(), tgt.batch));
  }
  const ModelConfig& c = m.config();
  Tensor y = maybe_dropout(embed(m.token_embedding(), m.position_embedding(), tgt), c, opts);
  const AttentionMask self_mask = AttentionMask::padded(tgt.lengths, tgt.len, tgt.len, true);
  const AttentionMask cross_mask = AttentionMask::padded(src_lengths, tgt.len, src_len, false);
  for (const auto& layer : m.decoder_layers()) {
    const Tensor h = norm(layer.ln1, y);
    y = add(y, maybe_dropout(attend(layer.self_attn, h, h, c.n_heads, self_mask), c, opts));
    y = add(y, maybe_dropout(attend(layer.cross_attn, norm(layer.ln2, y), memory, c.n_heads, cross_mask), c, opts));
    y = add(y, maybe_dropout(feed_forward(layer.ffn, norm(layer.ln3, y)), c, opts));
  }
  if (c.n_dec_layers > 0) y = norm(m.final_norm(), y);
  return output_head(m, y);
}

Tensor forward_decoder_only(const TranslationModel& m, std::span<const TokenId> tokens) {
  const std::vector<std::vector<TokenId>> seqs{{tokens.begin(), tokens.end()}};
  return decoder_only_logits(m, TokenBatch::from_sequences(seqs, 0));
}

Tensor forward_encoder_decoder(const TranslationModel& m, std::span<const TokenId> src,
                               std::span<const TokenId> tgt) {
  const std::vector<std::vector<TokenId>> s{{src.begin(), src.end()}};
  const std::vector<std::vector<TokenId>> t{{tgt.begin(), tgt.end()}};
  const TokenBatch src_batch = TokenBatch::from_sequences(s, 0);
  const Tensor memory = encode_source(m, src_batch);
  return decode_target(m, memory, src_batch.lengths, src_batch.len, TokenBatch::from_sequences(t, 0));
}

void save_model(const TranslationModel& model, const std::filesystem::path& path) {
  CheckpointFile file;
  file.header = {{"format", "mtlab-model"}, {"config", model.config()}};
  for (const auto& p : model.parameters()) {
    file.blocks.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  }
  write_checkpoint(file, path);
}

TranslationModel model_from_checkpoint(const CheckpointFile& file) {
  TranslationModel model(file.header.at("config").get<ModelConfig>());
  for (auto& p : model.parameters()) {
    const TensorBlock& b = file.block(p.name);
    if (b.shape != p.tensor.shape()) {
      throw Error(fmt::format("checkpoint block '{}' has shape {}, model expects {}", p.name,
                              shape_string(b.shape), shape_string(p.tensor.shape())));
    }
    Tensor t = p.tensor;
    std::copy(b.data.begin(), b.data.end(), t.mutable_data().begin());
  }
  return model;
}

TranslationModel load_model(const std::filesystem::path& path) {
  const CheckpointFile file = read_checkpoint(path);
  if (file.header.value("format", "") != "mtlab-model" && file.header.value("format", "") != "mtlab-train") {
    throw Error(fmt::format("{} is not a model checkpoint", path.string()));
  }
  return model_from_checkpoint(file);
}

}  // namespace mtlab
