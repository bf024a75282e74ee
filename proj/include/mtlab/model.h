#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mtlab/common.h"
#include "mtlab/ops.h"
#include "mtlab/tensor.h"

namespace mtlab {

enum class Architecture { kDecoderOnly, kEncoderDecoder };

std::string_view to_string(Architecture arch);
Architecture parse_architecture(std::string_view name);  // "decoder_only" | "encoder_decoder"

struct ModelConfig {
  Architecture architecture = Architecture::kDecoderOnly;
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;      // decoder-only depth
  std::size_t n_enc_layers = 2;  // encoder-decoder only
  std::size_t n_dec_layers = 2;  // encoder-decoder only
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 128;
  double dropout_rate = 0.0;
  std::uint64_t seed = 0;
  bool tie_embeddings = true;
  bool learned_positions = true;

  // Every violated constraint, empty when valid.
  std::vector<std::string> problems() const;
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct LayerNormParams {
  Tensor gain, bias;
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

// Pre-norm self-attention block; decoder-only layers use it with a causal mask.
struct EncoderLayerParams {
  LayerNormParams ln1;
  AttentionParams self_attn;
  LayerNormParams ln2;
  FeedForwardParams ffn;
};

struct DecoderLayerParams {
  LayerNormParams ln1;
  AttentionParams self_attn;
  LayerNormParams ln2;
  AttentionParams cross_attn;
  LayerNormParams ln3;
  FeedForwardParams ffn;
};

class TranslationModel {
 public:
  // Gaussian(0, 0.02) weights and embeddings, zero biases, unit layer-norm
  // gains, all drawn in parameter order from `config.seed`.
  explicit TranslationModel(ModelConfig config);

  TranslationModel(const TranslationModel&) = delete;
  TranslationModel& operator=(const TranslationModel&) = delete;
  TranslationModel(TranslationModel&&) = default;
  TranslationModel& operator=(TranslationModel&&) = default;

  const ModelConfig& config() const { return config_; }
  Architecture architecture() const { return config_.architecture; }

  const std::vector<NamedTensor>& parameters() const { return named_; }
  Tensor& parameter(std::string_view name);
  const Tensor& parameter(std::string_view name) const;
  void zero_grad();

  const Tensor& token_embedding() const { return tok_emb_; }
  const Tensor& position_embedding() const { return pos_emb_; }          // decoder side
  const Tensor& encoder_position_embedding() const { return enc_pos_emb_; }
  const Tensor& output_projection() const { return out_proj_; }          // undefined when tied
  const std::vector<EncoderLayerParams>& blocks() const { return blocks_; }  // decoder-only
  const std::vector<EncoderLayerParams>& encoder_layers() const { return enc_layers_; }
  const std::vector<DecoderLayerParams>& decoder_layers() const { return dec_layers_; }
  const LayerNormParams& final_norm() const { return final_ln_; }        // decoder side
  const LayerNormParams& encoder_final_norm() const { return enc_final_ln_; }

 private:
  Tensor& add(std::string name, Shape shape, double stddev, double fill = 0.0);
  void add_attention(const std::string& prefix, AttentionParams& p);
  void add_layer_norm(const std::string& prefix, LayerNormParams& p);
  void add_ffn(const std::string& prefix, FeedForwardParams& p);

  ModelConfig config_;
  std::mt19937_64 init_rng_;
  Tensor tok_emb_, pos_emb_, enc_pos_emb_, out_proj_;
  std::vector<EncoderLayerParams> blocks_;
  std::vector<EncoderLayerParams> enc_layers_;
  std::vector<DecoderLayerParams> dec_layers_;
  LayerNormParams final_ln_, enc_final_ln_;
  std::vector<NamedTensor> named_;
};

TranslationModel build_model(const ModelConfig& config);
std::size_t count_parameters(const TranslationModel& model);

// Right-padded id matrix: ids is batch x len, row b valid on [0, lengths[b]).
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<TokenId> ids;
  std::vector<std::size_t> lengths;

  static TokenBatch from_sequences(std::span<const std::vector<TokenId>> seqs, TokenId pad_id);
  std::span<const TokenId> row(std::size_t b) const { return {ids.data() + b * len, len}; }
};

struct ForwardOptions {
  bool training = false;      // enables dropout
  std::mt19937_64* rng = nullptr;
};

// Logits for every position, [batch*len x vocab].
Tensor decoder_only_logits(const TranslationModel& model, const TokenBatch& tokens,
                           const ForwardOptions& opts = {});
// Encoder memory, [batch*src_len x d_model].
Tensor encode_source(const TranslationModel& model, const TokenBatch& src, const ForwardOptions& opts = {});
// Decoder logits given encoder memory, [batch*tgt_len x vocab].
Tensor decode_target(const TranslationModel& model, const Tensor& memory, std::span<const std::size_t> src_lengths,
                     std::size_t src_len, const TokenBatch& tgt, const ForwardOptions& opts = {});

// Single-sequence forms: [len x vocab] and [len(tgt) x vocab].
Tensor forward_decoder_only(const TranslationModel& model, std::span<const TokenId> tokens);
Tensor forward_encoder_decoder(const TranslationModel& model, std::span<const TokenId> src,
                               std::span<const TokenId> tgt);

// Model-only checkpoint: config header plus named parameter blocks.
void save_model(const TranslationModel& model, const std::filesystem::path& path);
TranslationModel load_model(const std::filesystem::path& path);

struct CheckpointFile;
// Rebuilds a model from any checkpoint carrying a "config" header and
// matching parameter blocks (model or training checkpoints).
TranslationModel model_from_checkpoint(const CheckpointFile& file);

}  // namespace mtlab
