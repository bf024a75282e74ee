#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mtlab/common.h"
#include "mtlab/model.h"
#include "mtlab/tokenizer.h"

namespace mtlab {

struct SentencePair {
  std::string src_lang;
  std::string tgt_lang;
  std::string src_text;
  std::string tgt_text;

  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

enum class Regime { kOneToOne, kOneToMany, kManyToOne, kManyToMany };
enum class Mixing { kProportional, kUniform };

std::string_view to_string(Regime regime);
Regime parse_regime(std::string_view name);  // one_to_one | one_to_many | many_to_one | many_to_many
std::string_view to_string(Mixing mixing);
Mixing parse_mixing(std::string_view name);  // proportional | uniform

using Direction = std::pair<std::string, std::string>;  // (src_lang, tgt_lang)

struct DirectionConfig {
  Regime regime = Regime::kOneToOne;
  std::vector<std::string> source_langs;
  std::vector<std::string> target_langs;
  Mixing mixing = Mixing::kProportional;

  std::vector<std::string> problems() const;
  void validate() const;
  // Every (s, t) with s in sources, t in targets and s != t, in config order.
  std::vector<Direction> directions() const;
};

// One `src<TAB>tgt` pair per line. Malformed lines abort with the line number
// unless skip_bad is set, in which case they are dropped with a warning.
std::vector<SentencePair> load_corpus(const std::filesystem::path& path, const std::string& src_lang,
                                      const std::string& tgt_lang, bool skip_bad = false);

// Keeps pairs whose source and target both have a code-point count in
// [min_chars, max_chars].
std::vector<SentencePair> filter_by_length(std::span<const SentencePair> pairs, std::size_t min_chars = 40,
                                           std::size_t max_chars = 200);

std::size_t count_code_points(std::string_view text);

// Decoder-only: `tokens` = src + tag + tgt + EOS, loss_mask set on the target
// and EOS positions only. Encoder-decoder: `tokens` = tag + src + EOS is the
// encoder input, decoder_input = BOS + tgt, labels = tgt + EOS.
struct TrainingExample {
  Architecture architecture = Architecture::kDecoderOnly;
  std::string src_lang;
  std::string tgt_lang;
  TokenId tag = 0;
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> loss_mask;
  std::size_t tag_position = 0;
  std::vector<TokenId> decoder_input;
  std::vector<TokenId> labels;

  // Longest sequence the model must accept for this example.
  std::size_t model_length() const;
};

TrainingExample make_example(Architecture arch, const SentencePair& pair, const SubwordTokenizer& tokenizer);

using CorpusMap = std::map<Direction, std::vector<SentencePair>>;

struct DirectionDataset {
  std::vector<TrainingExample> examples;
  std::size_t dropped_overlength = 0;
  std::map<Direction, std::size_t> per_direction;
};

DirectionDataset build_direction_dataset(const CorpusMap& corpora, const DirectionConfig& dc, Architecture arch,
                                         const SubwordTokenizer& tokenizer, std::size_t max_seq_len,
                                         std::uint64_t seed);

// Padded training batch. `inputs` feeds the decoder-only stack or the encoder;
// `decoder_inputs` is only used by encoder-decoder batches. `labels` is
// aligned with decoder-side positions (batch x len, row-major); positions
// equal to the pad id are ignored by the loss.
struct Batch {
  Architecture architecture = Architecture::kDecoderOnly;
  TokenBatch inputs;
  TokenBatch decoder_inputs;
  std::vector<TokenId> labels;
  std::vector<std::size_t> example_indices;

  std::size_t target_count(TokenId pad_id) const;
};

Batch collate(std::span<const TrainingExample> examples, std::span<const std::size_t> indices, TokenId pad_id);

// Seeded shuffle, then consecutive chunks of batch_size (last may be short).
std::vector<Batch> make_batches(std::span<const TrainingExample> examples, std::size_t batch_size, TokenId pad_id,
                                std::uint64_t seed);

// Mean target-token NLL of a batch.
Tensor batch_loss(const TranslationModel& model, const Batch& batch, TokenId pad_id,
                  const ForwardOptions& opts = {});

}  // namespace mtlab
