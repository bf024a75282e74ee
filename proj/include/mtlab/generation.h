#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mtlab/common.h"
#include "mtlab/model.h"
#include "mtlab/tokenizer.h"

namespace mtlab {

struct GenerationConfig {
  std::size_t max_new_tokens = 64;
  std::size_t beam_width = 4;
  double length_penalty = 0.6;  // score = logprob / len^alpha
  std::vector<TokenId> stop_tokens{kEosId};

  std::vector<std::string> problems() const;
  void validate() const;
};

// Anything that maps generated prefixes to next-token log-probabilities.
// Implementations see only the generated part; conditioning is their own.
class NextTokenScorer {
 public:
  virtual ~NextTokenScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  // Tokens that can still be appended after the conditioning.
  virtual std::size_t room() const = 0;
  // One row of vocab_size log-probs per prefix.
  virtual std::vector<std::vector<double>> next_log_probs(std::span<const std::vector<TokenId>> prefixes) const = 0;
};

// Decoder-only: scores prompt + prefix. Encoder-decoder: encodes the source
// once and scores BOS + prefix against it.
std::unique_ptr<NextTokenScorer> make_scorer(const TranslationModel& model, std::span<const TokenId> conditioning);

struct Hypothesis {
  std::vector<TokenId> tokens;  // generated tokens, stop token included when finished
  double log_prob = 0.0;
  double score = 0.0;
  bool finished = false;
};

// Argmax per step, lowest id on ties, PAD never chosen. Stops at a stop token
// or when the budget min(max_new_tokens, room) is spent; the returned ids
// exclude the stop token.
std::vector<TokenId> greedy_decode(const NextTokenScorer& scorer, const GenerationConfig& gc);
std::vector<TokenId> greedy_decode(const TranslationModel& model, std::span<const TokenId> conditioning,
                                   const GenerationConfig& gc);

// Keeps the beam_width best candidates per step ordered by (score desc, then
// token ids ascending); candidates ending in a stop token move to the
// finished pool. Returns the best finished hypothesis, or the best unfinished
// one if nothing finished within the budget.
Hypothesis beam_search_hypothesis(const NextTokenScorer& scorer, const GenerationConfig& gc);
std::vector<TokenId> beam_search(const NextTokenScorer& scorer, const GenerationConfig& gc);
std::vector<TokenId> beam_search(const TranslationModel& model, std::span<const TokenId> conditioning,
                                 const GenerationConfig& gc);

// Dispatches on beam_width (1 = greedy).
std::vector<TokenId> generate(const TranslationModel& model, std::span<const TokenId> conditioning,
                              const GenerationConfig& gc);

double length_penalized(double log_prob, std::size_t length, double alpha);

// Decodes sequence[prompt_len:] up to (not including) the first stop token.
// An empty stop list means {EOS}.
std::string extract_completion(std::span<const TokenId> sequence, std::size_t prompt_len,
                               const SubwordTokenizer& tokenizer, std::span<const TokenId> stop_tokens = {});

}  // namespace mtlab
