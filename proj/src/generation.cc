#include "mtlab/generation.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace mtlab {

std::vector<std::string> GenerationConfig::problems() const {
  std::vector<std::string> out;
  if (max_new_tokens == 0) out.emplace_back("max_new_tokens must be >= 1");
  if (beam_width == 0) out.emplace_back("beam_width must be >= 1");
  if (!(length_penalty >= 0.0)) out.push_back(fmt::format("length_penalty must be >= 0 (got {})", length_penalty));
  return out;
}

void GenerationConfig::validate() const {
  const auto p = problems();
  if (!p.empty()) throw Error(fmt::format("invalid generation config: {}", fmt::join(p, "; ")));
}

namespace {

std::vector<std::vector<double>> last_rows(const Tensor& logits, const TokenBatch& batch) {
  const std::size_t V = logits.cols();
  std::vector<std::vector<double>> out;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const std::size_t row = b * batch.len + batch.lengths[b] - 1;
    out.push_back(log_softmax_row(logits.data().subspan(row * V, V)));
  }
  return out;
}

class DecoderOnlyScorer : public NextTokenScorer {
 public:
  DecoderOnlyScorer(const TranslationModel& model, std::span<const TokenId> prompt)
      : model_(model), prompt_(prompt.begin(), prompt.end()) {
    if (prompt_.empty()) throw Error("decoder-only generation needs a non-empty prompt");
    if (prompt_.size() >= model.config().max_seq_len) {
      throw Error(fmt::format("no generation room: prompt of {} tokens, max_seq_len {}", prompt_.size(),
                              model.config().max_seq_len));
    }
  }

  std::size_t vocab_size() const override { return model_.config().vocab_size; }
  std::size_t room() const override { return model_.config().max_seq_len - prompt_.size(); }

  std::vector<std::vector<double>> next_log_probs(std::span<const std::vector<TokenId>> prefixes) const override {
    NoGradGuard no_grad;
    std::vector<std::vector<TokenId>> seqs;
    for (const auto& p : prefixes) {
      seqs.push_back(prompt_);
      seqs.back().insert(seqs.back().end(), p.begin(), p.end());
    }
    const TokenBatch batch = TokenBatch::from_sequences(seqs, kPadId);
    return last_rows(decoder_only_logits(model_, batch), batch);
  }

 private:
  const TranslationModel& model_;
  std::vector<TokenId> prompt_;
};

class EncoderDecoderScorer : public NextTokenScorer {
 public:
  EncoderDecoderScorer(const TranslationModel& model, std::span<const TokenId> src) : model_(model) {
    if (src.empty()) throw Error("encoder-decoder generation needs a non-empty source");
    if (src.size() > model.config().max_seq_len) {
      throw Error(fmt::format("no generation room: source of {} tokens exceeds max_seq_len {}", src.size(),
                              model.config().max_seq_len));
    }
    if (model.config().max_seq_len < 2) throw Error("no generation room: max_seq_len leaves no slot after BOS");
    NoGradGuard no_grad;
    const std::vector<std::vector<TokenId>> s{{src.begin(), src.end()}};
    const TokenBatch batch = TokenBatch::from_sequences(s, kPadId);
    memory_ = encode_source(model, batch).detach();
    src_len_ = src.size();
  }

  std::size_t vocab_size() const override { return model_.config().vocab_size; }
  std::size_t room() const override { return model_.config().max_seq_len - 1; }

  std::vector<std::vector<double>> next_log_probs(std::span<const std::vector<TokenId>> prefixes) const override {
    NoGradGuard no_grad;
    const std::size_t n = prefixes.size();
    std::vector<double> mem;
    mem.reserve(n * memory_.numel());
    for (std::size_t i = 0; i < n; ++i) mem.insert(mem.end(), memory_.data().begin(), memory_.data().end());
    const Tensor memory({n * src_len_, memory_.cols()}, std::move(mem));
    std::vector<std::vector<TokenId>> seqs;
    for (const auto& p : prefixes) {
      seqs.push_back({kBosId});
      seqs.back().insert(seqs.back().end(), p.begin(), p.end());
    }
    const TokenBatch batch = TokenBatch::from_sequences(seqs, kPadId);
    const std::vector<std::size_t> src_lengths(n, src_len_);
    return last_rows(decode_target(model_, memory, src_lengths, src_len_, batch), batch);
  }

 private:
  const TranslationModel& model_;
  Tensor memory_;
  std::size_t src_len_ = 0;
};

bool is_stop(TokenId t, const GenerationConfig& gc) {
  return std::find(gc.stop_tokens.begin(), gc.stop_tokens.end(), t) != gc.stop_tokens.end();
}

std::size_t budget(const NextTokenScorer& scorer, const GenerationConfig& gc) {
  gc.validate();
  const std::size_t room = scorer.room();
  if (room == 0) throw Error("no generation room");
  return std::min(gc.max_new_tokens, room);
}

// Candidate order: higher score first, then lexicographically smaller ids.
bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

std::vector<TokenId> strip_stop(Hypothesis h) {
  if (h.finished) h.tokens.pop_back();
  return std::move(h.tokens);
}

}  // namespace

std::unique_ptr<NextTokenScorer> make_scorer(const TranslationModel& model, std::span<const TokenId> conditioning) {
  if (model.architecture() == Architecture::kDecoderOnly) {
    return std::make_unique<DecoderOnlyScorer>(model, conditioning);
  }
  return std::make_unique<EncoderDecoderScorer>(model, conditioning);
}

double length_penalized(double log_prob, std::size_t length, double alpha) {
  if (alpha == 0.0 || length == 0) return log_prob;
  return log_prob / std::pow(static_cast<double>(length), alpha);
}

std::vector<TokenId> greedy_decode(const NextTokenScorer& scorer, const GenerationConfig& gc) {
  const std::size_t limit = budget(scorer, gc);
  std::vector<std::vector<TokenId>> prefix(1);
  double log_prob = 0.0;
  for (std::size_t t = 0; t < limit; ++t) {
    const std::vector<double> lp = scorer.next_log_probs(prefix).at(0);
    // Same cumulative, length-penalised ranking as a width-1 beam.
    TokenId best = -1;
    double best_score = 0.0;
    for (std::size_t v = 0; v < lp.size(); ++v) {
      if (static_cast<TokenId>(v) == kPadId || std::isnan(lp[v]) || lp[v] == -std::numeric_limits<double>::infinity()) continue;
      const double score = length_penalized(log_prob + lp[v], t + 1, gc.length_penalty);
      if (best < 0 || score > best_score) {
        best = static_cast<TokenId>(v);
        best_score = score;
      }
    }
    if (best < 0) throw Error("greedy_decode: no token has finite probability");
    if (is_stop(best, gc)) break;
    log_prob += lp[static_cast<std::size_t>(best)];
    prefix[0].push_back(best);
  }
  return prefix[0];
}

Hypothesis beam_search_hypothesis(const NextTokenScorer& scorer, const GenerationConfig& gc) {
  const std::size_t limit = budget(scorer, gc);
  std::vector<Hypothesis> alive(1), finished;
  for (std::size_t t = 0; t < limit && !alive.empty(); ++t) {
    std::vector<std::vector<TokenId>> prefixes;
    for (const auto& h : alive) prefixes.push_back(h.tokens);
    const auto lps = scorer.next_log_probs(prefixes);
    std::vector<Hypothesis> candidates;
    for (std::size_t i = 0; i < alive.size(); ++i) {
      for (std::size_t v = 0; v < lps[i].size(); ++v) {
        const double lp = lps[i][v];
        if (static_cast<TokenId>(v) == kPadId || std::isnan(lp) || lp == -std::numeric_limits<double>::infinity()) continue;
        Hypothesis c;
        c.tokens = alive[i].tokens;
        c.tokens.push_back(static_cast<TokenId>(v));
        c.log_prob = alive[i].log_prob + lp;
        c.score = length_penalized(c.log_prob, c.tokens.size(), gc.length_penalty);
        c.finished = is_stop(c.tokens.back(), gc);
        candidates.push_back(std::move(c));
      }
    }
    if (candidates.empty()) throw Error("beam_search: no token has finite probability");
    const std::size_t keep = std::min(gc.beam_width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);
    alive.clear();
    for (std::size_t k = 0; k < keep; ++k) {
      (candidates[k].finished ? finished : alive).push_back(std::move(candidates[k]));
    }
  }
  const auto& pool = finished.empty() ? alive : finished;
  return *std::min_element(pool.begin(), pool.end(), better);
}

std::vector<TokenId> beam_search(const NextTokenScorer& scorer, const GenerationConfig& gc) {
  return strip_stop(beam_search_hypothesis(scorer, gc));
}

std::vector<TokenId> greedy_decode(const TranslationModel& model, std::span<const TokenId> conditioning,
                                   const GenerationConfig& gc) {
  return greedy_decode(*make_scorer(model, conditioning), gc);
}

std::vector<TokenId> beam_search(const TranslationModel& model, std::span<const TokenId> conditioning,
                                 const GenerationConfig& gc) {
  return beam_search(*make_scorer(model, conditioning), gc);
}

std::vector<TokenId> generate(const TranslationModel& model, std::span<const TokenId> conditioning,
                              const GenerationConfig& gc) {
  return gc.beam_width == 1 ? greedy_decode(model, conditioning, gc) : beam_search(model, conditioning, gc);
}

std::string extract_completion(std::span<const TokenId> sequence, std::size_t prompt_len,
                               const SubwordTokenizer& tokenizer, std::span<const TokenId> stop_tokens) {
  if (prompt_len > sequence.size()) {
    throw Error(fmt::format("extract_completion: prompt_len {} exceeds sequence length {}", prompt_len,
                            sequence.size()));
  }
  const TokenId eos[] = {kEosId};
  if (stop_tokens.empty()) stop_tokens = eos;
  auto tail = sequence.subspan(prompt_len);
  const auto end = std::find_first_of(tail.begin(), tail.end(), stop_tokens.begin(), stop_tokens.end());
  return tokenizer.decode(tail.first(static_cast<std::size_t>(end - tail.begin())));
}

}  // namespace mtlab
