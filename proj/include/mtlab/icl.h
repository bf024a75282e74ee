#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtlab/data.h"
#include "mtlab/generation.h"
#include "mtlab/metrics.h"
#include "mtlab/model.h"
#include "mtlab/tokenizer.h"

namespace mtlab {

struct Exemplar {
  std::string x;
  std::string y;

  friend bool operator==(const Exemplar&, const Exemplar&) = default;
};

// Pattern placeholders: {src}, {tgt}, {src_lang}, {tgt_lang}. {src} and {tgt}
// must each appear exactly once, with {src} first.
struct PromptTemplate {
  std::string pattern = "{src} #{tgt_lang}#> {tgt}";
  std::string separator = "\n";
  std::string src_lang;
  std::string tgt_lang;

  std::vector<std::string> problems() const;
  void validate() const;

  std::string render(const Exemplar& e) const;
  // The pattern up to {tgt}, trailing whitespace removed: generation starts
  // right after it.
  std::string render_query(std::string_view src) const;
  // render(e) minus render_query(e.x): the text the model should produce.
  std::string completion(const Exemplar& e) const;
  // render(e1) + sep + ... + render(en) + sep.
  std::string render_exemplars(std::span<const Exemplar> exemplars) const;
};

struct FewShotPrompt {
  std::string text;
  std::size_t n_shots = 0;
  std::size_t token_length = 0;  // filled by fit_prompt
};

FewShotPrompt build_prompt(std::span<const Exemplar> exemplars, std::string_view query, const PromptTemplate& t);

enum class SelectionStrategy { kFirstK, kRandom };
std::string_view to_string(SelectionStrategy s);
SelectionStrategy parse_selection(std::string_view name);  // first_k | random

// Pool entries whose source equals `query_src` are removed before selection.
std::vector<Exemplar> select_exemplars(std::span<const SentencePair> pool, std::size_t k, SelectionStrategy strategy,
                                       std::uint64_t seed, std::string_view query_src = {});

// Drops oldest exemplars until the prompt has at most `budget` tokens. Throws
// if even the zero-shot prompt is too long.
FewShotPrompt fit_prompt(std::vector<Exemplar> exemplars, std::string_view query, const PromptTemplate& t,
                         const SubwordTokenizer& tokenizer, std::size_t budget);

// Ids of every piece containing a newline: generation stops at any of them.
std::vector<TokenId> newline_tokens(const SubwordTokenizer& tokenizer);

// Decoder-only example: prompt + completion + EOS, loss on completion + EOS.
TrainingExample make_icl_example(const FewShotPrompt& prompt, const Exemplar& answer, const PromptTemplate& t,
                                 const SubwordTokenizer& tokenizer);

struct IclRecord {
  std::string prompt;
  std::string hypothesis;
  std::string reference;
  std::size_t n_shots_used = 0;
};

struct IclResult {
  MetricReport report;
  std::vector<IclRecord> records;
  std::size_t shortened_prompts = 0;  // prompts that lost exemplars to fit
};

struct IclOptions {
  std::size_t shots = 3;
  SelectionStrategy strategy = SelectionStrategy::kFirstK;
  std::uint64_t seed = 0;
  std::vector<std::size_t> bucket_edges;
  MetricOptions metrics;
};

// Per test pair: select exemplars (random selection seeded per sentence),
// fit the prompt into max_seq_len - max_new_tokens, generate with a stop at
// EOS or newline, cut the completion at the first newline and trim it.
IclResult icl_evaluate(const TranslationModel& model, std::span<const SentencePair> pool,
                       std::span<const SentencePair> test, const PromptTemplate& t, const SubwordTokenizer& tokenizer,
                       const GenerationConfig& gc, const IclOptions& options = {});

// JSON lines: {"prompt", "hypothesis", "reference", "n_shots_used"}.
void write_icl_audit(const std::filesystem::path& path, std::span<const IclRecord> records);

}  // namespace mtlab
