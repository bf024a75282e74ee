#pragma once

#include <cstddef>
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

// What the model is conditioned on when translating `src_text` into
// `tgt_lang`: src + tag for decoder-only, tag + src + EOS for
// encoder-decoder (the training layouts without the target side).
std::vector<TokenId> translation_conditioning(Architecture arch, const SubwordTokenizer& tokenizer,
                                              std::string_view src_text, std::string_view tgt_lang);

std::string translate_text(const TranslationModel& model, const SubwordTokenizer& tokenizer,
                           std::string_view src_text, std::string_view tgt_lang, const GenerationConfig& gc);

// "beam_width=4 length_penalty=0.6 max_new_tokens=64"
std::string decoding_provenance(const GenerationConfig& gc);

struct EvaluationResult {
  MetricReport report;
  std::vector<std::string> sources;
  std::vector<std::string> hypotheses;
  std::vector<std::string> references;
};

// Translates every pair (one direction only) and scores the corpus overall
// and per source-length bucket (tokenized source length).
EvaluationResult evaluate(const TranslationModel& model, std::span<const SentencePair> test,
                          const SubwordTokenizer& tokenizer, const GenerationConfig& gc,
                          std::span<const std::size_t> bucket_edges = {}, const MetricOptions& options = {});

// Pairs whose conditioning leaves at least one generation slot, given the
// model's max_seq_len.
std::vector<SentencePair> fits_for_generation(std::span<const SentencePair> pairs, const ModelConfig& mc,
                                              const SubwordTokenizer& tokenizer);

// One segment per line, UTF-8, '\n' terminated.
void write_lines(const std::filesystem::path& path, std::span<const std::string> lines);
std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace mtlab
