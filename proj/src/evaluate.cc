#include "mtlab/evaluate.h"

#include <fstream>

#include <fmt/format.h>

#include "mtlab/checkpoint.h"

namespace mtlab {

std::vector<TokenId> translation_conditioning(Architecture arch, const SubwordTokenizer& tokenizer,
                                              std::string_view src_text, std::string_view tgt_lang) {
  const TokenId tag = tokenizer.tag_id(tgt_lang);
  std::vector<TokenId> src = tokenizer.encode(src_text);
  if (arch == Architecture::kDecoderOnly) {
    src.push_back(tag);
    return src;
  }
  std::vector<TokenId> out{tag};
  out.insert(out.end(), src.begin(), src.end());
  out.push_back(kEosId);
  return out;
}

std::string translate_text(const TranslationModel& model, const SubwordTokenizer& tokenizer,
                           std::string_view src_text, std::string_view tgt_lang, const GenerationConfig& gc) {
  const auto cond = translation_conditioning(model.architecture(), tokenizer, src_text, tgt_lang);
  return tokenizer.decode(generate(model, cond, gc));
}

std::string decoding_provenance(const GenerationConfig& gc) {
  return fmt::format("beam_width={} length_penalty={} max_new_tokens={}", gc.beam_width, gc.length_penalty,
                     gc.max_new_tokens);
}

EvaluationResult evaluate(const TranslationModel& model, std::span<const SentencePair> test,
                          const SubwordTokenizer& tokenizer, const GenerationConfig& gc,
                          std::span<const std::size_t> bucket_edges, const MetricOptions& options) {
  if (test.empty()) throw Error("evaluate: empty test set");
  const std::string& src_lang = test.front().src_lang;
  const std::string& tgt_lang = test.front().tgt_lang;
  tokenizer.tag_id(tgt_lang);
  EvaluationResult result;
  std::vector<std::size_t> lengths;
  for (const auto& pair : test) {
    if (pair.src_lang != src_lang || pair.tgt_lang != tgt_lang) {
      throw Error(fmt::format("evaluate: mixed directions {}-{} and {}-{}", src_lang, tgt_lang, pair.src_lang,
                              pair.tgt_lang));
    }
    result.sources.push_back(pair.src_text);
    result.references.push_back(pair.tgt_text);
    result.hypotheses.push_back(translate_text(model, tokenizer, pair.src_text, tgt_lang, gc));
    lengths.push_back(tokenizer.encode(pair.src_text).size());
  }
  result.report = build_report(fmt::format("{}-{}", src_lang, tgt_lang), decoding_provenance(gc), result.hypotheses,
                               result.references, lengths, bucket_edges, options);
  return result;
}

std::vector<SentencePair> fits_for_generation(std::span<const SentencePair> pairs, const ModelConfig& mc,
                                              const SubwordTokenizer& tokenizer) {
  std::vector<SentencePair> out;
  for (const auto& p : pairs) {
    const std::size_t n = translation_conditioning(mc.architecture, tokenizer, p.src_text, p.tgt_lang).size();
    const bool fits = mc.architecture == Architecture::kDecoderOnly ? n < mc.max_seq_len : n <= mc.max_seq_len;
    if (fits) out.push_back(p);
  }
  return out;
}

void write_lines(const std::filesystem::path& path, std::span<const std::string> lines) {
  std::string out;
  for (const auto& l : lines) {
    if (l.find('\n') != std::string::npos) throw Error(fmt::format("{}: segment contains a newline", path.string()));
    out += l;
    out += '\n';
  }
  write_file(path, out);
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(fmt::format("cannot open {}", path.string()));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace mtlab
