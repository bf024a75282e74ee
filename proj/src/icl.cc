#include "mtlab/icl.h"

#include <algorithm>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "mtlab/checkpoint.h"
#include "mtlab/evaluate.h"

namespace mtlab {
namespace {

constexpr std::string_view kPlaceholders[] = {"{src_lang}", "{tgt_lang}", "{src}", "{tgt}"};

// Calls emit(literal, placeholder) for each run of the pattern; placeholder is
// empty for the trailing literal.
template <typename Fn>
void scan_pattern(std::string_view pattern, Fn emit) {
  std::size_t pos = 0, lit = 0;
  while (pos < pattern.size()) {
    bool matched = false;
    if (pattern[pos] == '{') {
      for (std::string_view ph : kPlaceholders) {
        if (pattern.substr(pos, ph.size()) == ph) {
          emit(pattern.substr(lit, pos - lit), ph);
          pos += ph.size();
          lit = pos;
          matched = true;
          break;
        }
      }
    }
    if (!matched) ++pos;
  }
  emit(pattern.substr(lit), std::string_view{});
}

std::string trim(std::string_view s) {
  const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

std::vector<std::string> PromptTemplate::problems() const {
  std::vector<std::string> out;
  std::size_t n_src = 0, n_tgt = 0;
  bool tgt_before_src = false;
  scan_pattern(pattern, [&](std::string_view, std::string_view ph) {
    if (ph == "{src}") {
      ++n_src;
      tgt_before_src = tgt_before_src || n_tgt > 0;
    }
    if (ph == "{tgt}") ++n_tgt;
  });
  if (n_src != 1) out.push_back(fmt::format("template pattern must contain {{src}} exactly once (found {})", n_src));
  if (n_tgt != 1) out.push_back(fmt::format("template pattern must contain {{tgt}} exactly once (found {})", n_tgt));
  if (tgt_before_src) out.emplace_back("template pattern must place {src} before {tgt}");
  return out;
}

void PromptTemplate::validate() const {
  const auto p = problems();
  if (!p.empty()) throw Error(fmt::format("malformed prompt template '{}': {}", pattern, fmt::join(p, "; ")));
}

std::string PromptTemplate::render(const Exemplar& e) const {
  validate();
  std::string out;
  scan_pattern(pattern, [&](std::string_view literal, std::string_view ph) {
    out += literal;
    if (ph == "{src}") out += e.x;
    if (ph == "{tgt}") out += e.y;
    if (ph == "{src_lang}") out += src_lang;
    if (ph == "{tgt_lang}") out += tgt_lang;
  });
  return out;
}

std::string PromptTemplate::render_query(std::string_view src) const {
  validate();
  std::string out;
  bool done = false;
  scan_pattern(pattern, [&](std::string_view literal, std::string_view ph) {
    if (done) return;
    out += literal;
    if (ph == "{tgt}") done = true;
    if (ph == "{src}") out += src;
    if (ph == "{src_lang}") out += src_lang;
    if (ph == "{tgt_lang}") out += tgt_lang;
  });
  while (!out.empty() && (out.back() == ' ' || out.back() == '\t')) out.pop_back();
  return out;
}

std::string PromptTemplate::completion(const Exemplar& e) const {
  return render(e).substr(render_query(e.x).size());
}

std::string PromptTemplate::render_exemplars(std::span<const Exemplar> exemplars) const {
  std::string out;
  for (const auto& e : exemplars) {
    out += render(e);
    out += separator;
  }
  return out;
}

FewShotPrompt build_prompt(std::span<const Exemplar> exemplars, std::string_view query, const PromptTemplate& t) {
  t.validate();
  FewShotPrompt p;
  p.text = t.render_exemplars(exemplars) + t.render_query(query);
  p.n_shots = exemplars.size();
  return p;
}

std::string_view to_string(SelectionStrategy s) { return s == SelectionStrategy::kFirstK ? "first_k" : "random"; }

SelectionStrategy parse_selection(std::string_view name) {
  if (name == "first_k") return SelectionStrategy::kFirstK;
  if (name == "random") return SelectionStrategy::kRandom;
  throw Error(fmt::format("unknown exemplar selection '{}' (expected first_k or random)", name));
}

std::vector<Exemplar> select_exemplars(std::span<const SentencePair> pool, std::size_t k, SelectionStrategy strategy,
                                       std::uint64_t seed, std::string_view query_src) {
  std::vector<const SentencePair*> eligible;
  for (const auto& p : pool)
    if (query_src.empty() || p.src_text != query_src) eligible.push_back(&p);
  if (k > eligible.size()) {
    throw Error(fmt::format("select_exemplars: need {} exemplars but only {} remain after removing the query", k,
                            eligible.size()));
  }
  if (strategy == SelectionStrategy::kRandom) {
    std::mt19937_64 rng(seed);
    std::shuffle(eligible.begin(), eligible.end(), rng);
  }
  std::vector<Exemplar> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({eligible[i]->src_text, eligible[i]->tgt_text});
  return out;
}

FewShotPrompt fit_prompt(std::vector<Exemplar> exemplars, std::string_view query, const PromptTemplate& t,
                         const SubwordTokenizer& tokenizer, std::size_t budget) {
  while (true) {
    FewShotPrompt p = build_prompt(exemplars, query, t);
    p.token_length = tokenizer.encode(p.text).size();
    if (p.token_length <= budget) return p;
    if (exemplars.empty()) {
      throw Error(fmt::format("zero-shot prompt needs {} tokens, budget is {}", p.token_length, budget));
    }
    exemplars.erase(exemplars.begin());
  }
}

std::vector<TokenId> newline_tokens(const SubwordTokenizer& tokenizer) {
  std::vector<TokenId> out;
  for (std::size_t id = 0; id < tokenizer.vocab_size(); ++id) {
    if (tokenizer.piece(static_cast<TokenId>(id)).find('\n') != std::string::npos) {
      out.push_back(static_cast<TokenId>(id));
    }
  }
  return out;
}

TrainingExample make_icl_example(const FewShotPrompt& prompt, const Exemplar& answer, const PromptTemplate& t,
                                 const SubwordTokenizer& tokenizer) {
  TrainingExample ex;
  ex.architecture = Architecture::kDecoderOnly;
  ex.src_lang = t.src_lang;
  ex.tgt_lang = t.tgt_lang;
  ex.tag = tokenizer.has_tag(t.tgt_lang) ? tokenizer.tag_id(t.tgt_lang) : kSepId;
  ex.tokens = tokenizer.encode(prompt.text);
  if (ex.tokens.empty()) throw Error("make_icl_example: empty prompt");
  ex.tag_position = ex.tokens.size() - 1;
  const auto target = tokenizer.encode(t.completion(answer));
  ex.tokens.insert(ex.tokens.end(), target.begin(), target.end());
  ex.tokens.push_back(kEosId);
  ex.loss_mask.assign(ex.tokens.size(), 0);
  std::fill(ex.loss_mask.begin() + static_cast<std::ptrdiff_t>(ex.tag_position + 1), ex.loss_mask.end(), 1);
  return ex;
}

IclResult icl_evaluate(const TranslationModel& model, std::span<const SentencePair> pool,
                       std::span<const SentencePair> test, const PromptTemplate& t, const SubwordTokenizer& tokenizer,
                       const GenerationConfig& gc, const IclOptions& options) {
  if (test.empty()) throw Error("icl_evaluate: empty test set");
  if (model.architecture() != Architecture::kDecoderOnly) throw Error("icl_evaluate needs a decoder-only model");
  gc.validate();
  const std::size_t max_len = model.config().max_seq_len;
  if (gc.max_new_tokens >= max_len) {
    throw Error(fmt::format("icl_evaluate: max_new_tokens {} leaves no prompt room in max_seq_len {}",
                            gc.max_new_tokens, max_len));
  }
  const std::size_t budget = max_len - gc.max_new_tokens;

  // Text after {tgt} in the pattern, e.g. a closing quote, is not part of the answer.
  const std::string tail = t.render({"", ""}).substr(t.render_query("").size());
  const std::string answer_suffix = trim(tail);

  GenerationConfig stop_gc = gc;
  stop_gc.stop_tokens = {kEosId};
  for (TokenId id : newline_tokens(tokenizer)) stop_gc.stop_tokens.push_back(id);

  IclResult result;
  std::vector<std::string> hyps, refs;
  std::vector<std::size_t> lengths;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const SentencePair& pair = test[i];
    const auto exemplars =
        select_exemplars(pool, options.shots, options.strategy, mix_seed(options.seed, i), pair.src_text);
    const FewShotPrompt prompt = fit_prompt(exemplars, pair.src_text, t, tokenizer, budget);
    if (prompt.n_shots < options.shots) ++result.shortened_prompts;

    const auto ids = tokenizer.encode(prompt.text);
    const Hypothesis h = beam_search_hypothesis(*make_scorer(model, ids), stop_gc);
    std::string text = tokenizer.decode(h.tokens);
    text = text.substr(0, text.find('\n'));
    text = trim(text);
    if (!answer_suffix.empty() && text.size() >= answer_suffix.size() &&
        text.compare(text.size() - answer_suffix.size(), answer_suffix.size(), answer_suffix) == 0) {
      text = trim(std::string_view(text).substr(0, text.size() - answer_suffix.size()));
    }

    result.records.push_back({prompt.text, text, pair.tgt_text, prompt.n_shots});
    hyps.push_back(text);
    refs.push_back(pair.tgt_text);
    lengths.push_back(tokenizer.encode(pair.src_text).size());
  }
  const std::string direction = fmt::format("{}-{}", test.front().src_lang, test.front().tgt_lang);
  const std::string decoding =
      fmt::format("{} shots={} selection={}", decoding_provenance(gc), options.shots, to_string(options.strategy));
  result.report = build_report(direction, decoding, hyps, refs, lengths, options.bucket_edges, options.metrics);
  return result;
}

void write_icl_audit(const std::filesystem::path& path, std::span<const IclRecord> records) {
  std::string out;
  for (const auto& r : records) {
    const nlohmann::json j = {{"prompt", r.prompt},
                              {"hypothesis", r.hypothesis},
                              {"reference", r.reference},
                              {"n_shots_used", r.n_shots_used}};
    out += j.dump();
    out += '\n';
  }
  write_file(path, out);
}

}  // namespace mtlab
