#include "mtlab/data.h"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace mtlab {

std::string_view to_string(Regime regime) {
  switch (regime) {
    case Regime::kOneToOne: return "one_to_one";
    case Regime::kOneToMany: return "one_to_many";
    case Regime::kManyToOne: return "many_to_one";
    case Regime::kManyToMany: return "many_to_many";
  }
  return "?";
}

Regime parse_regime(std::string_view name) {
  for (Regime r : {Regime::kOneToOne, Regime::kOneToMany, Regime::kManyToOne, Regime::kManyToMany}) {
    if (to_string(r) == name) return r;
  }
  throw Error(fmt::format("unknown regime '{}' (expected one_to_one, one_to_many, many_to_one, many_to_many)", name));
}

std::string_view to_string(Mixing mixing) { return mixing == Mixing::kProportional ? "proportional" : "uniform"; }

Mixing parse_mixing(std::string_view name) {
  if (name == "proportional") return Mixing::kProportional;
  if (name == "uniform") return Mixing::kUniform;
  throw Error(fmt::format("unknown mixing '{}' (expected proportional or uniform)", name));
}

std::vector<std::string> DirectionConfig::problems() const {
  std::vector<std::string> out;
  const std::size_t ns = source_langs.size(), nt = target_langs.size();
  auto want = [&](bool ok, std::string_view rule) {
    if (!ok) {
      out.push_back(fmt::format("{} needs {} (got {} source, {} target languages)", to_string(regime), rule, ns, nt));
    }
  };
  switch (regime) {
    case Regime::kOneToOne: want(ns == 1 && nt == 1, "exactly one source and one target"); break;
    case Regime::kOneToMany: want(ns == 1 && nt >= 2, "one source and at least two targets"); break;
    case Regime::kManyToOne: want(ns >= 2 && nt == 1, "at least two sources and one target"); break;
    case Regime::kManyToMany: want(ns >= 2 && nt >= 2, "at least two sources and two targets"); break;
  }
  if (ns > 0 && nt > 0 && directions().empty()) out.emplace_back("direction config yields no source != target pair");
  return out;
}

void DirectionConfig::validate() const {
  const auto p = problems();
  if (!p.empty()) throw Error(fmt::format("invalid direction config: {}", fmt::join(p, "; ")));
}

std::vector<Direction> DirectionConfig::directions() const {
  std::vector<Direction> out;
  for (const auto& s : source_langs)
    for (const auto& t : target_langs)
      if (s != t) out.emplace_back(s, t);
  return out;
}

std::vector<SentencePair> load_corpus(const std::filesystem::path& path, const std::string& src_lang,
                                      const std::string& tgt_lang, bool skip_bad) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(fmt::format("cannot open corpus {}", path.string()));
  std::vector<SentencePair> pairs;
  std::string line;
  std::size_t line_no = 0, skipped = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t tab = line.find('\t');
    std::string problem;
    if (tab == std::string::npos) {
      problem = "missing TAB separator";
    } else if (line.find('\t', tab + 1) != std::string::npos) {
      problem = "more than two fields";
    } else if (tab == 0 || tab + 1 == line.size()) {
      problem = "empty source or target field";
    }
    if (!problem.empty()) {
      if (!skip_bad) throw Error(fmt::format("{} line {}: {}", path.string(), line_no, problem));
      spdlog::warn("{} line {}: {}; skipped", path.string(), line_no, problem);
      ++skipped;
      continue;
    }
    pairs.push_back({src_lang, tgt_lang, line.substr(0, tab), line.substr(tab + 1)});
  }
  if (pairs.empty()) spdlog::warn("corpus {} is empty", path.string());
  if (skipped > 0) spdlog::warn("{}: skipped {} malformed lines", path.string(), skipped);
  return pairs;
}

std::size_t count_code_points(std::string_view text) {
  std::size_t n = 0;
  for (char c : text) n += (static_cast<unsigned char>(c) & 0xC0) != 0x80;
  return n;
}

std::vector<SentencePair> filter_by_length(std::span<const SentencePair> pairs, std::size_t min_chars,
                                           std::size_t max_chars) {
  if (min_chars > max_chars) throw Error(fmt::format("filter_by_length: min {} > max {}", min_chars, max_chars));
  std::vector<SentencePair> out;
  for (const auto& p : pairs) {
    const std::size_t s = count_code_points(p.src_text), t = count_code_points(p.tgt_text);
    if (s >= min_chars && s <= max_chars && t >= min_chars && t <= max_chars) out.push_back(p);
  }
  return out;
}

std::size_t TrainingExample::model_length() const {
  if (architecture == Architecture::kDecoderOnly) return tokens.size();
  return std::max(tokens.size(), decoder_input.size());
}

TrainingExample make_example(Architecture arch, const SentencePair& pair, const SubwordTokenizer& tokenizer) {
  TrainingExample ex;
  ex.architecture = arch;
  ex.src_lang = pair.src_lang;
  ex.tgt_lang = pair.tgt_lang;
  ex.tag = tokenizer.tag_id(pair.tgt_lang);
  const std::vector<TokenId> src = tokenizer.encode(pair.src_text);
  const std::vector<TokenId> tgt = tokenizer.encode(pair.tgt_text);
  if (arch == Architecture::kDecoderOnly) {
    ex.tokens = src;
    ex.tag_position = ex.tokens.size();
    ex.tokens.push_back(ex.tag);
    ex.tokens.insert(ex.tokens.end(), tgt.begin(), tgt.end());
    ex.tokens.push_back(kEosId);
    ex.loss_mask.assign(ex.tokens.size(), 0);
    std::fill(ex.loss_mask.begin() + static_cast<std::ptrdiff_t>(ex.tag_position + 1), ex.loss_mask.end(), 1);
  } else {
    ex.tokens.push_back(ex.tag);
    ex.tokens.insert(ex.tokens.end(), src.begin(), src.end());
    ex.tokens.push_back(kEosId);
    ex.decoder_input.push_back(kBosId);
    ex.decoder_input.insert(ex.decoder_input.end(), tgt.begin(), tgt.end());
    ex.labels = tgt;
    ex.labels.push_back(kEosId);
  }
  return ex;
}

DirectionDataset build_direction_dataset(const CorpusMap& corpora, const DirectionConfig& dc, Architecture arch,
                                         const SubwordTokenizer& tokenizer, std::size_t max_seq_len,
                                         std::uint64_t seed) {
  dc.validate();
  const std::vector<Direction> directions = dc.directions();
  for (const auto& dir : directions) {
    if (!corpora.contains(dir)) throw Error(fmt::format("no corpus for direction {}-{}", dir.first, dir.second));
    tokenizer.tag_id(dir.second);
  }

  std::size_t uniform_quota = std::numeric_limits<std::size_t>::max();
  if (dc.mixing == Mixing::kUniform) {
    for (const auto& dir : directions) uniform_quota = std::min(uniform_quota, corpora.at(dir).size());
  }

  DirectionDataset out;
  for (std::size_t d = 0; d < directions.size(); ++d) {
    const auto& pairs = corpora.at(directions[d]);
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    if (dc.mixing == Mixing::kUniform && pairs.size() > uniform_quota) {
      std::mt19937_64 rng(mix_seed(seed, 1000 + d));
      std::shuffle(order.begin(), order.end(), rng);
      order.resize(uniform_quota);
      std::sort(order.begin(), order.end());
    }
    std::size_t kept = 0;
    for (std::size_t i : order) {
      TrainingExample ex = make_example(arch, pairs[i], tokenizer);
      if (ex.model_length() > max_seq_len) {
        ++out.dropped_overlength;
        continue;
      }
      out.examples.push_back(std::move(ex));
      ++kept;
    }
    out.per_direction[directions[d]] = kept;
  }
  std::mt19937_64 rng(mix_seed(seed, 1));
  std::shuffle(out.examples.begin(), out.examples.end(), rng);
  if (out.dropped_overlength > 0) {
    spdlog::info("dropped {} examples longer than max_seq_len {}", out.dropped_overlength, max_seq_len);
  }
  return out;
}

std::size_t Batch::target_count(TokenId pad_id) const {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [&](TokenId t) { return t != pad_id; }));
}

Batch collate(std::span<const TrainingExample> examples, std::span<const std::size_t> indices, TokenId pad_id) {
  if (indices.empty()) throw Error("collate: empty batch");
  Batch b;
  b.architecture = examples[indices[0]].architecture;
  b.example_indices.assign(indices.begin(), indices.end());
  std::vector<std::vector<TokenId>> inputs, dec_inputs, labels;
  for (std::size_t i : indices) {
    const TrainingExample& ex = examples[i];
    if (ex.architecture != b.architecture) throw Error("collate: mixed architectures in one batch");
    if (ex.architecture == Architecture::kDecoderOnly) {
      if (ex.tokens.size() < 2) throw Error("collate: decoder-only example shorter than 2 tokens");
      inputs.emplace_back(ex.tokens.begin(), ex.tokens.end() - 1);
      std::vector<TokenId> lab(ex.tokens.size() - 1, pad_id);
      for (std::size_t p = 0; p + 1 < ex.tokens.size(); ++p)
        if (ex.loss_mask[p + 1]) lab[p] = ex.tokens[p + 1];
      labels.push_back(std::move(lab));
    } else {
      inputs.push_back(ex.tokens);
      dec_inputs.push_back(ex.decoder_input);
      labels.push_back(ex.labels);
    }
  }
  b.inputs = TokenBatch::from_sequences(inputs, pad_id);
  const TokenBatch* label_shape = &b.inputs;
  if (b.architecture == Architecture::kEncoderDecoder) {
    b.decoder_inputs = TokenBatch::from_sequences(dec_inputs, pad_id);
    label_shape = &b.decoder_inputs;
  }
  b.labels.assign(label_shape->batch * label_shape->len, pad_id);
  for (std::size_t r = 0; r < labels.size(); ++r)
    std::copy(labels[r].begin(), labels[r].end(), b.labels.begin() + static_cast<std::ptrdiff_t>(r * label_shape->len));
  return b;
}

std::vector<Batch> make_batches(std::span<const TrainingExample> examples, std::size_t batch_size, TokenId pad_id,
                                std::uint64_t seed) {
  if (batch_size == 0) throw Error("make_batches: batch_size must be at least 1");
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    batches.push_back(collate(examples, std::span(order).subspan(start, n), pad_id));
  }
  return batches;
}

Tensor batch_loss(const TranslationModel& model, const Batch& batch, TokenId pad_id, const ForwardOptions& opts) {
  if (batch.architecture != model.architecture()) throw Error("batch_loss: batch and model architectures differ");
  Tensor logits;
  if (batch.architecture == Architecture::kDecoderOnly) {
    logits = decoder_only_logits(model, batch.inputs, opts);
  } else {
    const Tensor memory = encode_source(model, batch.inputs, opts);
    logits = decode_target(model, memory, batch.inputs.lengths, batch.inputs.len, batch.decoder_inputs, opts);
  }
  return cross_entropy(logits, batch.labels, pad_id);
}

}  // namespace mtlab
