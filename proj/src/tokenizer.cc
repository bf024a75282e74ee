#include "mtlab/tokenizer.h"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace mtlab {
namespace {

constexpr std::string_view kHeader = "BPE v1";

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 0;
}

// Words of one special-free span: a space starts a new word and is stored as
// the marker at its front.
std::vector<std::vector<std::string>> split_words(std::string_view span) {
  std::vector<std::vector<std::string>> words;
  std::vector<std::string> current;
  for (std::string& sym : utf8_symbols(span)) {
    if (sym == " ") {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
      current.emplace_back(kSpaceMarker);
    } else {
      current.push_back(std::move(sym));
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape(std::string_view s, std::size_t line_no) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i == s.size()) throw Error(fmt::format("tokenizer file line {}: dangling escape", line_no));
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 'n': out += '\n'; break;
      case 't': out += '\t'; break;
      case 'r': out += '\r'; break;
      default: throw Error(fmt::format("tokenizer file line {}: unknown escape \\{}", line_no, s[i]));
    }
  }
  return out;
}

std::vector<std::string> fixed_specials() {
  return {std::string(kPadToken), std::string(kBosToken), std::string(kEosToken),
          std::string(kUnkToken), std::string(kSepToken)};
}

// Splits text into (is_special, piece) runs using longest-match on `specials`.
template <typename Fn>
void scan_specials(std::string_view text, const std::vector<std::string>& specials, Fn&& emit) {
  std::size_t start = 0, pos = 0;
  while (pos < text.size()) {
    const std::string* hit = nullptr;
    for (const std::string& s : specials) {
      if (text.compare(pos, s.size(), s) == 0) {
        hit = &s;
        break;  // sorted longest first
      }
    }
    if (hit == nullptr) {
      ++pos;
      continue;
    }
    if (pos > start) emit(false, text.substr(start, pos - start));
    emit(true, std::string_view(*hit));
    pos += hit->size();
    start = pos;
  }
  if (pos > start) emit(false, text.substr(start, pos - start));
}

std::vector<std::string> longest_first(std::vector<std::string> v) {
  std::stable_sort(v.begin(), v.end(),
                   [](const std::string& a, const std::string& b) { return a.size() > b.size(); });
  return v;
}

}  // namespace

std::string language_tag(std::string_view lang) { return fmt::format("#{}#>", lang); }

std::vector<std::string> utf8_symbols(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t len = utf8_length(static_cast<unsigned char>(text[i]));
    bool valid = len != 0 && i + len <= text.size();
    for (std::size_t j = 1; valid && j < len; ++j) {
      valid = (static_cast<unsigned char>(text[i + j]) & 0xC0) == 0x80;
    }
    if (!valid) len = 1;
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

SubwordTokenizer::SubwordTokenizer(std::vector<std::string> extra_specials,
                                   std::vector<std::string> alphabet, std::vector<Merge> merges)
    : alphabet_(std::move(alphabet)), merges_(std::move(merges)) {
  specials_ = fixed_specials();
  for (std::string& s : extra_specials) {
    if (s.empty()) throw Error("tokenizer: empty special token");
    specials_.push_back(std::move(s));
  }
  auto add_piece = [this](const std::string& piece, const char* what) {
    if (!ids_.emplace(piece, static_cast<TokenId>(pieces_.size())).second) {
      throw Error(fmt::format("tokenizer: duplicate {} '{}'", what, escape(piece)));
    }
    pieces_.push_back(piece);
  };
  for (const std::string& s : specials_) add_piece(s, "special");
  for (const std::string& a : alphabet_) add_piece(a, "alphabet symbol");
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const Merge& m = merges_[r];
    if (!ids_.contains(m.first) || !ids_.contains(m.second)) {
      throw Error(fmt::format("tokenizer: merge {} '{}' + '{}' uses unknown pieces", r, escape(m.first),
                              escape(m.second)));
    }
    add_piece(m.first + m.second, "merged piece");
    merge_rank_.emplace(m, r);
  }
  std::vector<std::string> text_specials{std::string(kSepToken)};
  text_specials.insert(text_specials.end(), specials_.begin() + 5, specials_.end());
  text_specials_ = longest_first(std::move(text_specials));
}

SubwordTokenizer SubwordTokenizer::train(std::span<const std::string> corpus, std::size_t vocab_size,
                                         std::vector<std::string> extra_specials,
                                         std::span<const std::string> extra_alphabet) {
  if (corpus.empty()) throw Error("train_bpe: empty corpus");

  std::vector<std::string> specials = fixed_specials();
  specials.insert(specials.end(), extra_specials.begin(), extra_specials.end());
  std::vector<std::string> text_specials{std::string(kSepToken)};
  text_specials.insert(text_specials.end(), extra_specials.begin(), extra_specials.end());
  text_specials = longest_first(std::move(text_specials));

  std::map<std::string, std::size_t> word_counts;
  std::map<std::string, std::vector<std::string>> word_symbols;
  std::set<std::string> alphabet(extra_alphabet.begin(), extra_alphabet.end());
  for (const std::string& line : corpus) {
    scan_specials(line, text_specials, [&](bool special, std::string_view span) {
      if (special) return;
      for (auto& word : split_words(span)) {
        std::string key;
        for (const auto& s : word) {
          key += s;
          alphabet.insert(s);
        }
        if (word_counts[key]++ == 0) word_symbols.emplace(key, std::move(word));
      }
    });
  }

  const std::size_t base = specials.size() + alphabet.size();
  if (vocab_size < base) {
    throw Error(fmt::format("train_bpe: vocab_size {} below {} specials + {} alphabet symbols",
                            vocab_size, specials.size(), alphabet.size()));
  }

  std::set<std::string> taken(specials.begin(), specials.end());
  taken.insert(alphabet.begin(), alphabet.end());
  std::vector<Merge> merges;
  std::size_t size = base;
  while (size < vocab_size) {
    std::map<Merge, std::size_t> pair_counts;
    for (const auto& [key, symbols] : word_symbols) {
      const std::size_t freq = word_counts[key];
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) pair_counts[{symbols[i], symbols[i + 1]}] += freq;
    }
    const Merge* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count && !taken.contains(pair.first + pair.second)) {
        best = &pair;
        best_count = count;
      }
    }
    if (best == nullptr || best_count < 2) break;
    const Merge merge = *best;
    const std::string joined = merge.first + merge.second;
    for (auto& [key, symbols] : word_symbols) {
      std::vector<std::string> next;
      next.reserve(symbols.size());
      for (std::size_t i = 0; i < symbols.size(); ++i) {
        if (i + 1 < symbols.size() && symbols[i] == merge.first && symbols[i + 1] == merge.second) {
          next.push_back(joined);
          ++i;
        } else {
          next.push_back(std::move(symbols[i]));
        }
      }
      symbols = std::move(next);
    }
    taken.insert(joined);
    merges.push_back(merge);
    ++size;
  }
  return SubwordTokenizer(std::move(extra_specials),
                          std::vector<std::string>(alphabet.begin(), alphabet.end()), std::move(merges));
}

void SubwordTokenizer::encode_word(const std::vector<std::string>& symbols, std::vector<TokenId>& out) const {
  std::vector<std::string> parts = symbols;
  while (parts.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      auto it = merge_rank_.find({parts[i], parts[i + 1]});
      if (it != merge_rank_.end()) best_rank = std::min(best_rank, it->second);
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    const Merge& m = merges_[best_rank];
    std::vector<std::string> next;
    next.reserve(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (i + 1 < parts.size() && parts[i] == m.first && parts[i + 1] == m.second) {
        next.push_back(parts[i] + parts[i + 1]);
        ++i;
      } else {
        next.push_back(std::move(parts[i]));
      }
    }
    parts = std::move(next);
  }
  for (const std::string& p : parts) {
    auto it = ids_.find(p);
    out.push_back(it == ids_.end() ? kUnkId : it->second);
  }
}

void SubwordTokenizer::encode_span(std::string_view text, std::vector<TokenId>& out) const {
  for (const auto& word : split_words(text)) encode_word(word, out);
}

std::vector<TokenId> SubwordTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  scan_specials(text, text_specials_, [&](bool special, std::string_view span) {
    if (special) {
      out.push_back(ids_.at(std::string(span)));
    } else {
      encode_span(span, out);
    }
  });
  return out;
}

std::string SubwordTokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
      throw Error(fmt::format("decode: id {} outside vocabulary of {}", id, pieces_.size()));
    }
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    const std::string& p = pieces_[static_cast<std::size_t>(id)];
    if (static_cast<std::size_t>(id) < specials_.size()) {
      out += p;
      continue;
    }
    std::size_t pos = 0;
    while (pos < p.size()) {
      if (p.compare(pos, kSpaceMarker.size(), kSpaceMarker) == 0) {
        out += ' ';
        pos += kSpaceMarker.size();
      } else {
        out += p[pos++];
      }
    }
  }
  return out;
}

const std::string& SubwordTokenizer::piece(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
    throw Error(fmt::format("piece: id {} outside vocabulary of {}", id, pieces_.size()));
  }
  return pieces_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> SubwordTokenizer::find(std::string_view piece) const {
  auto it = ids_.find(std::string(piece));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

bool SubwordTokenizer::has_tag(std::string_view lang) const {
  const std::string tag = language_tag(lang);
  return std::find(specials_.begin() + 5, specials_.end(), tag) != specials_.end();
}

std::vector<std::string> SubwordTokenizer::tag_languages() const {
  std::vector<std::string> langs;
  for (auto it = specials_.begin() + 5; it != specials_.end(); ++it) {
    const std::string& s = *it;
    if (s.size() > 3 && s.front() == '#' && s.ends_with("#>")) langs.push_back(s.substr(1, s.size() - 3));
  }
  return langs;
}

TokenId SubwordTokenizer::tag_id(std::string_view lang) const {
  if (!has_tag(lang)) {
    std::vector<std::string> tags;
    for (const auto& l : tag_languages()) tags.push_back(language_tag(l));
    throw Error(fmt::format("unknown language tag '{}'; registered tags: {}", language_tag(lang),
                            tags.empty() ? std::string("none") : fmt::format("{}", fmt::join(tags, " "))));
  }
  return ids_.at(language_tag(lang));
}

std::string SubwordTokenizer::serialize() const {
  std::string out(kHeader);
  out += "\n#specials\n";
  for (const auto& s : specials_) out += escape(s) + "\n";
  out += "#alphabet\n";
  for (const auto& a : alphabet_) out += escape(a) + "\n";
  out += "#merges\n";
  for (const auto& [l, r] : merges_) out += escape(l) + "\t" + escape(r) + "\n";
  return out;
}

void SubwordTokenizer::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(fmt::format("cannot write tokenizer file {}", path.string()));
  f << serialize();
  if (!f) throw Error(fmt::format("failed writing tokenizer file {}", path.string()));
}

SubwordTokenizer SubwordTokenizer::parse(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    lines.emplace_back(text.substr(start, end - start));
    start = end + 1;
  }
  if (lines.empty() || lines[0] != kHeader) throw Error("tokenizer file: missing 'BPE v1' header");

  enum class Section { kNone, kSpecials, kAlphabet, kMerges } section = Section::kNone;
  std::vector<std::string> specials, alphabet;
  std::vector<Merge> merges;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line == "#specials") { section = Section::kSpecials; continue; }
    if (line == "#alphabet") { section = Section::kAlphabet; continue; }
    if (line == "#merges") { section = Section::kMerges; continue; }
    switch (section) {
      case Section::kNone: throw Error(fmt::format("tokenizer file line {}: entry outside a section", i + 1));
      case Section::kSpecials: specials.push_back(unescape(line, i + 1)); break;
      case Section::kAlphabet: alphabet.push_back(unescape(line, i + 1)); break;
      case Section::kMerges: {
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos) throw Error(fmt::format("tokenizer file line {}: merge without TAB", i + 1));
        merges.emplace_back(unescape(line.substr(0, tab), i + 1), unescape(line.substr(tab + 1), i + 1));
        break;
      }
    }
  }
  const std::vector<std::string> fixed = fixed_specials();
  if (specials.size() < fixed.size() || !std::equal(fixed.begin(), fixed.end(), specials.begin())) {
    throw Error("tokenizer file: #specials must start with <pad> <s> </s> <unk> <sep>");
  }
  return SubwordTokenizer(std::vector<std::string>(specials.begin() + 5, specials.end()), std::move(alphabet),
                          std::move(merges));
}

SubwordTokenizer SubwordTokenizer::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(fmt::format("cannot read tokenizer file {}", path.string()));
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

}  // namespace mtlab
