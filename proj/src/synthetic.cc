#include "mtlab/synthetic.h"

#include <algorithm>
#include <random>
#include <span>

#include <fmt/format.h>

namespace mtlab {
namespace {

std::string utf8(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return out;
}

CipherLanguage from_block(std::string code, char32_t first, std::span<const char32_t> skip = {}) {
  CipherLanguage lang{std::move(code), {}};
  char32_t cp = first;
  for (auto& letter : lang.letters) {
    while (std::find(skip.begin(), skip.end(), cp) != skip.end()) ++cp;
    letter = utf8(cp++);
  }
  return lang;
}

constexpr std::string_view kLexicon[] = {
    "the",   "a",     "small", "old",    "red",   "river",  "city",  "house",  "child",  "teacher",
    "book",  "water", "road",  "market", "light", "friend", "green", "tree",   "school", "morning",
    "reads", "sees",  "finds", "carries", "opens", "builds", "walks", "near",  "under",  "after",
    "every", "quiet", "bright", "warm",   "cold",  "bread",  "song",  "window", "garden", "village",
    "and",   "with",  "from",  "writes",  "hears", "takes",  "long",  "stone",  "bridge", "evening"};

}  // namespace

CipherLanguage cipher_language(std::string_view code) {
  if (code == "en") {
    CipherLanguage lang{"en", {}};
    for (int i = 0; i < 26; ++i) lang.letters[static_cast<std::size_t>(i)] = std::string(1, static_cast<char>('a' + i));
    return lang;
  }
  if (code == "hi") return from_block("hi", U'क');
  if (code == "mr") return from_block("mr", U'а');
  if (code == "hy") return from_block("hy", U'ա');
  if (code == "el") {
    static constexpr char32_t kSkip[] = {U'ς'};
    return from_block("el", U'α', kSkip);
  }
  throw Error(fmt::format("no synthetic language '{}' (known: en, hi, mr, hy, el)", code));
}

std::vector<std::string> synthetic_language_codes() { return {"en", "hi", "mr", "hy", "el"}; }

std::string encipher(std::string_view english, const CipherLanguage& lang) {
  std::string out;
  for (char c : english) {
    if (c >= 'a' && c <= 'z') {
      out += lang.letters[static_cast<std::size_t>(c - 'a')];
    } else {
      out.push_back(c);
    }
  }
  return out;
}

std::vector<std::string> synthetic_sentences(std::size_t n, std::uint64_t seed, std::size_t min_words,
                                             std::size_t max_words) {
  if (min_words == 0 || min_words > max_words) throw Error("synthetic_sentences: bad word-count range");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(min_words, max_words);
  std::uniform_int_distribution<std::size_t> word(0, std::size(kLexicon) - 1);
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t words = len(rng);
    std::string s;
    for (std::size_t w = 0; w < words; ++w) {
      if (w > 0) s.push_back(' ');
      s += kLexicon[word(rng)];
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<SentencePair> synthetic_pairs(std::string_view src_lang, std::string_view tgt_lang,
                                          std::span<const std::string> english) {
  const CipherLanguage src = cipher_language(src_lang), tgt = cipher_language(tgt_lang);
  std::vector<SentencePair> out;
  for (const auto& e : english) {
    out.push_back({src.code, tgt.code, encipher(e, src), encipher(e, tgt)});
  }
  return out;
}

std::vector<std::string> cipher_alphabet(const CipherLanguage& lang) {
  return {lang.letters.begin(), lang.letters.end()};
}

}  // namespace mtlab
