#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mtlab/data.h"

namespace mtlab {

// Toy parallel data: English-like word sequences and letter-substitution
// ciphers of them in other scripts. Alphabets never overlap, so the script of
// an output identifies the language it was written in.
struct CipherLanguage {
  std::string code;
  std::array<std::string, 26> letters;  // replacement for 'a'..'z'
};

// "en" (identity), "hi" (Devanagari), "mr" (Cyrillic), "hy" (Armenian),
// "el" (Greek).
CipherLanguage cipher_language(std::string_view code);
std::vector<std::string> synthetic_language_codes();

std::string encipher(std::string_view english, const CipherLanguage& lang);

// Seeded sentences of min_words..max_words words from a fixed lexicon.
std::vector<std::string> synthetic_sentences(std::size_t n, std::uint64_t seed, std::size_t min_words = 5,
                                             std::size_t max_words = 9);

// Pairs (src, tgt) built from the same English sentences.
std::vector<SentencePair> synthetic_pairs(std::string_view src_lang, std::string_view tgt_lang,
                                          std::span<const std::string> english);

// The code points a language's cipher emits (letters only).
std::vector<std::string> cipher_alphabet(const CipherLanguage& lang);

}  // namespace mtlab
