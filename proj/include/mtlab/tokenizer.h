#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mtlab/common.h"

namespace mtlab {

// Fixed low ids; language tags follow from id 5 in registration order.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr TokenId kSepId = 4;

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kBosToken = "<s>";
inline constexpr std::string_view kEosToken = "</s>";
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kSepToken = "<sep>";

// Visible stand-in for ' ' inside subword pieces (U+2581).
inline constexpr std::string_view kSpaceMarker = "\xE2\x96\x81";

// "#hi#>" for "hi".
std::string language_tag(std::string_view lang);

// Splits UTF-8 into code points; an invalid byte becomes its own one-byte
// symbol so the split is total.
std::vector<std::string> utf8_symbols(std::string_view text);

// Byte-pair-encoding tokenizer shared by every model in an experiment.
//
// Id layout: the five frame/control specials, then extra specials (language
// tags) in registration order, then the base alphabet sorted by code point,
// then one id per merge in merge order. Text is pre-split at spaces; a space
// becomes the marker glued to the front of the following piece, and merges
// never cross those boundaries.
//
// Only <sep> and language tags are recognised inside text; <pad>, <s>, </s>
// and <unk> exist purely as ids.
class SubwordTokenizer {
 public:
  using Merge = std::pair<std::string, std::string>;

  SubwordTokenizer(std::vector<std::string> extra_specials, std::vector<std::string> alphabet,
                   std::vector<Merge> merges);

  // Greedy most-frequent-pair merging until vocab_size is reached or the best
  // pair occurs fewer than two times. Ties go to the lexicographically
  // smallest (left, right) pair. `extra_alphabet` symbols are added to the
  // base alphabet even if absent from the corpus.
  static SubwordTokenizer train(std::span<const std::string> corpus, std::size_t vocab_size,
                                std::vector<std::string> extra_specials,
                                std::span<const std::string> extra_alphabet = {});

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t vocab_size() const { return pieces_.size(); }
  const std::string& piece(TokenId id) const;
  std::optional<TokenId> find(std::string_view piece) const;
  TokenId tag_id(std::string_view lang) const;  // throws listing registered tags
  bool has_tag(std::string_view lang) const;
  std::vector<std::string> tag_languages() const;

  const std::vector<std::string>& specials() const { return specials_; }
  const std::vector<std::string>& alphabet() const { return alphabet_; }
  const std::vector<Merge>& merges() const { return merges_; }

  // `BPE v1` text format with #specials, #alphabet and #merges sections.
  void save(const std::filesystem::path& path) const;
  std::string serialize() const;
  static SubwordTokenizer load(const std::filesystem::path& path);
  static SubwordTokenizer parse(std::string_view text);

  friend bool operator==(const SubwordTokenizer& a, const SubwordTokenizer& b) {
    return a.specials_ == b.specials_ && a.alphabet_ == b.alphabet_ && a.merges_ == b.merges_;
  }

 private:
  void encode_span(std::string_view text, std::vector<TokenId>& out) const;
  void encode_word(const std::vector<std::string>& symbols, std::vector<TokenId>& out) const;

  std::vector<std::string> specials_;  // all specials, in id order
  std::vector<std::string> alphabet_;
  std::vector<Merge> merges_;

  std::vector<std::string> pieces_;  // id -> piece
  std::unordered_map<std::string, TokenId> ids_;
  std::map<Merge, std::size_t> merge_rank_;
  std::vector<std::string> text_specials_;  // matched inside text, longest first
};

}  // namespace mtlab
