#include <algorithm>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "mtlab/synthetic.h"
#include "mtlab/tokenizer.h"

namespace {

using mtlab::SubwordTokenizer;
using mtlab::TokenId;

const std::string kMarker(mtlab::kSpaceMarker);

// Reference trainer: recount every pair over the whole corpus each round.
std::vector<SubwordTokenizer::Merge> naive_bpe(const std::vector<std::string>& corpus, std::size_t n_specials,
                                              std::size_t vocab_size) {
  std::vector<std::vector<std::string>> words;
  std::set<std::string> pieces;
  for (const auto& line : corpus) {
    std::vector<std::string> word;
    for (const auto& s : mtlab::utf8_symbols(line)) {
      if (s == " ") {
        if (!word.empty()) words.push_back(word);
        word = {kMarker};
      } else {
        word.push_back(s);
      }
    }
    if (!word.empty()) words.push_back(word);
  }
  for (const auto& w : words) pieces.insert(w.begin(), w.end());
  std::vector<SubwordTokenizer::Merge> merges;
  while (n_specials + pieces.size() < vocab_size) {
    std::map<SubwordTokenizer::Merge, int> counts;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.size(); ++i) ++counts[{w[i], w[i + 1]}];
    int best = 1;
    SubwordTokenizer::Merge pick;
    for (const auto& [pair, c] : counts)
      if (c > best && !pieces.contains(pair.first + pair.second)) best = c, pick = pair;
    if (best < 2) break;
    for (auto& w : words) {
      std::vector<std::string> next;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == pick.first && w[i + 1] == pick.second) {
          next.push_back(w[i] + w[i + 1]);
          ++i;
        } else {
          next.push_back(w[i]);
        }
      }
      w = next;
    }
    pieces.insert(pick.first + pick.second);
    merges.push_back(pick);
  }
  return merges;
}

std::vector<std::string> corpus_sentences(std::size_t n, std::uint64_t seed) {
  std::vector<std::string> out;
  const auto english = mtlab::synthetic_sentences(n, seed);
  for (std::size_t i = 0; i < english.size(); ++i) {
    const auto lang = mtlab::cipher_language(mtlab::synthetic_language_codes()[i % 5]);
    out.push_back(mtlab::encipher(english[i], lang));
  }
  return out;
}

SubwordTokenizer tagged(const std::vector<std::string>& corpus, std::size_t vocab) {
  return SubwordTokenizer::train(corpus, vocab, {"#hi#>", "#mr#>", "#en#>"});
}

TEST(Tokenizer, SingleMergeExample) {
  const std::vector<std::string> corpus{"abab"};
  const auto tok = SubwordTokenizer::train(corpus, 5 + 2 + 1, {});
  ASSERT_EQ(tok.merges().size(), 1u);
  EXPECT_EQ(tok.merges()[0], (SubwordTokenizer::Merge{"a", "b"}));
  const auto ids = tok.encode("abab");
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_EQ(tok.piece(ids[0]), "ab");
  EXPECT_EQ(ids[0], ids[1]);
}

TEST(Tokenizer, DegenerateCorpus) {
  const std::vector<std::string> corpus{"a"};
  const auto tok = SubwordTokenizer::train(corpus, 100, {});
  EXPECT_EQ(tok.vocab_size(), 6u);
  EXPECT_TRUE(tok.merges().empty());
  EXPECT_TRUE(tok.find("a").has_value());
}

TEST(Tokenizer, TrainingErrors) {
  EXPECT_THROW(SubwordTokenizer::train({}, 100, {}), mtlab::Error);
  const std::vector<std::string> corpus{"abc"};
  EXPECT_THROW(SubwordTokenizer::train(corpus, 7, {}), mtlab::Error);
}

TEST(Tokenizer, TrainingIsDeterministic) {
  const auto corpus = corpus_sentences(200, 3);
  EXPECT_EQ(tagged(corpus, 400).merges(), tagged(corpus, 400).merges());
}

TEST(Tokenizer, MatchesReferenceTrainer) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto corpus = corpus_sentences(60, seed);
    const auto tok = tagged(corpus, 300);
    EXPECT_EQ(tok.merges(), naive_bpe(corpus, 8, 300)) << "seed " << seed;
  }
}

TEST(Tokenizer, SpecialIdsFixed) {
  const auto tok = tagged(corpus_sentences(20, 1), 200);
  EXPECT_EQ(tok.piece(mtlab::kPadId), "<pad>");
  EXPECT_EQ(tok.piece(mtlab::kBosId), "<s>");
  EXPECT_EQ(tok.piece(mtlab::kEosId), "</s>");
  EXPECT_EQ(tok.piece(mtlab::kUnkId), "<unk>");
  EXPECT_EQ(tok.piece(mtlab::kSepId), "<sep>");
  EXPECT_EQ(tok.tag_id("hi"), 5);
  EXPECT_EQ(tok.tag_id("mr"), 6);
  EXPECT_EQ(tok.tag_id("en"), 7);
}

TEST(Tokenizer, EncodeExamples) {
  const auto tok = tagged({"xy yx", "xxyy"}, 30);
  EXPECT_TRUE(tok.encode("").empty());
  const auto ids = tok.encode("x#hi#>y");
  EXPECT_EQ(std::count(ids.begin(), ids.end(), tok.tag_id("hi")), 1);
  const std::string joined = tok.decode(ids);
  EXPECT_EQ(joined, "x#hi#>y");
  EXPECT_EQ(tok.encode("q"), std::vector<TokenId>{mtlab::kUnkId});
}

TEST(Tokenizer, DecodeExamples) {
  const auto tok = SubwordTokenizer::train(std::vector<std::string>{"abab"}, 8, {});
  EXPECT_EQ(tok.decode(std::vector<TokenId>{}), "");
  const TokenId ab = *tok.find("ab");
  EXPECT_EQ(tok.decode(std::vector<TokenId>{mtlab::kBosId, ab, mtlab::kEosId}), "ab");
  EXPECT_THROW(tok.decode(std::vector<TokenId>{999}), mtlab::Error);
}

TEST(Tokenizer, RoundTripOverThousandSentences) {
  const auto train = corpus_sentences(400, 5);
  const auto tok = tagged(train, 500);
  const auto test = corpus_sentences(1000, 77);
  for (const auto& s : test) {
    const auto ids = tok.encode(s);
    ASSERT_EQ(std::count(ids.begin(), ids.end(), mtlab::kUnkId), 0) << s;
    EXPECT_EQ(tok.decode(ids), s);
    EXPECT_EQ(tok.encode(tok.decode(ids)), ids);
  }
}

TEST(Tokenizer, RoundTripWithSpacesAndTags) {
  const auto tok = tagged(corpus_sentences(100, 2), 300);
  for (const std::string s : {" leading", "trailing ", "two  spaces", " ", "a #hi#> b", "#en#>#mr#>", "a<sep>b"}) {
    EXPECT_EQ(tok.decode(tok.encode(s)), s) << "'" << s << "'";
  }
}

TEST(Tokenizer, TagsAreAtomic) {
  const std::vector<std::string> extra{"#", ">"};
  const auto tok = SubwordTokenizer::train(corpus_sentences(200, 9), 600, {"#hi#>", "#mr#>", "#en#>"}, extra);
  std::mt19937_64 rng(4);
  const std::vector<std::string> fragments{"#", "h", "i", ">", "#hi#>", "#mr#>", " ", "a", "#en", "#>"};
  for (int trial = 0; trial < 500; ++trial) {
    std::string s;
    for (int k = 0; k < 8; ++k) s += fragments[std::uniform_int_distribution<std::size_t>(0, 9)(rng)];
    const auto ids = tok.encode(s);
    std::size_t tags_in_ids = 0;
    for (TokenId id : ids) {
      if (id >= 5 && id <= 7) {
        ++tags_in_ids;
        continue;
      }
      // Non-tag pieces must never contain a whole or partial "#xx#>" tag.
      const std::string& p = tok.piece(id);
      EXPECT_EQ(p.find("#>"), std::string::npos) << p;
    }
    std::size_t tags_in_text = 0;
    for (std::size_t pos = 0; (pos = s.find("#>", pos)) != std::string::npos; pos += 2) {
      if (pos >= 3 && (s.compare(pos - 3, 5, "#hi#>") == 0 || s.compare(pos - 3, 5, "#mr#>") == 0 ||
                       s.compare(pos - 3, 5, "#en#>") == 0))
        ++tags_in_text;
    }
    EXPECT_EQ(tags_in_ids, tags_in_text) << s;
    EXPECT_EQ(tok.decode(ids), s);
  }
}

TEST(Tokenizer, VocabularyIsBijective) {
  const auto tok = tagged(corpus_sentences(300, 8), 700);
  std::set<std::string> seen;
  for (std::size_t id = 0; id < tok.vocab_size(); ++id) {
    const std::string& p = tok.piece(static_cast<TokenId>(id));
    EXPECT_TRUE(seen.insert(p).second) << "duplicate piece " << p;
    EXPECT_EQ(tok.find(p), static_cast<TokenId>(id));
  }
}

TEST(Tokenizer, MergesNeverProduceSpecials) {
  const auto tok = SubwordTokenizer::train(std::vector<std::string>{"#hi#> #hi#>", "#hi#>#hi#>"}, 60, {"#hi#>"});
  for (const auto& m : tok.merges()) EXPECT_NE(m.first + m.second, "#hi#>");
}

TEST(Tokenizer, SaveLoadIsExact) {
  const auto tok = tagged(corpus_sentences(200, 12), 500);
  const auto path = std::filesystem::temp_directory_path() / "mtlab_test_tok.bpe";
  tok.save(path);
  const auto loaded = SubwordTokenizer::load(path);
  EXPECT_EQ(loaded, tok);
  EXPECT_EQ(loaded.serialize(), tok.serialize());
  EXPECT_EQ(tok.serialize().substr(0, 7), "BPE v1\n");
  for (const auto& s : corpus_sentences(200, 13)) EXPECT_EQ(loaded.encode(s), tok.encode(s));
  std::filesystem::remove(path);
}

TEST(Tokenizer, NewlineInAlphabetSurvivesSerialization) {
  const std::vector<std::string> extra{"\n", "\t"};
  const auto tok = SubwordTokenizer::train(std::vector<std::string>{"ab\nab\tab"}, 40, {"#en#>"}, extra);
  const auto back = SubwordTokenizer::parse(tok.serialize());
  EXPECT_EQ(back, tok);
  EXPECT_EQ(back.decode(back.encode("a\nb\t")), "a\nb\t");
}

TEST(Tokenizer, UnknownTagListsRegistered) {
  const auto tok = tagged({"abc"}, 20);
  try {
    tok.tag_id("zz");
    FAIL();
  } catch (const mtlab::Error& e) {
    EXPECT_NE(std::string(e.what()).find("#hi#>"), std::string::npos);
  }
}

TEST(Tokenizer, ParseRejectsBadHeader) { EXPECT_THROW(SubwordTokenizer::parse("BPE v2\n"), mtlab::Error); }

}  // namespace
