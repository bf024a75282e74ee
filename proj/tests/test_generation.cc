#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "mtlab/generation.h"
#include "mtlab/synthetic.h"
#include "oracles.h"

namespace {

using mtlab::GenerationConfig;
using mtlab::TokenId;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Next-token distribution chosen by a callback on the prefix.
class FnScorer : public mtlab::NextTokenScorer {
 public:
  FnScorer(std::size_t vocab, std::size_t room, std::function<std::vector<double>(const std::vector<TokenId>&)> fn)
      : vocab_(vocab), room_(room), fn_(std::move(fn)) {}
  std::size_t vocab_size() const override { return vocab_; }
  std::size_t room() const override { return room_; }
  std::vector<std::vector<double>> next_log_probs(std::span<const std::vector<TokenId>> prefixes) const override {
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) out.push_back(fn_(p));
    return out;
  }

 private:
  std::size_t vocab_, room_;
  std::function<std::vector<double>(const std::vector<TokenId>&)> fn_;
};

std::vector<double> one_hot_log(std::size_t vocab, TokenId id) {
  std::vector<double> lp(vocab, kNegInf);
  lp[static_cast<std::size_t>(id)] = 0.0;
  return lp;
}

GenerationConfig config(std::size_t beam, double alpha, std::size_t max_new) {
  GenerationConfig gc;
  gc.beam_width = beam;
  gc.length_penalty = alpha;
  gc.max_new_tokens = max_new;
  return gc;
}

TEST(GenerationConfig, Validation) {
  EXPECT_THROW(config(0, 0.6, 4).validate(), mtlab::Error);
  EXPECT_THROW(config(1, -1, 4).validate(), mtlab::Error);
  EXPECT_THROW(config(1, 0.6, 0).validate(), mtlab::Error);
}

TEST(Greedy, EosStubGivesEmptyOutput) {
  const FnScorer s(6, 10, [](const auto&) { return one_hot_log(6, mtlab::kEosId); });
  EXPECT_TRUE(mtlab::greedy_decode(s, config(1, 0.6, 5)).empty());
  EXPECT_TRUE(mtlab::beam_search(s, config(3, 0.6, 5)).empty());
}

TEST(Greedy, ScriptedCycleDecodesToText) {
  const auto tok = mtlab::SubwordTokenizer::train(std::vector<std::string>{"ab"}, 7, {});
  const TokenId a = *tok.find("a"), b = *tok.find("b");
  const FnScorer s(tok.vocab_size(), 10, [&](const std::vector<TokenId>& p) {
    const TokenId cycle[] = {a, b, mtlab::kEosId};
    return one_hot_log(tok.vocab_size(), cycle[p.size() % 3]);
  });
  const auto ids = mtlab::greedy_decode(s, config(1, 0.0, 10));
  EXPECT_EQ(tok.decode(ids), "ab");
}

TEST(Greedy, TiesGoToLowestIdAndPadIsNeverChosen) {
  const FnScorer s(5, 10, [](const std::vector<TokenId>& p) {
    if (p.size() == 2) return one_hot_log(5, mtlab::kEosId);
    return std::vector<double>{0.0, std::log(0.25), std::log(0.25), std::log(0.25), std::log(0.25)};
  });
  const auto ids = mtlab::greedy_decode(s, config(1, 0.0, 10));
  EXPECT_EQ(ids, (std::vector<TokenId>{1, 1}));
}

TEST(Greedy, RespectsBudgetAndRoom) {
  const FnScorer s(5, 3, [](const auto&) { return std::vector<double>{kNegInf, 0.0, kNegInf, kNegInf, kNegInf}; });
  EXPECT_EQ(mtlab::greedy_decode(s, config(1, 0.6, 10)).size(), 3u);
  EXPECT_EQ(mtlab::greedy_decode(s, config(1, 0.6, 2)).size(), 2u);
  EXPECT_EQ(mtlab::beam_search(s, config(4, 0.6, 10)).size(), 3u);
  const FnScorer none(5, 0, [](const auto&) { return std::vector<double>(5, 0.0); });
  EXPECT_THROW(mtlab::greedy_decode(none, config(1, 0.6, 10)), mtlab::Error);
}

TEST(Beam, WidthOneEqualsGreedyOnScriptedModels) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const oracle::ScriptedScorer s(5, 6, seed);
    for (double alpha : {0.0, 0.6, 1.0}) {
      const auto gc = config(1, alpha, 6);
      EXPECT_EQ(mtlab::beam_search(s, gc), mtlab::greedy_decode(s, gc)) << "seed " << seed;
    }
  }
}

TEST(Beam, ExhaustiveWidthFindsGlobalOptimum) {
  std::mt19937_64 rng(8);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t real = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
    const std::size_t L = std::uniform_int_distribution<std::size_t>(1, 4)(rng);
    const oracle::ScriptedScorer s(real + 1, 10, 1000 + seed);
    std::size_t width = 1;
    for (std::size_t i = 0; i < L; ++i) width *= real;
    auto gc = config(width, 0.0, L);
    const auto want = oracle::exhaustive_best(s, L, gc.stop_tokens, 0.0);
    EXPECT_EQ(mtlab::beam_search(s, gc), want) << "seed " << seed << " |V|=" << real << " L=" << L;
  }
}

TEST(Beam, ExhaustiveWidthWithLengthPenalty) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const oracle::ScriptedScorer s(5, 10, 5000 + seed);
    const auto gc = config(256, 0.6, 4);
    EXPECT_EQ(mtlab::beam_search(s, gc), oracle::exhaustive_best(s, 4, gc.stop_tokens, 0.6)) << "seed " << seed;
  }
}

// Wider beams can never do worse than a width that already covers the whole
// search space, and nothing beats that width.
TEST(Beam, NoWidthBeatsExhaustiveSearch) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const oracle::ScriptedScorer s(5, 10, 9000 + seed);
    const double best = mtlab::beam_search_hypothesis(s, config(256, 0.0, 4)).score;
    for (std::size_t w = 1; w <= 8; ++w) {
      const auto h = mtlab::beam_search_hypothesis(s, config(w, 0.0, 4));
      if (h.finished) EXPECT_LE(h.score, best) << "seed " << seed << " width " << w;
    }
  }
}

// A case where width 2 scores below width 1: the greedy path survives at width
// 1 but is pruned at width 2 by two siblings whose futures are poor.
TEST(Beam, WiderBeamCanScoreLowerAtAlphaZero) {
  // Ids: 1 = a, 2 = EOS, 3 = b, 4 = c.
  const FnScorer s(5, 10, [](const std::vector<TokenId>& p) {
    std::vector<double> lp(5, std::log(1e-9));
    lp[0] = kNegInf;
    auto set = [&](TokenId t, double prob) { lp[static_cast<std::size_t>(t)] = std::log(prob); };
    if (p.empty()) {
      set(1, 0.5), set(3, 0.45);  // a vs b
    } else if (p == std::vector<TokenId>{1}) {
      set(4, 0.3);  // a -> c (best continuation is still weak)
    } else if (p == std::vector<TokenId>{3}) {
      set(1, 0.5), set(3, 0.45);  // b -> a, b -> b
    } else if (p == std::vector<TokenId>{1, 4}) {
      set(2, 1.0);
    } else {
      set(2, 1e-6);  // every other path ends badly
    }
    return lp;
  });
  const auto narrow = mtlab::beam_search_hypothesis(s, config(1, 0.0, 3));
  const auto wide = mtlab::beam_search_hypothesis(s, config(2, 0.0, 3));
  const auto full = mtlab::beam_search_hypothesis(s, config(64, 0.0, 3));
  EXPECT_EQ(narrow.tokens, (std::vector<TokenId>{1, 4, 2}));
  EXPECT_LT(wide.score, narrow.score);
  EXPECT_GE(full.score, narrow.score);
}

TEST(Beam, DeterministicAndNoPad) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const oracle::ScriptedScorer s(6, 7, seed);
    const auto gc = config(3, 0.6, 7);
    const auto a = mtlab::beam_search(s, gc), b = mtlab::beam_search(s, gc);
    EXPECT_EQ(a, b);
    EXPECT_LE(a.size(), 7u);
    EXPECT_EQ(std::count(a.begin(), a.end(), mtlab::kPadId), 0);
  }
}

// Real models with random weights: greedy and width-1 beam agree for both
// architectures.
TEST(Beam, WidthOneEqualsGreedyOnRandomModels) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    mtlab::ModelConfig c;
    c.architecture = trial % 2 ? mtlab::Architecture::kEncoderDecoder : mtlab::Architecture::kDecoderOnly;
    c.vocab_size = 9;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_layers = 1;
    c.n_enc_layers = 1;
    c.n_dec_layers = 1;
    c.d_ff = 8;
    c.max_seq_len = 12;
    c.seed = static_cast<std::uint64_t>(trial);
    auto m = mtlab::build_model(c);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& p : m.parameters()) {
      mtlab::Tensor t = p.tensor;
      for (double& v : t.mutable_data()) v += normal(rng);
    }
    std::vector<TokenId> cond(3);
    for (auto& id : cond) id = std::uniform_int_distribution<TokenId>(3, 8)(rng);
    const auto gc = config(1, 0.6, 6);
    const auto g = mtlab::greedy_decode(m, cond, gc);
    EXPECT_EQ(mtlab::beam_search(m, cond, gc), g) << "trial " << trial;
    EXPECT_LE(g.size(), 6u);
    EXPECT_EQ(std::count(g.begin(), g.end(), mtlab::kPadId), 0);
  }
}

TEST(Generation, NoRoomIsError) {
  mtlab::ModelConfig c;
  c.vocab_size = 9;
  c.d_model = 8;
  c.n_heads = 2;
  c.max_seq_len = 4;
  const auto m = mtlab::build_model(c);
  const std::vector<TokenId> prompt{3, 4, 5, 6};
  EXPECT_THROW(mtlab::greedy_decode(m, prompt, config(1, 0, 2)), mtlab::Error);
}

TEST(ExtractCompletion, Examples) {
  const std::vector<std::string> corpus{"नमस्ते नमस्ते", "abc"};
  const auto tok = mtlab::SubwordTokenizer::train(corpus, 40, {"#hi#>"});
  const auto word = tok.encode("नमस्ते");
  std::vector<TokenId> seq = tok.encode("abc");
  const std::size_t prompt_len = seq.size();
  seq.insert(seq.end(), word.begin(), word.end());
  seq.push_back(mtlab::kEosId);
  seq.push_back(*tok.find("a"));
  EXPECT_EQ(mtlab::extract_completion(seq, prompt_len, tok), "नमस्ते");
  EXPECT_EQ(mtlab::extract_completion(seq, 0, tok), "abcनमस्ते");
  const std::vector<TokenId> stop_first{mtlab::kEosId, *tok.find("a")};
  EXPECT_EQ(mtlab::extract_completion(stop_first, 0, tok), "");
  EXPECT_THROW(mtlab::extract_completion(stop_first, 3, tok), mtlab::Error);
}

}  // namespace
