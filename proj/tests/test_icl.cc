#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "mtlab/checkpoint.h"
#include "mtlab/icl.h"
#include "mtlab/synthetic.h"
#include "mtlab/trainer.h"

namespace {

using mtlab::Exemplar;
using mtlab::PromptTemplate;

PromptTemplate en_hi() {
  PromptTemplate t;
  t.src_lang = "en";
  t.tgt_lang = "hi";
  return t;
}

std::vector<Exemplar> exemplars(std::size_t n, std::uint64_t seed = 1) {
  std::vector<Exemplar> out;
  for (const auto& s : mtlab::synthetic_sentences(n, seed))
    out.push_back({s, mtlab::encipher(s, mtlab::cipher_language("hi"))});
  return out;
}

TEST(Template, Validation) {
  PromptTemplate t = en_hi();
  EXPECT_TRUE(t.problems().empty());
  t.pattern = "{src} => ";
  EXPECT_THROW(t.validate(), mtlab::Error);
  t.pattern = "{tgt} <= {src}";
  EXPECT_EQ(t.problems().size(), 1u);
  t.pattern = "{src}{src}{tgt}";
  EXPECT_EQ(t.problems().size(), 1u);
  t.pattern = "{tgt}";
  EXPECT_THROW(mtlab::build_prompt({}, "q", t), mtlab::Error);
}

TEST(Template, RenderingIsByteExact) {
  const PromptTemplate t = en_hi();
  EXPECT_EQ(t.render({"the book", "BOOK"}), "the book #hi#> BOOK");
  EXPECT_EQ(t.render_query("the book"), "the book #hi#>");
  EXPECT_EQ(t.completion({"the book", "BOOK"}), " BOOK");
  PromptTemplate q = t;
  q.pattern = "[{src_lang}] {src} = [{tgt_lang}] \"{tgt}\"";
  EXPECT_EQ(q.render({"x", "y"}), "[en] x = [hi] \"y\"");
  EXPECT_EQ(q.render_query("x") + q.completion({"x", "y"}), q.render({"x", "y"}));
}

TEST(BuildPrompt, ZeroShotIsQueryRendering) {
  const PromptTemplate t = en_hi();
  const auto p = mtlab::build_prompt({}, "a river", t);
  EXPECT_EQ(p.text, t.render_query("a river"));
  EXPECT_EQ(p.n_shots, 0u);
}

TEST(BuildPrompt, ThreeShotComposition) {
  const PromptTemplate t = en_hi();
  const auto ex = exemplars(3);
  const auto p = mtlab::build_prompt(ex, "the city", t);
  const std::string want = ex[0].x + " #hi#> " + ex[0].y + "\n" + ex[1].x + " #hi#> " + ex[1].y + "\n" + ex[2].x +
                           " #hi#> " + ex[2].y + "\n" + "the city #hi#>";
  EXPECT_EQ(p.text, want);
  EXPECT_EQ(p.n_shots, 3u);
  std::size_t filled = 0;
  for (std::size_t pos = 0; (pos = p.text.find("#hi#> ", pos)) != std::string::npos; ++pos) ++filled;
  EXPECT_EQ(filled, 3u);
}

TEST(BuildPrompt, OrderSensitiveButDeterministic) {
  const PromptTemplate t = en_hi();
  auto ex = exemplars(3);
  const auto a = mtlab::build_prompt(ex, "q", t), b = mtlab::build_prompt(ex, "q", t);
  EXPECT_EQ(a.text, b.text);
  std::swap(ex[0], ex[1]);
  EXPECT_NE(mtlab::build_prompt(ex, "q", t).text, a.text);
}

TEST(BuildPrompt, ConcatenationIsAssociative) {
  std::mt19937_64 rng(3);
  std::vector<PromptTemplate> templates{en_hi()};
  PromptTemplate other = en_hi();
  other.pattern = "{src_lang}: {src}\n{tgt_lang}: {tgt}";
  other.separator = "\n\n";
  templates.push_back(other);
  for (const auto& t : templates) {
    for (int trial = 0; trial < 50; ++trial) {
      const auto ex = exemplars(std::uniform_int_distribution<std::size_t>(1, 6)(rng), static_cast<std::uint64_t>(trial));
      const std::string query = mtlab::synthetic_sentences(1, 900 + static_cast<std::uint64_t>(trial))[0];
      const std::span<const Exemplar> all(ex);
      const std::string whole = mtlab::build_prompt(all, query, t).text;
      const std::string split = t.render_exemplars(all.first(all.size() - 1)) + t.render(all.back()) + t.separator +
                                t.render_query(query);
      EXPECT_EQ(whole, split);
      for (std::size_t cut = 0; cut <= all.size(); ++cut) {
        EXPECT_EQ(whole, t.render_exemplars(all.first(cut)) + mtlab::build_prompt(all.subspan(cut), query, t).text);
      }
    }
  }
}

std::vector<mtlab::SentencePair> pool_of(std::size_t n) {
  return mtlab::synthetic_pairs("en", "hi", mtlab::synthetic_sentences(n, 2));
}

TEST(SelectExemplars, Examples) {
  const auto pool = pool_of(10);
  const auto first = mtlab::select_exemplars(pool, 3, mtlab::SelectionStrategy::kFirstK, 0);
  ASSERT_EQ(first.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(first[i], (Exemplar{pool[i].src_text, pool[i].tgt_text}));
  const auto r1 = mtlab::select_exemplars(pool, 4, mtlab::SelectionStrategy::kRandom, 7);
  const auto r2 = mtlab::select_exemplars(pool, 4, mtlab::SelectionStrategy::kRandom, 7);
  EXPECT_EQ(r1, r2);
  EXPECT_THROW(mtlab::select_exemplars(pool, 10, mtlab::SelectionStrategy::kFirstK, 0, pool[3].src_text),
               mtlab::Error);
  EXPECT_THROW(mtlab::select_exemplars(pool, 11, mtlab::SelectionStrategy::kFirstK, 0), mtlab::Error);
}

TEST(SelectExemplars, NeverIncludesQuery) {
  const auto pool = pool_of(8);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto& q = pool[seed % 8];
    for (const auto& e : mtlab::select_exemplars(pool, 5, mtlab::SelectionStrategy::kRandom, seed, q.src_text))
      EXPECT_NE(e.x, q.src_text);
  }
}

mtlab::SubwordTokenizer icl_tokenizer() {
  std::vector<std::string> corpus;
  for (const auto& p : pool_of(100)) corpus.push_back(p.src_text), corpus.push_back(p.tgt_text);
  const std::vector<std::string> extra{"\n"};
  return mtlab::SubwordTokenizer::train(corpus, 300, {"#en#>", "#hi#>"}, extra);
}

TEST(FitPrompt, AlwaysWithinBudgetDroppingOldest) {
  const auto tok = icl_tokenizer();
  const PromptTemplate t = en_hi();
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto ex = exemplars(std::uniform_int_distribution<std::size_t>(0, 6)(rng), static_cast<std::uint64_t>(trial));
    const std::string query = mtlab::synthetic_sentences(1, 500 + static_cast<std::uint64_t>(trial))[0];
    const std::size_t zero = tok.encode(mtlab::build_prompt({}, query, t).text).size();
    const std::size_t budget = zero + std::uniform_int_distribution<std::size_t>(0, 60)(rng);
    const auto p = mtlab::fit_prompt(ex, query, t, tok, budget);
    EXPECT_LE(p.token_length, budget);
    EXPECT_EQ(p.token_length, tok.encode(p.text).size());
    // The kept exemplars are the newest ones.
    EXPECT_EQ(p.text, mtlab::build_prompt(std::span(ex).last(p.n_shots), query, t).text);
    if (p.n_shots < ex.size()) {
      const auto one_more = mtlab::build_prompt(std::span(ex).last(p.n_shots + 1), query, t);
      EXPECT_GT(tok.encode(one_more.text).size(), budget);
    }
  }
  EXPECT_THROW(mtlab::fit_prompt(exemplars(2), "the long river", t, tok, 2), mtlab::Error);
}

TEST(NewlineTokens, FindsNewlinePieces) {
  const auto tok = icl_tokenizer();
  const auto ids = mtlab::newline_tokens(tok);
  ASSERT_FALSE(ids.empty());
  for (auto id : ids) EXPECT_NE(tok.piece(id).find('\n'), std::string::npos);
}

TEST(IclExample, LossOnCompletionOnly) {
  const auto tok = icl_tokenizer();
  const PromptTemplate t = en_hi();
  const auto ex = exemplars(3);
  const auto prompt = mtlab::build_prompt(std::span(ex).first(2), ex[2].x, t);
  const auto train = mtlab::make_icl_example(prompt, ex[2], t, tok);
  const auto prompt_ids = tok.encode(prompt.text);
  ASSERT_EQ(train.tag_position + 1, prompt_ids.size());
  EXPECT_EQ(tok.decode(train.tokens), prompt.text + t.completion(ex[2]));
  for (std::size_t i = 0; i < train.tokens.size(); ++i) EXPECT_EQ(train.loss_mask[i], i > train.tag_position ? 1 : 0);
}

// Memorisation: a model trained on the pool in prompt format translates pool
// sentences when prompted with three other pool pairs.
TEST(IclEvaluate, MemorisedPoolGivesPositiveBleuAndAudit) {
  const auto tok = icl_tokenizer();
  const PromptTemplate t = en_hi();
  const auto pool = mtlab::synthetic_pairs("en", "hi", mtlab::synthetic_sentences(6, 21, 2, 3));
  std::vector<mtlab::TrainingExample> data;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const auto ex = mtlab::select_exemplars(pool, 3, mtlab::SelectionStrategy::kRandom, seed * 31 + i,
                                              pool[i].src_text);
      data.push_back(mtlab::make_icl_example(mtlab::build_prompt(ex, pool[i].src_text, t),
                                             {pool[i].src_text, pool[i].tgt_text}, t, tok));
    }
  }
  mtlab::ModelConfig mc;
  mc.vocab_size = tok.vocab_size();
  mc.d_model = 32;
  mc.n_heads = 2;
  mc.n_layers = 2;
  mc.d_ff = 64;
  mc.max_seq_len = 128;
  mc.seed = 3;
  mtlab::TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.warmup_steps = 20;
  tc.batch_size = 8;
  tc.max_steps = 300;
  tc.seed = 1;
  auto state = mtlab::TrainingState::fresh(mc, tc);
  mtlab::train(state, data);

  mtlab::GenerationConfig gc;
  gc.beam_width = 1;
  gc.max_new_tokens = 24;
  mtlab::IclOptions opts;
  opts.shots = 3;
  opts.strategy = mtlab::SelectionStrategy::kRandom;
  opts.metrics.bleu_smoothing = true;
  const auto result = mtlab::icl_evaluate(state.model, pool, pool, t, tok, gc, opts);
  EXPECT_GT(result.report.overall.bleu, 0.0);
  ASSERT_EQ(result.records.size(), pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    EXPECT_EQ(result.records[i].reference, pool[i].tgt_text);
    EXPECT_EQ(result.records[i].n_shots_used, 3u);
    EXPECT_NE(result.records[i].prompt.find(pool[i].src_text + " #hi#>"), std::string::npos);
  }

  const auto again = mtlab::icl_evaluate(state.model, pool, pool, t, tok, gc, opts);
  EXPECT_EQ(mtlab::to_json_value(again.report).dump(), mtlab::to_json_value(result.report).dump());

  opts.shots = 0;
  const auto zero = mtlab::icl_evaluate(state.model, pool, pool, t, tok, gc, opts);
  EXPECT_EQ(zero.records.size(), pool.size());

  const auto path = std::filesystem::temp_directory_path() / "mtlab_icl_audit.jsonl";
  mtlab::write_icl_audit(path, result.records);
  std::ifstream f(path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("prompt").get<std::string>(), result.records[n].prompt);
    EXPECT_EQ(j.at("hypothesis").get<std::string>(), result.records[n].hypothesis);
    ++n;
  }
  EXPECT_EQ(n, pool.size());
}

TEST(IclEvaluate, Errors) {
  const auto tok = icl_tokenizer();
  mtlab::ModelConfig mc;
  mc.vocab_size = tok.vocab_size();
  mc.d_model = 8;
  mc.n_heads = 2;
  const auto model = mtlab::build_model(mc);
  mtlab::GenerationConfig gc;
  EXPECT_THROW(mtlab::icl_evaluate(model, pool_of(4), {}, en_hi(), tok, gc), mtlab::Error);
  mc.architecture = mtlab::Architecture::kEncoderDecoder;
  const auto ed = mtlab::build_model(mc);
  EXPECT_THROW(mtlab::icl_evaluate(ed, pool_of(4), pool_of(4), en_hi(), tok, gc), mtlab::Error);
}

}  // namespace
