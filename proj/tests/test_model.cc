#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "mtlab/checkpoint.h"
#include "mtlab/model.h"
#include "oracles.h"

namespace {

using mtlab::Architecture;
using mtlab::ModelConfig;
using mtlab::TokenId;

ModelConfig small(Architecture arch, std::uint64_t seed = 1) {
  ModelConfig c;
  c.architecture = arch;
  c.vocab_size = 13;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.n_enc_layers = 2;
  c.n_dec_layers = 1;
  c.d_ff = 12;
  c.max_seq_len = 10;
  c.seed = seed;
  return c;
}

std::vector<TokenId> random_ids(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = std::uniform_int_distribution<TokenId>(0, static_cast<TokenId>(vocab) - 1)(rng);
  return ids;
}

ModelConfig random_config(std::mt19937_64& rng) {
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  ModelConfig c;
  c.architecture = pick(0, 1) ? Architecture::kEncoderDecoder : Architecture::kDecoderOnly;
  c.n_heads = pick(1, 4);
  c.d_model = c.n_heads * pick(1, 4);
  c.vocab_size = pick(6, 40);
  c.n_layers = pick(0, 3);
  c.n_enc_layers = pick(0, 3);
  c.n_dec_layers = pick(0, 3);
  c.d_ff = pick(1, 24);
  c.max_seq_len = pick(2, 12);
  c.tie_embeddings = pick(0, 1) == 1;
  c.learned_positions = pick(0, 1) == 1;
  c.seed = pick(0, 1000);
  return c;
}

TEST(ModelConfig, RejectsIndivisibleHeads) {
  ModelConfig c = small(Architecture::kDecoderOnly);
  c.d_model = 8;
  c.n_heads = 3;
  EXPECT_THROW(mtlab::build_model(c), mtlab::Error);
}

TEST(ModelConfig, ReportsEveryProblem) {
  ModelConfig c;
  c.vocab_size = 3;
  c.max_seq_len = 1;
  c.d_model = 10;
  c.n_heads = 4;
  EXPECT_GE(c.problems().size(), 3u);
}

TEST(ModelConfig, JsonRoundTrip) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 10; ++i) {
    const ModelConfig c = random_config(rng);
    EXPECT_EQ(nlohmann::json(c).get<ModelConfig>(), c);
  }
}

TEST(Model, SameSeedSameParameters) {
  const auto a = mtlab::build_model(small(Architecture::kEncoderDecoder, 5));
  const auto b = mtlab::build_model(small(Architecture::kEncoderDecoder, 5));
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].name, b.parameters()[i].name);
    const auto x = a.parameters()[i].tensor.data(), y = b.parameters()[i].tensor.data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end()));
  }
}

TEST(Model, InitialisationStatistics) {
  ModelConfig c = small(Architecture::kDecoderOnly);
  c.d_model = 64;
  c.n_heads = 4;
  c.d_ff = 256;
  c.vocab_size = 200;
  const auto m = mtlab::build_model(c);
  const auto& w = m.parameter("layers.0.attn.wq");
  double s = 0.0, s2 = 0.0;
  for (double v : w.data()) s += v, s2 += v * v;
  const double n = static_cast<double>(w.numel());
  EXPECT_NEAR(s / n, 0.0, 0.002);
  EXPECT_NEAR(std::sqrt(s2 / n), 0.02, 0.001);
  for (double v : m.parameter("layers.0.ln1.gain").data()) EXPECT_EQ(v, 1.0);
  for (double v : m.parameter("layers.0.attn.bq").data()) EXPECT_EQ(v, 0.0);
}

TEST(Model, ZeroLayersIsEmbeddingAndHead) {
  ModelConfig c = small(Architecture::kDecoderOnly);
  c.n_layers = 0;
  const auto m = mtlab::build_model(c);
  EXPECT_EQ(mtlab::count_parameters(m), c.vocab_size * c.d_model + c.max_seq_len * c.d_model);
  const std::vector<TokenId> ids{1, 2};
  EXPECT_EQ(mtlab::forward_decoder_only(m, ids).rows(), 2u);
}

TEST(ParameterCount, EmbeddingsOnly) {
  ModelConfig c;
  c.vocab_size = 10;
  c.d_model = 4;
  c.n_heads = 1;
  c.n_layers = 0;
  c.learned_positions = false;
  EXPECT_EQ(mtlab::count_parameters(mtlab::build_model(c)), 40u);
}

TEST(ParameterCount, MatchesClosedFormOnRandomConfigs) {
  std::mt19937_64 rng(20);
  for (int i = 0; i < 20; ++i) {
    const ModelConfig c = random_config(rng);
    EXPECT_EQ(mtlab::count_parameters(mtlab::build_model(c)), oracle::closed_form_parameters(c))
        << nlohmann::json(c).dump();
  }
}

TEST(Forward, MatchesNaiveReferenceDecoderOnly) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig c = small(Architecture::kDecoderOnly, static_cast<std::uint64_t>(trial));
    c.d_model = 16;
    c.n_heads = 4;
    c.tie_embeddings = trial % 2 == 0;
    const auto m = mtlab::build_model(c);
    const auto ids = random_ids(rng, std::uniform_int_distribution<std::size_t>(1, 8)(rng), c.vocab_size);
    const auto got = mtlab::forward_decoder_only(m, ids);
    const auto want = oracle::NaiveTransformer(m).decoder_only(ids);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t v = 0; v < c.vocab_size; ++v) EXPECT_NEAR(got.at(i, v), want[i][v], 1e-9);
  }
}

TEST(Forward, MatchesNaiveReferenceEncoderDecoder) {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig c = small(Architecture::kEncoderDecoder, static_cast<std::uint64_t>(trial));
    c.d_model = 16;
    c.n_heads = 2;
    c.n_dec_layers = 2;
    c.tie_embeddings = trial % 2 == 1;
    const auto m = mtlab::build_model(c);
    const auto src = random_ids(rng, std::uniform_int_distribution<std::size_t>(1, 8)(rng), c.vocab_size);
    const auto tgt = random_ids(rng, std::uniform_int_distribution<std::size_t>(1, 8)(rng), c.vocab_size);
    const auto got = mtlab::forward_encoder_decoder(m, src, tgt);
    const auto want = oracle::NaiveTransformer(m).encoder_decoder(src, tgt);
    for (std::size_t i = 0; i < tgt.size(); ++i)
      for (std::size_t v = 0; v < c.vocab_size; ++v) EXPECT_NEAR(got.at(i, v), want[i][v], 1e-9);
  }
}

// Random weights so attention is far from uniform.
void perturb_weights(mtlab::TranslationModel& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.5);
  for (const auto& p : m.parameters()) {
    mtlab::Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v += normal(rng);
  }
}

TEST(Causality, DecoderOnlyBitExact) {
  ModelConfig c = small(Architecture::kDecoderOnly);
  auto m = mtlab::build_model(c);
  perturb_weights(m, 3);
  std::mt19937_64 rng(40);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t len = std::uniform_int_distribution<std::size_t>(2, c.max_seq_len)(rng);
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, len - 2)(rng);
    auto a = random_ids(rng, len, c.vocab_size);
    auto b = a;
    for (std::size_t i = t + 1; i < len; ++i) b[i] = (b[i] + 1 + static_cast<TokenId>(i)) % 13;
    const auto la = mtlab::forward_decoder_only(m, a), lb = mtlab::forward_decoder_only(m, b);
    for (std::size_t i = 0; i <= t; ++i)
      for (std::size_t v = 0; v < c.vocab_size; ++v) ASSERT_EQ(la.at(i, v), lb.at(i, v));
  }
}

TEST(Causality, EncoderDecoderBitExactAndSourceReachesAllPositions) {
  ModelConfig c = small(Architecture::kEncoderDecoder);
  auto m = mtlab::build_model(c);
  perturb_weights(m, 4);
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t len = std::uniform_int_distribution<std::size_t>(2, c.max_seq_len)(rng);
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, len - 2)(rng);
    const auto src = random_ids(rng, 5, c.vocab_size);
    auto a = random_ids(rng, len, c.vocab_size);
    auto b = a;
    for (std::size_t i = t + 1; i < len; ++i) b[i] = (b[i] + 1) % 13;
    const auto la = mtlab::forward_encoder_decoder(m, src, a), lb = mtlab::forward_encoder_decoder(m, src, b);
    for (std::size_t i = 0; i <= t; ++i)
      for (std::size_t v = 0; v < c.vocab_size; ++v) ASSERT_EQ(la.at(i, v), lb.at(i, v));

    auto src2 = src;
    auto& changed_id = src2[std::uniform_int_distribution<std::size_t>(0, 4)(rng)];
    changed_id = (changed_id + 1) % 13;
    const auto lc = mtlab::forward_encoder_decoder(m, src2, a);
    for (std::size_t i = 0; i < len; ++i) {
      bool changed = false;
      for (std::size_t v = 0; v < c.vocab_size; ++v) changed |= la.at(i, v) != lc.at(i, v);
      EXPECT_TRUE(changed) << "target position " << i;
    }
  }
}

TEST(Forward, SingleTokenAndBosOnly) {
  const auto d = mtlab::build_model(small(Architecture::kDecoderOnly));
  const std::vector<TokenId> one{4};
  const auto l = mtlab::forward_decoder_only(d, one);
  EXPECT_EQ(l.rows(), 1u);
  EXPECT_EQ(l.cols(), 13u);
  const auto e = mtlab::build_model(small(Architecture::kEncoderDecoder));
  const std::vector<TokenId> src{5, 6}, bos{mtlab::kBosId};
  EXPECT_EQ(mtlab::forward_encoder_decoder(e, src, bos).rows(), 1u);
}

TEST(Forward, Errors) {
  const auto d = mtlab::build_model(small(Architecture::kDecoderOnly));
  const auto e = mtlab::build_model(small(Architecture::kEncoderDecoder));
  const std::vector<TokenId> too_long(11, 4), ok{4, 5};
  EXPECT_THROW(mtlab::forward_decoder_only(d, too_long), mtlab::Error);
  EXPECT_THROW(mtlab::forward_decoder_only(e, ok), mtlab::Error);
  EXPECT_THROW(mtlab::forward_encoder_decoder(d, ok, ok), mtlab::Error);
  EXPECT_THROW(mtlab::forward_encoder_decoder(e, too_long, ok), mtlab::Error);
}

TEST(Forward, BatchedRowsEqualSingleSequences) {
  const auto m = mtlab::build_model(small(Architecture::kDecoderOnly));
  const std::vector<std::vector<TokenId>> seqs{{1, 2, 3}, {4, 5, 6, 7, 8}};
  const auto batch = mtlab::TokenBatch::from_sequences(seqs, mtlab::kPadId);
  const auto logits = mtlab::decoder_only_logits(m, batch);
  for (std::size_t b = 0; b < 2; ++b) {
    const auto single = mtlab::forward_decoder_only(m, seqs[b]);
    for (std::size_t i = 0; i < seqs[b].size(); ++i)
      for (std::size_t v = 0; v < 13; ++v) EXPECT_EQ(logits.at(b * batch.len + i, v), single.at(i, v));
  }
}

TEST(Forward, Deterministic) {
  const auto a = mtlab::build_model(small(Architecture::kEncoderDecoder, 9));
  const auto b = mtlab::build_model(small(Architecture::kEncoderDecoder, 9));
  const std::vector<TokenId> src{5, 6, 7}, tgt{1, 8};
  const auto x = mtlab::forward_encoder_decoder(a, src, tgt), y = mtlab::forward_encoder_decoder(b, src, tgt);
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
}

TEST(Parity, ShippedConfigsWithinTwoPercent) {
  const auto read = [](const char* name) {
    std::ifstream f(std::filesystem::path(MTLAB_SOURCE_DIR) / "configs" / name);
    ModelConfig c = nlohmann::json::parse(f).at("model").get<ModelConfig>();
    return c;
  };
  const ModelConfig dec = read("parity_decoder_only.json"), enc = read("parity_encoder_decoder.json");
  ASSERT_EQ(dec.architecture, Architecture::kDecoderOnly);
  ASSERT_EQ(enc.architecture, Architecture::kEncoderDecoder);
  const double nd = static_cast<double>(mtlab::count_parameters(mtlab::build_model(dec)));
  const double ne = static_cast<double>(mtlab::count_parameters(mtlab::build_model(enc)));
  EXPECT_LT(std::abs(nd - ne) / ne, 0.02);
  EXPECT_EQ(nd, static_cast<double>(oracle::closed_form_parameters(dec)));
  EXPECT_EQ(ne, static_cast<double>(oracle::closed_form_parameters(enc)));
}

TEST(ModelCheckpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = std::filesystem::temp_directory_path() / "mtlab_test_model";
  const auto m = mtlab::build_model(small(Architecture::kEncoderDecoder, 3));
  mtlab::save_model(m, dir / "a.ckpt");
  const auto loaded = mtlab::load_model(dir / "a.ckpt");
  mtlab::save_model(loaded, dir / "b.ckpt");
  EXPECT_EQ(mtlab::read_file(dir / "a.ckpt"), mtlab::read_file(dir / "b.ckpt"));
  EXPECT_EQ(loaded.config(), m.config());
  std::filesystem::remove_all(dir);
}

}  // namespace
