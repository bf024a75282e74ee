#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "mtlab/metrics.h"
#include "mtlab/tokenizer.h"

namespace {

using mtlab::Tokens;

Tokens toks(const std::string& s) { return mtlab::metric_tokens(s); }
std::vector<Tokens> corpus(std::initializer_list<const char*> lines) {
  std::vector<Tokens> out;
  for (const char* l : lines) out.push_back(toks(l));
  return out;
}

// Straight from the definition: count n-grams with maps, clip, combine.
double reference_bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs) {
  double log_sum = 0.0;
  double c = 0, r = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) c += static_cast<double>(hyps[i].size()), r += static_cast<double>(refs[i].size());
  for (std::size_t n = 1; n <= 4; ++n) {
    double match = 0, total = 0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      std::map<Tokens, int> h, rf;
      for (std::size_t k = 0; k + n <= hyps[i].size(); ++k) ++h[Tokens(hyps[i].begin() + k, hyps[i].begin() + k + n)];
      for (std::size_t k = 0; k + n <= refs[i].size(); ++k) ++rf[Tokens(refs[i].begin() + k, refs[i].begin() + k + n)];
      for (const auto& [g, cnt] : h) {
        total += cnt;
        match += std::min(cnt, rf.count(g) ? rf[g] : 0);
      }
    }
    if (match == 0 || total == 0) return 0.0;
    log_sum += std::log(match / total) / 4.0;
  }
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return 100.0 * bp * std::exp(log_sum);
}

std::vector<std::string> code_points_no_space(const std::string& s) {
  std::vector<std::string> out;
  for (auto& cp : mtlab::utf8_symbols(s))
    if (cp != " " && cp != "\t" && cp != "\n") out.push_back(cp);
  return out;
}

double reference_chrf(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  double p_sum = 0, r_sum = 0;
  int orders = 0;
  for (std::size_t n = 1; n <= 6; ++n) {
    double match = 0, h_total = 0, r_total = 0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      const auto h = code_points_no_space(hyps[i]), r = code_points_no_space(refs[i]);
      std::map<std::vector<std::string>, int> hc, rc;
      for (std::size_t k = 0; k + n <= h.size(); ++k) ++hc[{h.begin() + k, h.begin() + k + n}];
      for (std::size_t k = 0; k + n <= r.size(); ++k) ++rc[{r.begin() + k, r.begin() + k + n}];
      for (const auto& [g, cnt] : hc) h_total += cnt, match += std::min(cnt, rc.count(g) ? rc[g] : 0);
      for (const auto& [g, cnt] : rc) r_total += cnt;
    }
    if (r_total == 0) continue;
    ++orders;
    p_sum += h_total > 0 ? match / h_total : 0.0;
    r_sum += match / r_total;
  }
  if (orders == 0) return 0.0;
  const double p = p_sum / orders, r = r_sum / orders;
  if (p + r == 0) return 0.0;
  return 100.0 * 5.0 * p * r / (4.0 * p + r);
}

std::vector<std::string> random_sentences(std::mt19937_64& rng, std::size_t n) {
  const std::vector<std::string> words{"a", "b", "c", "d", "ab", "ba", "cd", "e"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string s;
    const std::size_t len = std::uniform_int_distribution<std::size_t>(1, 9)(rng);
    for (std::size_t k = 0; k < len; ++k) {
      if (k) s += ' ';
      s += words[std::uniform_int_distribution<std::size_t>(0, words.size() - 1)(rng)];
    }
    out.push_back(s);
  }
  return out;
}

TEST(Bleu, HandExamples) {
  const auto r = corpus({"a b c d e"});
  EXPECT_NEAR(mtlab::bleu(corpus({"a b c d"}), r), 100.0 * std::exp(-0.25), 1e-9);
  EXPECT_NEAR(mtlab::bleu(corpus({"a b c d"}), r), 77.880, 0.001);
  EXPECT_DOUBLE_EQ(mtlab::bleu(r, r), 100.0);
  EXPECT_EQ(mtlab::bleu(corpus({"x y z w"}), r), 0.0);
}

TEST(Bleu, Errors) {
  EXPECT_THROW(mtlab::bleu(corpus({"a"}), corpus({"a", "b"})), mtlab::Error);
  EXPECT_THROW(mtlab::bleu(std::vector<Tokens>{}, std::vector<Tokens>{}), mtlab::Error);
}

TEST(Bleu, MatchesReferenceImplementation) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto h = random_sentences(rng, 5), r = random_sentences(rng, 5);
    std::vector<Tokens> ht, rt;
    for (const auto& s : h) ht.push_back(toks(s));
    for (const auto& s : r) rt.push_back(toks(s));
    EXPECT_NEAR(mtlab::bleu(ht, rt), reference_bleu(ht, rt), 1e-9);
  }
}

TEST(Bleu, SmoothingOnlyAffectsZeroCounts) {
  const auto h = corpus({"a b x y"}), r = corpus({"a b c d"});
  EXPECT_EQ(mtlab::bleu(h, r), 0.0);
  EXPECT_GT(mtlab::bleu(h, r, true), 0.0);
  EXPECT_LE(mtlab::bleu(h, r, true), 100.0);
}

TEST(Chrf, HandExamples) {
  const std::vector<std::string> ab{"ab"}, ac{"ac"}, same{"hello world"}, other{"xyz"};
  EXPECT_NEAR(mtlab::chrf(ab, ac), 25.0, 1e-9);
  EXPECT_DOUBLE_EQ(mtlab::chrf(same, same), 100.0);
  EXPECT_EQ(mtlab::chrf(same, other), 0.0);
}

TEST(Chrf, MatchesReferenceImplementation) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto h = random_sentences(rng, 4), r = random_sentences(rng, 4);
    EXPECT_NEAR(mtlab::chrf(h, r), reference_chrf(h, r), 1e-9);
  }
}

TEST(Chrf, WhitespaceInsensitive) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto h = random_sentences(rng, 3), r = random_sentences(rng, 3);
    const double base = mtlab::chrf(h, r);
    for (auto& s : h) s = " " + s + "  ";
    for (auto& s : r) s.insert(s.size() / 2, " ");
    EXPECT_DOUBLE_EQ(mtlab::chrf(h, r), base);
  }
}

TEST(Ter, HandExamples) {
  EXPECT_NEAR(mtlab::ter(corpus({"a b c d"}), corpus({"a b c"})), 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(mtlab::ter(corpus({"c a b"}), corpus({"a b c"})), 1.0 / 3.0, 1e-12);
  EXPECT_EQ(mtlab::ter(corpus({"a b c"}), corpus({"a b c"})), 0.0);
  EXPECT_EQ(mtlab::ter_edits(toks("c a b"), toks("a b c")), 1u);
  EXPECT_THROW(mtlab::ter(corpus({"a"}), std::vector<Tokens>{Tokens{}}), mtlab::Error);
}

TEST(Ter, CanExceedOne) {
  EXPECT_GT(mtlab::ter(corpus({"x y z w v"}), corpus({"a"})), 1.0);
}

TEST(Ter, BoundsAndZeroIffEqual) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    const auto h = toks(random_sentences(rng, 1)[0]);
    const auto r = trial % 5 == 0 ? h : toks(random_sentences(rng, 1)[0]);
    const std::size_t edits = mtlab::ter_edits(h, r), lev = mtlab::edit_distance(h, r);
    EXPECT_LE(edits, lev);
    EXPECT_EQ(edits == 0, h == r);
    // A shift costs one edit and can remove at most two per moved token.
    EXPECT_GE(edits, lev / (2 * 10 + 1));
  }
}

TEST(Ter, BlockShift) {
  // Moving the block "d e" to the front fixes four errors for one shift.
  EXPECT_EQ(mtlab::ter_edits(toks("a b c d e"), toks("d e a b c")), 1u);
  EXPECT_EQ(mtlab::edit_distance(toks("a b c d e"), toks("d e a b c")), 4u);
}

TEST(EditDistance, Examples) {
  EXPECT_EQ(mtlab::edit_distance(toks("a b c"), toks("a c")), 1u);
  EXPECT_EQ(mtlab::edit_distance(toks(""), toks("a b")), 2u);
  EXPECT_EQ(mtlab::edit_distance(toks("x y"), toks("a b")), 2u);
}

TEST(Metrics, PermutationInvariantAndPure) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    auto h = random_sentences(rng, 6), r = random_sentences(rng, 6);
    const auto a = mtlab::score_corpus(h, r);
    std::vector<std::size_t> perm{0, 1, 2, 3, 4, 5};
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::string> hp, rp;
    for (auto i : perm) hp.push_back(h[i]), rp.push_back(r[i]);
    const auto b = mtlab::score_corpus(hp, rp);
    EXPECT_NEAR(a.bleu, b.bleu, 1e-9);
    EXPECT_NEAR(a.chrf, b.chrf, 1e-9);
    EXPECT_NEAR(a.ter, b.ter, 1e-12);
    const auto c = mtlab::score_corpus(h, r);
    EXPECT_EQ(a.bleu, c.bleu);
    EXPECT_EQ(a.chrf, c.chrf);
    EXPECT_EQ(a.ter, c.ter);
    EXPECT_GE(a.bleu, 0.0);
    EXPECT_LE(a.bleu, 100.0);
    EXPECT_GE(a.chrf, 0.0);
    EXPECT_LE(a.chrf, 100.0);
  }
}

TEST(Metrics, NfcNormalisation) {
  // "é" precomposed vs "e" + combining acute.
  const std::vector<std::string> h{"caf\xC3\xA9"}, r{"cafe\xCC\x81"};
  EXPECT_EQ(mtlab::normalize_nfc(r[0]), h[0]);
  const auto s = mtlab::score_corpus(h, r);
  EXPECT_DOUBLE_EQ(s.chrf, 100.0);
  EXPECT_EQ(s.ter, 0.0);
}

TEST(Buckets, Examples) {
  const std::vector<std::size_t> lengths{5, 15, 25}, edges{10, 20};
  const auto b = mtlab::bucket_by_length(lengths, edges);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0], std::vector<std::size_t>{0});
  EXPECT_EQ(b[1], std::vector<std::size_t>{1});
  EXPECT_EQ(b[2], std::vector<std::size_t>{2});
  const auto single = mtlab::bucket_by_length(lengths, {});
  ASSERT_EQ(single.size(), 1u);
  EXPECT_EQ(single[0].size(), 3u);
  const std::vector<std::size_t> bad{10, 10};
  EXPECT_THROW(mtlab::bucket_by_length(lengths, bad), mtlab::Error);
  EXPECT_EQ(mtlab::bucket_label(edges, 0), "[0,10)");
  EXPECT_EQ(mtlab::bucket_label(edges, 2), "[20,inf)");
}

TEST(Buckets, PartitionProperty) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::size_t> lengths(30), edges;
    for (auto& l : lengths) l = std::uniform_int_distribution<std::size_t>(0, 40)(rng);
    std::size_t e = 0;
    const std::size_t n_edges = std::uniform_int_distribution<std::size_t>(0, 4)(rng);
    for (std::size_t i = 0; i < n_edges; ++i) edges.push_back(e += std::uniform_int_distribution<std::size_t>(1, 12)(rng));
    const auto buckets = mtlab::bucket_by_length(lengths, edges);
    EXPECT_EQ(buckets.size(), edges.size() + 1);
    std::vector<int> seen(lengths.size(), 0);
    for (std::size_t b = 0; b < buckets.size(); ++b) {
      for (std::size_t i : buckets[b]) {
        ++seen[i];
        if (b > 0) EXPECT_GE(lengths[i], edges[b - 1]);
        if (b < edges.size()) EXPECT_LT(lengths[i], edges[b]);
      }
    }
    for (int s : seen) EXPECT_EQ(s, 1);
  }
}

TEST(Report, JsonRoundTripAndBuckets) {
  const std::vector<std::string> h{"a b c", "d e", "f"}, r{"a b c", "d x", "f"};
  const std::vector<std::size_t> lengths{3, 12, 30}, edges{10, 20};
  const auto rep = mtlab::build_report("en-hi", "beam_width=4", h, r, lengths, edges);
  ASSERT_EQ(rep.buckets.size(), 3u);
  EXPECT_EQ(rep.overall.n_segments, 3u);
  EXPECT_EQ(rep.overall.ref_tokens, 6u);
  EXPECT_DOUBLE_EQ(rep.buckets[0].scores->bleu, 0.0);  // "a b c" has no 4-gram
  EXPECT_EQ(rep.buckets[1].scores->ter, 0.5);
  const auto back = mtlab::report_from_json(mtlab::to_json_value(rep));
  EXPECT_EQ(mtlab::to_json_value(back).dump(), mtlab::to_json_value(rep).dump());
  const auto empty = mtlab::build_report("en-hi", "", h, r, lengths, std::vector<std::size_t>{1, 2});
  EXPECT_FALSE(empty.buckets[1].scores.has_value());
}

}  // namespace
