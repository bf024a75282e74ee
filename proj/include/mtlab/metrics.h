#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace mtlab {

using Tokens = std::vector<std::string>;

// Corpus BLEU on 0-100 with clipped 1..4-gram precisions and brevity penalty
// exp(min(0, 1 - r/c)). Any zero n-gram match count gives 0 unless
// add_one_smoothing, which adds one to numerator and denominator for n >= 2.
double bleu(std::span<const Tokens> hyps, std::span<const Tokens> refs, bool add_one_smoothing = false);

// Corpus chrF on 0-100 over code points with whitespace removed. Match
// statistics are summed over segments per order; orders with no reference
// n-grams are skipped before averaging P and R.
double chrf(std::span<const std::string> hyps, std::span<const std::string> refs, std::size_t n_max = 6,
            double beta = 2.0);

struct TerLimits {
  std::size_t max_block = 10;
  std::size_t max_distance = 50;
};

// Edits for one segment: greedy block shifts, then Levenshtein distance.
// Each round applies the shift with the largest drop in edit distance (ties:
// shorter block, earlier start, earlier destination) while that drop exceeds
// the one edit the shift itself costs. A candidate moves a block of up to
// max_block tokens that also occurs in the reference so that it starts where
// that occurrence starts, at most max_distance positions away.
std::size_t ter_edits(const Tokens& hyp, const Tokens& ref, const TerLimits& limits = {});
// Total edits / total reference tokens (a ratio, not a percentage).
double ter(std::span<const Tokens> hyps, std::span<const Tokens> refs, const TerLimits& limits = {});

std::size_t edit_distance(std::span<const std::string> a, std::span<const std::string> b);

// Unicode NFC.
std::string normalize_nfc(std::string_view text);
// NFC, then split on whitespace.
Tokens metric_tokens(std::string_view text);

struct MetricScores {
  double bleu = 0.0;
  double chrf = 0.0;
  double ter = 0.0;
  std::size_t n_segments = 0;
  std::size_t ref_tokens = 0;
};

struct MetricOptions {
  bool bleu_smoothing = false;
  std::size_t chrf_order = 6;
  double chrf_beta = 2.0;
  TerLimits ter_limits;
};

// Scores raw strings after NFC + whitespace tokenization.
MetricScores score_corpus(std::span<const std::string> hyps, std::span<const std::string> refs,
                          const MetricOptions& options = {});

// Bucket i holds lengths in [edges[i-1], edges[i]); bucket 0 starts at 0 and
// the last bucket is open-ended. Returns item indices per bucket.
std::vector<std::vector<std::size_t>> bucket_by_length(std::span<const std::size_t> lengths,
                                                       std::span<const std::size_t> edges);
std::string bucket_label(std::span<const std::size_t> edges, std::size_t bucket);

struct BucketReport {
  std::string label;
  std::size_t lo = 0;
  std::optional<std::size_t> hi;  // exclusive; absent for the last bucket
  std::optional<MetricScores> scores;  // absent when the bucket is empty
};

struct MetricReport {
  std::string direction;  // "src-tgt"
  std::string decoding;   // provenance of the decoding settings
  MetricScores overall;
  std::vector<BucketReport> buckets;
};

nlohmann::json to_json_value(const MetricScores& s);
nlohmann::json to_json_value(const MetricReport& r);
MetricScores scores_from_json(const nlohmann::json& j);
MetricReport report_from_json(const nlohmann::json& j);

// Overall scores plus one BucketReport per bucket.
MetricReport build_report(std::string direction, std::string decoding, std::span<const std::string> hyps,
                          std::span<const std::string> refs, std::span<const std::size_t> source_lengths,
                          std::span<const std::size_t> edges, const MetricOptions& options = {});

}  // namespace mtlab
