#include "mtlab/metrics.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>

#include <fmt/format.h>
#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include "mtlab/common.h"
#include "mtlab/tokenizer.h"

namespace mtlab {
namespace {

template <typename A, typename B>
void check_corpus(const A& hyps, const B& refs, std::string_view metric) {
  if (hyps.size() != refs.size()) {
    throw Error(fmt::format("{}: {} hypotheses but {} references", metric, hyps.size(), refs.size()));
  }
  if (hyps.empty()) throw Error(fmt::format("{}: empty corpus", metric));
}

template <typename Seq>
std::map<Seq, std::size_t> ngram_counts(const std::vector<typename Seq::value_type>& items, std::size_t n) {
  std::map<Seq, std::size_t> counts;
  if (items.size() < n) return counts;
  for (std::size_t i = 0; i + n <= items.size(); ++i) ++counts[Seq(items.begin() + i, items.begin() + i + n)];
  return counts;
}

std::vector<std::string> strip_whitespace_symbols(std::string_view text) {
  std::vector<std::string> out;
  for (auto& s : utf8_symbols(text)) {
    if (s.size() == 1 && std::isspace(static_cast<unsigned char>(s[0]))) continue;
    out.push_back(std::move(s));
  }
  return out;
}

std::size_t levenshtein(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double bleu(std::span<const Tokens> hyps, std::span<const Tokens> refs, bool add_one_smoothing) {
  check_corpus(hyps, refs, "bleu");
  std::size_t hyp_len = 0, ref_len = 0;
  double matches[4] = {0, 0, 0, 0}, totals[4] = {0, 0, 0, 0};
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    hyp_len += hyps[s].size();
    ref_len += refs[s].size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto h = ngram_counts<Tokens>(hyps[s], n);
      const auto r = ngram_counts<Tokens>(refs[s], n);
      for (const auto& [gram, count] : h) {
        totals[n - 1] += static_cast<double>(count);
        const auto it = r.find(gram);
        if (it != r.end()) matches[n - 1] += static_cast<double>(std::min(count, it->second));
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double m = matches[n], t = totals[n];
    if (add_one_smoothing && n > 0) {
      m += 1.0;
      t += 1.0;
    }
    if (m == 0.0 || t == 0.0) return 0.0;
    log_sum += std::log(m / t);
  }
  const double bp = std::exp(std::min(0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)));
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

double chrf(std::span<const std::string> hyps, std::span<const std::string> refs, std::size_t n_max, double beta) {
  check_corpus(hyps, refs, "chrf");
  if (n_max == 0) throw Error("chrf: n_max must be >= 1");
  std::vector<double> matches(n_max, 0.0), hyp_total(n_max, 0.0), ref_total(n_max, 0.0);
  bool all_empty = true;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto h = strip_whitespace_symbols(hyps[s]);
    const auto r = strip_whitespace_symbols(refs[s]);
    all_empty = all_empty && h.empty() && r.empty();
    for (std::size_t n = 1; n <= n_max; ++n) {
      const auto hc = ngram_counts<Tokens>(h, n);
      const auto rc = ngram_counts<Tokens>(r, n);
      for (const auto& [gram, count] : hc) {
        hyp_total[n - 1] += static_cast<double>(count);
        const auto it = rc.find(gram);
        if (it != rc.end()) matches[n - 1] += static_cast<double>(std::min(count, it->second));
      }
      for (const auto& [gram, count] : rc) ref_total[n - 1] += static_cast<double>(count);
    }
  }
  double p_sum = 0.0, r_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 0; n < n_max; ++n) {
    if (ref_total[n] == 0.0) continue;
    ++orders;
    p_sum += hyp_total[n] > 0.0 ? matches[n] / hyp_total[n] : 0.0;
    r_sum += matches[n] / ref_total[n];
  }
  if (orders == 0) return all_empty ? 100.0 : 0.0;
  const double p = p_sum / static_cast<double>(orders), r = r_sum / static_cast<double>(orders);
  if (p == 0.0 && r == 0.0) return 0.0;
  const double b2 = beta * beta;
  return 100.0 * (1.0 + b2) * p * r / (b2 * p + r);
}

std::size_t edit_distance(std::span<const std::string> a, std::span<const std::string> b) {
  std::unordered_map<std::string, int> ids;
  auto encode = [&](std::span<const std::string> xs) {
    std::vector<int> out;
    for (const auto& x : xs) out.push_back(ids.emplace(x, static_cast<int>(ids.size())).first->second);
    return out;
  };
  const auto ia = encode(a), ib = encode(b);
  return levenshtein(ia, ib);
}

std::size_t ter_edits(const Tokens& hyp, const Tokens& ref, const TerLimits& limits) {
  if (ref.empty()) throw Error("ter: empty reference segment");
  std::unordered_map<std::string, int> ids;
  auto encode = [&](const Tokens& xs) {
    std::vector<int> out;
    for (const auto& x : xs) out.push_back(ids.emplace(x, static_cast<int>(ids.size())).first->second);
    return out;
  };
  std::vector<int> h = encode(hyp);
  const std::vector<int> r = encode(ref);

  std::size_t shifts = 0;
  std::size_t current = levenshtein(h, r);
  while (current > 0) {
    std::size_t best_drop = 1;
    std::vector<int> best;
    for (std::size_t len = 1; len <= limits.max_block && len <= h.size(); ++len) {
      for (std::size_t i = 0; i + len <= h.size(); ++i) {
        for (std::size_t j = 0; j + len <= r.size(); ++j) {
          if (!std::equal(h.begin() + i, h.begin() + i + len, r.begin() + j)) continue;
          const std::size_t dest = std::min(j, h.size() - len);
          if (dest == i || (dest > i ? dest - i : i - dest) > limits.max_distance) continue;
          std::vector<int> moved(h.begin(), h.begin() + i);
          moved.insert(moved.end(), h.begin() + i + len, h.end());
          moved.insert(moved.begin() + dest, h.begin() + i, h.begin() + i + len);
          const std::size_t d = levenshtein(moved, r);
          if (d >= current) continue;
          const std::size_t drop = current - d;
          // Visited in (len, start, destination) order, so the first best wins ties.
          if (drop > best_drop) {
            best_drop = drop;
            best = std::move(moved);
          }
        }
      }
    }
    if (best.empty()) break;
    h = std::move(best);
    current -= best_drop;
    ++shifts;
  }
  return shifts + current;
}

double ter(std::span<const Tokens> hyps, std::span<const Tokens> refs, const TerLimits& limits) {
  check_corpus(hyps, refs, "ter");
  std::size_t edits = 0, ref_tokens = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    edits += ter_edits(hyps[s], refs[s], limits);
    ref_tokens += refs[s].size();
  }
  return static_cast<double>(edits) / static_cast<double>(ref_tokens);
}

std::string normalize_nfc(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw Error(fmt::format("ICU NFC unavailable: {}", u_errorName(status)));
  const icu::UnicodeString in = icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  icu::UnicodeString out = nfc->normalize(in, status);
  if (U_FAILURE(status)) throw Error(fmt::format("NFC normalization failed: {}", u_errorName(status)));
  std::string result;
  out.toUTF8String(result);
  return result;
}

Tokens metric_tokens(std::string_view text) {
  const std::string norm = normalize_nfc(text);
  Tokens out;
  std::string cur;
  for (char c : norm) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

MetricScores score_corpus(std::span<const std::string> hyps, std::span<const std::string> refs,
                          const MetricOptions& options) {
  check_corpus(hyps, refs, "score");
  std::vector<Tokens> ht, rt;
  std::vector<std::string> hn, rn;
  MetricScores s;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    hn.push_back(normalize_nfc(hyps[i]));
    rn.push_back(normalize_nfc(refs[i]));
    ht.push_back(metric_tokens(hn.back()));
    rt.push_back(metric_tokens(rn.back()));
    s.ref_tokens += rt.back().size();
  }
  s.n_segments = hyps.size();
  s.bleu = bleu(ht, rt, options.bleu_smoothing);
  s.chrf = chrf(hn, rn, options.chrf_order, options.chrf_beta);
  s.ter = ter(ht, rt, options.ter_limits);
  return s;
}

std::vector<std::vector<std::size_t>> bucket_by_length(std::span<const std::size_t> lengths,
                                                       std::span<const std::size_t> edges) {
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (edges[i] <= edges[i - 1]) throw Error("bucket edges must be strictly increasing");
  }
  std::vector<std::vector<std::size_t>> buckets(edges.size() + 1);
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const auto b = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), lengths[i]) - edges.begin());
    buckets[b].push_back(i);
  }
  return buckets;
}

std::string bucket_label(std::span<const std::size_t> edges, std::size_t bucket) {
  const std::size_t lo = bucket == 0 ? 0 : edges[bucket - 1];
  if (bucket >= edges.size()) return fmt::format("[{},inf)", lo);
  return fmt::format("[{},{})", lo, edges[bucket]);
}

nlohmann::json to_json_value(const MetricScores& s) {
  return {{"bleu", s.bleu}, {"chrf", s.chrf}, {"ter", s.ter}, {"n_segments", s.n_segments},
          {"ref_tokens", s.ref_tokens}};
}

nlohmann::json to_json_value(const MetricReport& r) {
  nlohmann::json buckets = nlohmann::json::array();
  for (const auto& b : r.buckets) {
    buckets.push_back({{"label", b.label},
                       {"lo", b.lo},
                       {"hi", b.hi ? nlohmann::json(*b.hi) : nlohmann::json()},
                       {"scores", b.scores ? to_json_value(*b.scores) : nlohmann::json()}});
  }
  nlohmann::json j = to_json_value(r.overall);
  j["direction"] = r.direction;
  j["decoding"] = r.decoding;
  j["buckets"] = std::move(buckets);
  return j;
}

MetricScores scores_from_json(const nlohmann::json& j) {
  MetricScores s;
  j.at("bleu").get_to(s.bleu);
  j.at("chrf").get_to(s.chrf);
  j.at("ter").get_to(s.ter);
  j.at("n_segments").get_to(s.n_segments);
  j.at("ref_tokens").get_to(s.ref_tokens);
  return s;
}

MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.overall = scores_from_json(j);
  j.at("direction").get_to(r.direction);
  j.at("decoding").get_to(r.decoding);
  for (const auto& b : j.at("buckets")) {
    BucketReport br;
    b.at("label").get_to(br.label);
    b.at("lo").get_to(br.lo);
    if (!b.at("hi").is_null()) br.hi = b.at("hi").get<std::size_t>();
    if (!b.at("scores").is_null()) br.scores = scores_from_json(b.at("scores"));
    r.buckets.push_back(std::move(br));
  }
  return r;
}

MetricReport build_report(std::string direction, std::string decoding, std::span<const std::string> hyps,
                          std::span<const std::string> refs, std::span<const std::size_t> source_lengths,
                          std::span<const std::size_t> edges, const MetricOptions& options) {
  MetricReport report;
  report.direction = std::move(direction);
  report.decoding = std::move(decoding);
  report.overall = score_corpus(hyps, refs, options);
  if (source_lengths.size() != hyps.size()) {
    throw Error(fmt::format("build_report: {} source lengths for {} segments", source_lengths.size(), hyps.size()));
  }
  const auto buckets = bucket_by_length(source_lengths, edges);
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    BucketReport br;
    br.label = bucket_label(edges, b);
    br.lo = b == 0 ? 0 : edges[b - 1];
    if (b < edges.size()) br.hi = edges[b];
    if (!buckets[b].empty()) {
      std::vector<std::string> bh, bref;
      for (std::size_t i : buckets[b]) {
        bh.push_back(hyps[i]);
        bref.push_back(refs[i]);
      }
      br.scores = score_corpus(bh, bref, options);
    }
    report.buckets.push_back(std::move(br));
  }
  return report;
}

}  // namespace mtlab
