#include "mtlab/report.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "json.hpp"
#include "mtlab/checkpoint.h"
#include "mtlab/common.h"
#include "mtlab/data.h"
#include "mtlab/evaluate.h"
#include "mtlab/metrics.h"

namespace mtlab {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_csv(const ReportTable& table) {
  auto field = [](const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + "\"";
  };
  auto line = [&](const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + field(cells[i]);
    return out + "\n";
  };
  std::string out = line(table.columns);
  for (const auto& row : table.rows) out += line(row);
  return out;
}

ReportTable parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string cell;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      record.push_back(std::move(cell));
      cell.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      record.push_back(std::move(cell));
      records.push_back(std::move(record));
      cell.clear();
      record.clear();
      any = false;
    } else {
      cell += c;
      any = true;
    }
  }
  if (quoted) throw Error("csv: unterminated quoted field");
  if (any || !record.empty()) {
    record.push_back(std::move(cell));
    records.push_back(std::move(record));
  }
  if (records.empty()) throw Error("csv: no header row");
  ReportTable t;
  t.columns = std::move(records.front());
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].size() != t.columns.size()) {
      throw Error(fmt::format("csv: row {} has {} fields, header has {}", i + 1, records[i].size(), t.columns.size()));
    }
    t.rows.push_back(std::move(records[i]));
  }
  return t;
}

std::string to_text(const ReportTable& table) {
  const auto arch_col = std::find(table.columns.begin(), table.columns.end(), "architecture");
  const std::size_t arch = arch_col == table.columns.end() ? table.columns.size()
                                                            : static_cast<std::size_t>(arch_col - table.columns.begin());
  std::vector<std::size_t> shown;
  for (std::size_t c = 0; c < table.columns.size(); ++c)
    if (c != arch) shown.push_back(c);

  std::vector<std::size_t> width(table.columns.size(), 0);
  for (std::size_t c : shown) {
    width[c] = count_code_points(table.columns[c]);
    for (const auto& row : table.rows) width[c] = std::max(width[c], count_code_points(row[c]));
  }
  auto render = [&](const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t i = 0; i < shown.size(); ++i) {
      const std::size_t c = shown[i];
      out += cells[c];
      if (i + 1 < shown.size()) out += std::string(width[c] - count_code_points(cells[c]) + 2, ' ');
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out + "\n";
  };
  std::size_t rule = 0;
  for (std::size_t c : shown) rule += width[c] + 2;

  std::string out;
  std::optional<std::string> group;
  for (const auto& row : table.rows) {
    const std::string g = arch < row.size() ? row[arch] : "";
    if (!group || *group != g) {
      if (group) out += "\n";
      out += fmt::format("architecture: {}\n", g.empty() ? "(unknown)" : g);
      out += render(table.columns);
      out += std::string(rule > 2 ? rule - 2 : rule, '-') + "\n";
      group = g;
    }
    out += render(row);
  }
  if (table.rows.empty()) out = render(table.columns) + "(no runs)\n";
  return out;
}

namespace {

struct Row {
  std::string architecture, regime, direction, seed, status, run;
  std::optional<MetricScores> scores;
  std::vector<BucketReport> buckets;
};

std::string num(double v) { return fmt::format("{:.4f}", v); }

json read_json(const fs::path& path) { return json::parse(read_file(path)); }

MetricOptions metric_options(const fs::path& run_dir) {
  MetricOptions o;
  const json m = read_json(run_dir / "config.resolved.json").at("metrics");
  o.bleu_smoothing = m.at("bleu_smoothing");
  o.chrf_order = m.at("chrf_order");
  o.chrf_beta = m.at("chrf_beta");
  o.ter_limits = {m.at("ter_max_block"), m.at("ter_max_distance")};
  return o;
}

std::string verify_direction(const fs::path& run_dir, const MetricReport& report) {
  const fs::path stem = run_dir / "hypotheses" / report.direction;
  const auto hyps = read_lines(fs::path(stem) += ".hyp");
  const auto refs = read_lines(fs::path(stem) += ".ref");
  const MetricScores s = score_corpus(hyps, refs, metric_options(run_dir));
  auto same = [](double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(b)); };
  if (s.n_segments != report.overall.n_segments || !same(s.bleu, report.overall.bleu) ||
      !same(s.chrf, report.overall.chrf) || !same(s.ter, report.overall.ter)) {
    return fmt::format("mismatch: stored files give bleu {} chrf {} ter {}", num(s.bleu), num(s.chrf), num(s.ter));
  }
  return "ok (verified)";
}

void rows_for_run(const fs::path& dir, const ReportOptions& options, std::vector<Row>& out, Row base = {}) {
  if (base.run.empty()) base.run = dir.filename().string();
  json record;
  try {
    record = read_json(dir / "run_record.json");
    base.run = record.at("name").get<std::string>();
    base.architecture = record.at("architecture").get<std::string>();
    base.regime = record.at("regime").get<std::string>();
    base.seed = std::to_string(record.at("seed").get<std::uint64_t>());
  } catch (const std::exception& e) {
    base.status = fmt::format("corrupt: run_record.json unreadable ({})", e.what());
    out.push_back(base);
    return;
  }
  const std::string status = record.value("status", "");
  if (status != "completed") {
    base.status = fmt::format("failed at {}", record.value("failed_stage", json("?")).is_string()
                                                  ? record["failed_stage"].get<std::string>()
                                                  : std::string("?"));
    out.push_back(base);
    return;
  }
  if (!fs::exists(dir / "metrics.json")) {
    base.status = "not evaluated";
    out.push_back(base);
    return;
  }
  try {
    const json metrics = read_json(dir / "metrics.json");
    std::vector<Row> rows;
    for (const auto& r : metrics.at("reports")) {
      Row row = base;
      const MetricReport report = report_from_json(r);
      row.direction = report.direction;
      row.scores = report.overall;
      row.buckets = report.buckets;
      row.status = options.verify ? verify_direction(dir, report) : "ok";
      rows.push_back(std::move(row));
    }
    out.insert(out.end(), rows.begin(), rows.end());
  } catch (const std::exception& e) {
    base.status = fmt::format("corrupt: metrics unreadable ({})", e.what());
    out.push_back(base);
  }
}

void rows_for_matrix(const fs::path& dir, const ReportOptions& options, std::vector<Row>& out) {
  json record;
  try {
    record = read_json(dir / "matrix_record.json");
    record.at("cells");
    record.at("runs");
  } catch (const std::exception& e) {
    Row row;
    row.run = dir.filename().string();
    row.status = fmt::format("corrupt: matrix_record.json unreadable ({})", e.what());
    out.push_back(row);
    return;
  }
  std::map<std::string, json> runs;
  for (const auto& r : record["runs"]) runs[r.value("name", "")] = r;
  for (const auto& cell : record["cells"]) {
    Row base;
    base.architecture = cell.value("architecture", "");
    base.regime = cell.value("regime", "");
    base.run = cell.value("name", "");
    if (!cell.value("enabled", false)) {
      base.status = "not run";
      out.push_back(base);
      continue;
    }
    const auto it = runs.find(base.run);
    const fs::path child = dir / (it != runs.end() ? it->second.value("dir", base.run) : base.run);
    if (!fs::exists(child / "run_record.json")) {
      base.status = "missing";
      out.push_back(base);
      continue;
    }
    rows_for_run(child, options, out, base);
  }
}

void collect(const fs::path& dir, const ReportOptions& options, std::vector<Row>& out) {
  if (fs::exists(dir / "matrix_record.json")) return rows_for_matrix(dir, options, out);
  if (fs::exists(dir / "run_record.json")) return rows_for_run(dir, options, out);
  if (!fs::is_directory(dir)) throw Error(fmt::format("report: {} is not a directory", dir.string()));
  std::vector<fs::path> children;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && (fs::exists(e.path() / "run_record.json") || fs::exists(e.path() / "matrix_record.json")))
      children.push_back(e.path());
  }
  if (children.empty()) throw Error(fmt::format("report: no run records under {}", dir.string()));
  std::sort(children.begin(), children.end());
  for (const auto& c : children) collect(c, options, out);
}

int rank_of(const std::vector<std::string>& order, const std::string& v) {
  const auto it = std::find(order.begin(), order.end(), v);
  return static_cast<int>(it - order.begin());
}

std::vector<Row> aggregate(const std::vector<Row>& rows) {
  std::vector<Row> out;
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<const Row*>> groups;
  std::vector<std::tuple<std::string, std::string, std::string>> order;
  for (const auto& r : rows) {
    if (!r.scores) {
      out.push_back(r);
      continue;
    }
    const auto key = std::make_tuple(r.architecture, r.regime, r.direction);
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(&r);
  }
  for (const auto& key : order) {
    const auto& g = groups[key];
    Row row = *g.front();
    row.seed = fmt::format("n={}", g.size());
    std::vector<std::string> runs;
    for (const Row* r : g) runs.push_back(r->run);
    row.run = fmt::format("{}", fmt::join(runs, " "));
    row.buckets.clear();
    out.push_back(row);
  }
  return out;
}

std::string summary(const std::vector<const Row*>& g, double MetricScores::*field) {
  double sum = 0.0, lo = INFINITY, hi = -INFINITY;
  for (const Row* r : g) {
    const double v = (*r->scores).*field;
    sum += v, lo = std::min(lo, v), hi = std::max(hi, v);
  }
  return fmt::format("{} [{}, {}]", num(sum / static_cast<double>(g.size())), num(lo), num(hi));
}

}  // namespace

ReportTable build_report_table(std::span<const fs::path> dirs, const ReportOptions& options) {
  std::vector<Row> rows;
  for (const auto& d : dirs) collect(d, options, rows);

  const std::vector<std::string> arch_order{"decoder_only", "encoder_decoder"};
  const std::vector<std::string> regime_order{"one_to_one", "one_to_many", "many_to_one", "many_to_many"};
  std::stable_sort(rows.begin(), rows.end(), [&](const Row& a, const Row& b) {
    return std::make_tuple(rank_of(arch_order, a.architecture), a.architecture, rank_of(regime_order, a.regime),
                           a.direction) < std::make_tuple(rank_of(arch_order, b.architecture), b.architecture,
                                                          rank_of(regime_order, b.regime), b.direction);
  });

  ReportTable t;
  t.columns = {"architecture", "regime", "direction", "seed", "bleu", "chrf", "ter"};
  std::vector<std::string> labels;
  if (options.bucket_columns && !options.aggregate_seeds) {
    for (const auto& r : rows)
      for (const auto& b : r.buckets)
        if (std::find(labels.begin(), labels.end(), b.label) == labels.end()) labels.push_back(b.label);
    for (const auto& l : labels)
      for (const char* m : {"bleu", "chrf", "ter"}) t.columns.push_back(fmt::format("{}[{}]", m, l));
  }
  t.columns.push_back("status");
  t.columns.push_back("run");

  if (options.aggregate_seeds) {
    std::map<std::tuple<std::string, std::string, std::string>, std::vector<const Row*>> groups;
    for (const auto& r : rows)
      if (r.scores) groups[{r.architecture, r.regime, r.direction}].push_back(&r);
    for (const auto& r : aggregate(rows)) {
      std::vector<std::string> cells{r.architecture, r.regime, r.direction, r.seed};
      if (r.scores) {
        const auto& g = groups[{r.architecture, r.regime, r.direction}];
        cells.push_back(summary(g, &MetricScores::bleu));
        cells.push_back(summary(g, &MetricScores::chrf));
        cells.push_back(summary(g, &MetricScores::ter));
      } else {
        cells.insert(cells.end(), {"", "", ""});
      }
      cells.push_back(r.status);
      cells.push_back(r.run);
      t.rows.push_back(std::move(cells));
    }
    return t;
  }

  for (const auto& r : rows) {
    std::vector<std::string> cells{r.architecture, r.regime, r.direction, r.seed};
    if (r.scores) {
      cells.insert(cells.end(), {num(r.scores->bleu), num(r.scores->chrf), num(r.scores->ter)});
    } else {
      cells.insert(cells.end(), {"", "", ""});
    }
    for (const auto& l : labels) {
      const auto it = std::find_if(r.buckets.begin(), r.buckets.end(), [&](const BucketReport& b) { return b.label == l; });
      if (it != r.buckets.end() && it->scores) {
        cells.insert(cells.end(), {num(it->scores->bleu), num(it->scores->chrf), num(it->scores->ter)});
      } else {
        cells.insert(cells.end(), {"", "", ""});
      }
    }
    cells.push_back(r.status);
    cells.push_back(r.run);
    t.rows.push_back(std::move(cells));
  }
  return t;
}

}  // namespace mtlab
