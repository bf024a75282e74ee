#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mtlab {

// A rectangular table of strings; blank cells mean "no value".
struct ReportTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  friend bool operator==(const ReportTable&, const ReportTable&) = default;
};

// RFC 4180: comma separated, CRLF-free ("\n" line ends), fields quoted when
// they contain a comma, quote or newline.
std::string to_csv(const ReportTable& table);
ReportTable parse_csv(std::string_view text);

// Aligned text, one block per architecture.
std::string to_text(const ReportTable& table);

struct ReportOptions {
  bool bucket_columns = false;
  // Collapse rows that differ only by seed into "mean [min, max]" cells.
  bool aggregate_seeds = false;
  // Recompute overall scores from the stored hypothesis files and flag rows
  // that disagree with metrics.json.
  bool verify = false;
};

// Accepts run directories, matrix directories (matrix_record.json) or
// directories holding runs. Rows: architecture, regime, direction, seed,
// bleu, chrf, ter, status, run. Missing and failed runs keep blank scores;
// unreadable records are flagged in the status column.
ReportTable build_report_table(std::span<const std::filesystem::path> dirs, const ReportOptions& options = {});

}  // namespace mtlab
