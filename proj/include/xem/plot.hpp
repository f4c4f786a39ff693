#pragma once

// Loss-curve plotting: parse a run's history.csv and emit a small standalone
// SVG line chart. SVG keeps the toolchain dependency-free and diffs cleanly.

#include <filesystem>
#include <string>
#include <vector>

namespace xem {

// A parsed numeric CSV: header row + rectangular double-valued body.
struct HistoryTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;  // rows[i][j] pairs with columns[j]

  std::size_t column_index(const std::string& name) const;  // Format error if absent
};

HistoryTable read_history_csv(const std::filesystem::path& file);

// Plot the named series against the first column (the step/iteration axis).
// Empty `series` selects every column after the first except `lr`.
void write_loss_curves_svg(const HistoryTable& table, std::vector<std::string> series,
                           const std::filesystem::path& out_file);

}  // namespace xem
