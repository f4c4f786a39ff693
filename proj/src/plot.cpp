#include "xem/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "xem/error.hpp"

namespace xem {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

std::size_t HistoryTable::column_index(const std::string& name) const {
  for (std::size_t j = 0; j < columns.size(); ++j)
    if (columns[j] == name) return j;
  fail(ErrorKind::Format, "history has no column '" + name + "'");
}

HistoryTable read_history_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) fail(ErrorKind::Io, "cannot open " + file.string());

  HistoryTable t;
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::Format, file.string() + ": empty history");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.columns = split_csv_line(line);
  if (t.columns.empty()) fail(ErrorKind::Format, file.string() + ": empty header");

  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != t.columns.size())
      fail(ErrorKind::Format, file.string() + ":" + std::to_string(lineno) +
                                  ": expected " + std::to_string(t.columns.size()) +
                                  " cells, got " + std::to_string(cells.size()));
    std::vector<double> row(cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j) {
      try {
        row[j] = std::stod(cells[j]);
      } catch (const std::exception&) {
        fail(ErrorKind::Format, file.string() + ":" + std::to_string(lineno) +
                                    ": non-numeric cell '" + cells[j] + "'");
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

void write_loss_curves_svg(const HistoryTable& table, std::vector<std::string> series,
                           const std::filesystem::path& out_file) {
  if (table.columns.size() < 2) fail(ErrorKind::Format, "history needs an x column plus data");
  if (table.rows.empty()) fail(ErrorKind::EmptyInput, "history has no rows to plot");
  if (series.empty()) {
    for (std::size_t j = 1; j < table.columns.size(); ++j)
      if (table.columns[j] != "lr") series.push_back(table.columns[j]);
  }
  if (series.empty()) fail(ErrorKind::Config, "no series selected");

  std::vector<std::size_t> cols;
  cols.reserve(series.size());
  for (const std::string& s : series) cols.push_back(table.column_index(s));

  // Data extents. X is the first column; a degenerate span is widened so a
  // single-row history still renders.
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& row : table.rows) {
    xmin = std::min(xmin, row[0]);
    xmax = std::max(xmax, row[0]);
    for (std::size_t c : cols) {
      if (!std::isfinite(row[c])) continue;
      ymin = std::min(ymin, row[c]);
      ymax = std::max(ymax, row[c]);
    }
  }
  if (!std::isfinite(ymin)) { ymin = 0.0; ymax = 1.0; }
  if (xmax <= xmin) xmax = xmin + 1.0;
  if (ymax <= ymin) { ymax += 0.5; ymin -= 0.5; }

  const double W = 960, H = 540;
  const double L = 70, R = 170, T = 30, B = 50;  // margins (legend lives right)
  const double pw = W - L - R, ph = H - T - B;
  auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * pw; };
  auto sy = [&](double y) { return T + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  const std::size_t npal = sizeof palette / sizeof *palette;

  std::ofstream out(out_file);
  if (!out) fail(ErrorKind::Io, "cannot open " + out_file.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  // Gridlines and tick labels, five divisions each way.
  out << "<g stroke=\"#dddddd\" stroke-width=\"1\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double gx = L + pw * i / 5, gy = T + ph * i / 5;
    out << "<line x1=\"" << gx << "\" y1=\"" << T << "\" x2=\"" << gx << "\" y2=\"" << T + ph
        << "\"/>\n";
    out << "<line x1=\"" << L << "\" y1=\"" << gy << "\" x2=\"" << L + pw << "\" y2=\"" << gy
        << "\"/>\n";
  }
  out << "</g>\n<g font-family=\"sans-serif\" font-size=\"12\" fill=\"#333333\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double xv = xmin + (xmax - xmin) * i / 5;
    const double yv = ymax - (ymax - ymin) * i / 5;
    out << "<text x=\"" << sx(xv) << "\" y=\"" << T + ph + 18
        << "\" text-anchor=\"middle\">" << fmt(xv) << "</text>\n";
    out << "<text x=\"" << L - 8 << "\" y=\"" << T + ph * i / 5 + 4
        << "\" text-anchor=\"end\">" << fmt(yv) << "</text>\n";
  }
  out << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">"
      << table.columns[0] << "</text>\n</g>\n";

  for (std::size_t k = 0; k < cols.size(); ++k) {
    out << "<polyline fill=\"none\" stroke=\"" << palette[k % npal]
        << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& row : table.rows) {
      const double v = row[cols[k]];
      if (!std::isfinite(v)) continue;
      out << fmt(sx(row[0])) << "," << fmt(sy(v)) << " ";
    }
    out << "\"/>\n";
    const double ly = T + 16 + 18 * static_cast<double>(k);
    out << "<line x1=\"" << L + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << L + pw + 36
        << "\" y2=\"" << ly << "\" stroke=\"" << palette[k % npal]
        << "\" stroke-width=\"3\"/>\n";
    out << "<text x=\"" << L + pw + 42 << "\" y=\"" << ly + 4
        << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#333333\">" << series[k]
        << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) fail(ErrorKind::Io, "write failed for " + out_file.string());
}

}  // namespace xem
