#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace detrend::plot {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
  std::vector<double> numbers(std::size_t col) const;
};

Table read_csv(const std::filesystem::path& path);

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct Chart {
  std::string title, x_label, y_label;
  std::vector<Series> series;
  bool steps = false;  // draw as a step histogram
};

std::string render_svg(const Chart& chart);

// Picks a chart for a known CSV layout (metrics, norm trace, neuron trace,
// histograms); otherwise plots `y_columns` (all numeric columns when empty)
// against `x_column` (the first column when empty).
Chart chart_for(const Table& table, const std::string& title, const std::string& x_column,
                const std::vector<std::string>& y_columns);

void write_svg(const std::filesystem::path& path, const Chart& chart);

}  // namespace detrend::plot
