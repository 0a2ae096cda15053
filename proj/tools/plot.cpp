#include "plot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace detrend::plot {

namespace {

constexpr double kWidth = 720, kHeight = 420;
constexpr double kLeft = 70, kRight = 180, kTop = 40, kBottom = 50;
const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                         "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  for (std::string cell; std::getline(in, cell, ',');) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

double parse_number(const std::string& s) {
  if (s == "nan") return std::nan("");
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw std::invalid_argument("plot: '" + s + "' is not a number");
  }
  return v;
}

bool numeric_column(const Table& t, std::size_t c) {
  for (const auto& r : t.rows) {
    if (c >= r.size()) return false;
    try {
      parse_number(r[c]);
    } catch (const std::invalid_argument&) {
      return false;
    }
  }
  return !t.rows.empty();
}

}  // namespace

std::size_t Table::column(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw std::invalid_argument("plot: no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

std::vector<double> Table::numbers(std::size_t col) const {
  std::vector<double> out;
  for (const auto& r : rows) out.push_back(parse_number(r.at(col)));
  return out;
}

Table read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("plot: cannot read " + path.string());
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("plot: empty file " + path.string());
  t.header = split_row(line);
  while (std::getline(in, line)) {
    if (!line.empty()) t.rows.push_back(split_row(line));
  }
  return t;
}

Chart chart_for(const Table& table, const std::string& title, const std::string& x_column,
                const std::vector<std::string>& y_columns) {
  Chart chart;
  chart.title = title;
  const std::vector<std::string> hist_header = {"epoch", "neuron", "bin_lo", "count"};
  if (table.header == hist_header) {
    chart.steps = true;
    chart.x_label = "activation";
    chart.y_label = "fraction";
    std::map<std::string, Series> by_key;
    std::vector<std::string> order;
    for (const auto& r : table.rows) {
      const std::string key = r.at(1) + " epoch " + r.at(0);
      if (!by_key.count(key)) order.push_back(key);
      Series& s = by_key[key];
      s.name = key;
      s.x.push_back(parse_number(r.at(2)));
      s.y.push_back(parse_number(r.at(3)));
    }
    for (const auto& k : order) {
      Series s = by_key[k];
      double total = 0.0;
      for (double v : s.y) total += v;
      if (total > 0) {
        for (double& v : s.y) v /= total;
      }
      chart.series.push_back(std::move(s));
    }
    return chart;
  }
  const std::size_t xc = x_column.empty() ? 0 : table.column(x_column);
  chart.x_label = table.header.at(xc);
  std::vector<std::size_t> ys;
  if (!y_columns.empty()) {
    for (const auto& y : y_columns) ys.push_back(table.column(y));
  } else {
    const bool metrics = table.header.size() > 1 && table.header[1] == "split";
    for (std::size_t c = 0; c < table.header.size(); ++c) {
      if (c == xc || !numeric_column(table, c)) continue;
      if (metrics && table.header[c].find("acc") == std::string::npos) continue;
      ys.push_back(c);
    }
  }
  const auto x = table.numbers(xc);
  for (std::size_t c : ys) chart.series.push_back({table.header[c], x, table.numbers(c)});
  chart.y_label = chart.series.size() == 1 ? chart.series[0].name : "value";
  return chart;
}

std::string render_svg(const Chart& chart) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : chart.series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kLeft << "\" y=\"22\" font-size=\"14\">" << escape(chart.title) << "</text>\n";
  os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << kTop + ph + 16 << "\" text-anchor=\"middle\">"
       << fmt(xv) << "</text>\n";
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">"
       << fmt(yv) << "</text>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">"
     << escape(chart.x_label) << "</text>\n";
  os << "<text x=\"16\" y=\"" << kTop + ph / 2 << "\" transform=\"rotate(-90 16 " << kTop + ph / 2
     << ")\" text-anchor=\"middle\">" << escape(chart.y_label) << "</text>\n";
  for (std::size_t si = 0; si < chart.series.size(); ++si) {
    const Series& s = chart.series[si];
    const char* color = kColors[si % std::size(kColors)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (chart.steps && i > 0) os << px(s.x[i]) << "," << py(s.y[i - 1]) << " ";
      os << px(s.x[i]) << "," << py(s.y[i]) << " ";
    }
    os << "\"/>\n";
    const double ly = kTop + 12 + 14.0 * static_cast<double>(si);
    os << "<line x1=\"" << kLeft + pw + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << kLeft + pw + 28
       << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << kLeft + pw + 32 << "\" y=\"" << ly << "\">" << escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_svg(const std::filesystem::path& path, const Chart& chart) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out << render_svg(chart);
  if (!out) throw std::runtime_error("plot: cannot write " + path.string());
}

}  // namespace detrend::plot
