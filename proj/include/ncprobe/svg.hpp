#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ncprobe {

// ---------------------------------------------------------------------------
// Minimal reader for the comma-separated files this tool writes (no quoting).

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::runtime_error("csv: missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
  bool has_column(const std::string& name) const {
    return std::find(header.begin(), header.end(), name) != header.end();
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream is(text);
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first) {
      t.header = split_csv_line(line);
      first = false;
    } else {
      t.rows.push_back(split_csv_line(line));
      if (t.rows.back().size() != t.header.size())
        throw std::runtime_error("csv: row " + std::to_string(t.rows.size()) + " has " +
                                 std::to_string(t.rows.back().size()) + " cells, header has " +
                                 std::to_string(t.header.size()));
    }
  }
  return t;
}

inline double csv_number(const std::string& s) {
  if (s == "nan" || s.empty()) return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  return std::stod(s);
}

// ---------------------------------------------------------------------------
// Static SVG line charts with deterministic byte output.

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

struct LineChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_y = false;
  std::vector<Series> series;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

// Round-number ticks covering [lo, hi].
inline std::vector<double> linear_ticks(double lo, double hi) {
  const double span = hi - lo;
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (raw <= m * mag) {
      step = m * mag;
      break;
    }
  std::vector<double> t;
  for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * step; v += step) t.push_back(std::abs(v) < 1e-12 * step ? 0.0 : v);
  return t;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return colors[i % 10];
}

}  // namespace detail

// Non-finite points are dropped, as are non-positive values on a log axis.
// Degenerate ranges are widened so single points still render.
inline std::string render_svg(const LineChart& chart) {
  using detail::fmt;
  const double W = 640, H = 420, left = 70, right = 170, top = 40, bottom = 55;
  const double pw = W - left - right, ph = H - top - bottom;
  std::vector<Series> s = chart.series;
  for (auto& ser : s)
    std::erase_if(ser.points, [&](const auto& p) {
      return !std::isfinite(p.first) || !std::isfinite(p.second) || (chart.log_y && p.second <= 0.0);
    });
  double xlo = INFINITY, xhi = -INFINITY, ylo = INFINITY, yhi = -INFINITY;
  for (const auto& ser : s)
    for (auto [x, y] : ser.points) {
      const double yy = chart.log_y ? std::log10(y) : y;
      xlo = std::min(xlo, x);
      xhi = std::max(xhi, x);
      ylo = std::min(ylo, yy);
      yhi = std::max(yhi, yy);
    }
  const bool empty = !std::isfinite(xlo);
  if (empty) xlo = 0, xhi = 1, ylo = 0, yhi = 1;
  if (xhi - xlo < 1e-12) xlo -= 1, xhi += 1;
  if (chart.log_y) {
    ylo = std::floor(ylo);
    yhi = std::ceil(yhi);
    if (yhi - ylo < 1) yhi = ylo + 1;
  } else if (yhi - ylo < 1e-12) {
    ylo -= 0.5, yhi += 0.5;
  }
  auto px = [&](double x) { return left + (x - xlo) / (xhi - xlo) * pw; };
  auto py = [&](double y) {
    const double yy = chart.log_y ? std::log10(y) : y;
    return top + ph - (yy - ylo) / (yhi - ylo) * ph;
  };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(W) << "\" height=\"" << fmt(H)
    << "\" viewBox=\"0 0 " << fmt(W) << ' ' << fmt(H) << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << fmt(W / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
    << detail::xml_escape(chart.title) << "</text>\n";
  o << "<rect x=\"" << fmt(left) << "\" y=\"" << fmt(top) << "\" width=\"" << fmt(pw) << "\" height=\"" << fmt(ph)
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (double t : detail::linear_ticks(xlo, xhi)) {
    const double x = px(t);
    o << "<line x1=\"" << fmt(x) << "\" y1=\"" << fmt(top + ph) << "\" x2=\"" << fmt(x) << "\" y2=\""
      << fmt(top + ph + 5) << "\" stroke=\"black\"/>\n";
    o << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(top + ph + 18) << "\" text-anchor=\"middle\">"
      << detail::tick_label(t) << "</text>\n";
  }
  std::vector<std::pair<double, std::string>> yt;
  if (chart.log_y) {
    for (double e = ylo; e <= yhi + 1e-9; e += 1.0) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "1e%d", static_cast<int>(e));
      yt.emplace_back(std::pow(10.0, e), buf);
    }
  } else {
    for (double t : detail::linear_ticks(ylo, yhi)) yt.emplace_back(t, detail::tick_label(t));
  }
  for (const auto& [v, label] : yt) {
    const double y = py(v);
    o << "<line x1=\"" << fmt(left - 5) << "\" y1=\"" << fmt(y) << "\" x2=\"" << fmt(left + pw) << "\" y2=\"" << fmt(y)
      << "\" stroke=\"#dddddd\"/>\n";
    o << "<text x=\"" << fmt(left - 8) << "\" y=\"" << fmt(y + 4) << "\" text-anchor=\"end\">" << label << "</text>\n";
  }
  o << "<text x=\"" << fmt(left + pw / 2) << "\" y=\"" << fmt(H - 12) << "\" text-anchor=\"middle\">"
    << detail::xml_escape(chart.x_label) << "</text>\n";
  o << "<text x=\"16\" y=\"" << fmt(top + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << fmt(top + ph / 2) << ")\">" << detail::xml_escape(chart.y_label) << (chart.log_y ? " (log scale)" : "")
    << "</text>\n";
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& ser = s[i];
    const char* color = detail::palette(i);
    if (ser.points.size() > 1) {
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t k = 0; k < ser.points.size(); ++k)
        o << (k ? " " : "") << fmt(px(ser.points[k].first)) << ',' << fmt(py(ser.points[k].second));
      o << "\"/>\n";
    }
    for (auto [x, y] : ser.points)
      o << "<circle cx=\"" << fmt(px(x)) << "\" cy=\"" << fmt(py(y)) << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    const double ly = top + 10 + 16 * static_cast<double>(i);
    o << "<line x1=\"" << fmt(left + pw + 12) << "\" y1=\"" << fmt(ly) << "\" x2=\"" << fmt(left + pw + 32)
      << "\" y2=\"" << fmt(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << fmt(left + pw + 38) << "\" y=\"" << fmt(ly + 4) << "\">" << detail::xml_escape(ser.name)
      << "</text>\n";
  }
  if (empty)
    o << "<text x=\"" << fmt(left + pw / 2) << "\" y=\"" << fmt(top + ph / 2)
      << "\" text-anchor=\"middle\" fill=\"#888888\">no finite data</text>\n";
  o << "</svg>\n";
  return o.str();
}

}  // namespace ncprobe
