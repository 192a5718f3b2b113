#pragma once

// Bare-bones SVG line and bar charts for simulation output.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace obskit::svg {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

namespace detail {

inline std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", x);
  return buf;
}

inline std::string escape(const std::string& s) {
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

inline const char* color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return palette[i % 8];
}

}  // namespace detail

inline std::string line_chart(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                              const std::string& y_label, const std::vector<std::pair<std::string, double>>& markers = {}) {
  constexpr double W = 720, H = 480, L = 70, R = 220, T = 40, B = 60;
  double x0 = 1e300, x1 = -1e300, y0 = 0.0, y1 = 1.0;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  for (const auto& m : markers) {
    x0 = std::min(x0, m.second);
    x1 = std::max(x1, m.second);
  }
  if (!(x1 > x0)) x1 = x0 + 1.0;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  using detail::num;
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + num(W / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" + detail::escape(title) + "</text>\n";
  out += "<line x1=\"" + num(L) + "\" y1=\"" + num(H - B) + "\" x2=\"" + num(W - R) + "\" y2=\"" + num(H - B) + "\" stroke=\"black\"/>\n";
  out += "<line x1=\"" + num(L) + "\" y1=\"" + num(T) + "\" x2=\"" + num(L) + "\" y2=\"" + num(H - B) + "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0;
    const double yv = y0 + (y1 - y0) * k / 4.0;
    out += "<text x=\"" + num(px(xv)) + "\" y=\"" + num(H - B + 18) + "\" text-anchor=\"middle\" font-size=\"11\">" + num(xv) + "</text>\n";
    out += "<text x=\"" + num(L - 8) + "\" y=\"" + num(py(yv) + 4) + "\" text-anchor=\"end\" font-size=\"11\">" + num(yv) + "</text>\n";
  }
  out += "<text x=\"" + num((L + W - R) / 2) + "\" y=\"" + num(H - 16) + "\" text-anchor=\"middle\" font-size=\"13\">" + detail::escape(x_label) + "</text>\n";
  out += "<text x=\"16\" y=\"" + num((T + H - B) / 2) + "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 " +
         num((T + H - B) / 2) + ")\">" + detail::escape(y_label) + "</text>\n";
  for (const auto& m : markers) {
    out += "<line x1=\"" + num(px(m.second)) + "\" y1=\"" + num(T) + "\" x2=\"" + num(px(m.second)) + "\" y2=\"" + num(H - B) +
           "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::string pts;
    for (auto [x, y] : series[i].points) pts += num(px(x)) + "," + num(py(y)) + " ";
    out += "<polyline fill=\"none\" stroke=\"" + std::string(detail::color(i)) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    out += "<text x=\"" + num(W - R + 10) + "\" y=\"" + num(T + 16.0 * static_cast<double>(i + 1)) + "\" font-size=\"12\" fill=\"" +
           detail::color(i) + "\">" + detail::escape(series[i].name) + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

inline std::string bar_chart(const std::vector<std::size_t>& counts, const std::string& title) {
  constexpr double W = 480, H = 320, L = 50, T = 40, B = 40, R = 20;
  const std::size_t top = counts.empty() ? 1 : std::max<std::size_t>(1, *std::max_element(counts.begin(), counts.end()));
  const double bw = (W - L - R) / static_cast<double>(std::max<std::size_t>(counts.size(), 1));
  using detail::num;
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + num(W / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" + detail::escape(title) + "</text>\n";
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double h = (H - T - B) * static_cast<double>(counts[i]) / static_cast<double>(top);
    out += "<rect x=\"" + num(L + bw * static_cast<double>(i)) + "\" y=\"" + num(H - B - h) + "\" width=\"" + num(bw - 1) +
           "\" height=\"" + num(h) + "\" fill=\"#1f77b4\"/>\n";
  }
  out += "<text x=\"" + num(L) + "\" y=\"" + num(H - B + 16) + "\" font-size=\"11\">0</text>\n";
  out += "<text x=\"" + num(W - R) + "\" y=\"" + num(H - B + 16) + "\" text-anchor=\"end\" font-size=\"11\">1</text>\n";
  out += "</svg>\n";
  return out;
}

}  // namespace obskit::svg
