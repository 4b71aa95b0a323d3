#pragma once

// Bare-bones SVG line and scatter charts for the plot-data command.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace geofaith::plot {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

namespace detail {

inline constexpr double kWidth = 640, kHeight = 420, kMargin = 50;
inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

struct Frame {
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

  explicit Frame(const std::vector<Series>& series) {
    double lx = std::numeric_limits<double>::infinity(), hx = -lx, ly = lx, hy = -lx;
    for (const auto& s : series) {
      for (const auto& [x, y] : s.points) {
        if (!std::isfinite(x) || !std::isfinite(y)) continue;
        lx = std::min(lx, x);
        hx = std::max(hx, x);
        ly = std::min(ly, y);
        hy = std::max(hy, y);
      }
    }
    if (std::isfinite(lx)) {
      x0 = lx, x1 = hx > lx ? hx : lx + 1, y0 = ly, y1 = hy > ly ? hy : ly + 1;
    }
  }

  double px(double x) const { return kMargin + (x - x0) / (x1 - x0) * (kWidth - 2 * kMargin); }
  double py(double y) const { return kHeight - kMargin - (y - y0) / (y1 - y0) * (kHeight - 2 * kMargin); }
};

inline std::string open(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                        const Frame& f) {
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(kWidth) + "\" height=\"" + fmt(kHeight) +
                  "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + fmt(kWidth / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" + escape(title) + "</text>\n";
  s += "<line x1=\"" + fmt(kMargin) + "\" y1=\"" + fmt(kHeight - kMargin) + "\" x2=\"" + fmt(kWidth - kMargin) +
       "\" y2=\"" + fmt(kHeight - kMargin) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + fmt(kMargin) + "\" y1=\"" + fmt(kMargin) + "\" x2=\"" + fmt(kMargin) + "\" y2=\"" +
       fmt(kHeight - kMargin) + "\" stroke=\"black\"/>\n";
  s += "<text x=\"" + fmt(kWidth / 2) + "\" y=\"" + fmt(kHeight - 12) + "\" text-anchor=\"middle\">" + escape(xlabel) +
       "</text>\n";
  s += "<text x=\"14\" y=\"" + fmt(kHeight / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
       fmt(kHeight / 2) + ")\">" + escape(ylabel) + "</text>\n";
  s += "<text x=\"" + fmt(kMargin) + "\" y=\"" + fmt(kHeight - kMargin + 14) + "\">" + fmt(f.x0) + "</text>\n";
  s += "<text x=\"" + fmt(kWidth - kMargin) + "\" y=\"" + fmt(kHeight - kMargin + 14) + "\" text-anchor=\"end\">" +
       fmt(f.x1) + "</text>\n";
  s += "<text x=\"" + fmt(kMargin - 4) + "\" y=\"" + fmt(kHeight - kMargin) + "\" text-anchor=\"end\">" + fmt(f.y0) +
       "</text>\n";
  s += "<text x=\"" + fmt(kMargin - 4) + "\" y=\"" + fmt(kMargin + 4) + "\" text-anchor=\"end\">" + fmt(f.y1) +
       "</text>\n";
  return s;
}

inline std::string legend(const std::vector<Series>& series) {
  std::string s;
  const std::size_t shown = std::min<std::size_t>(series.size(), 10);
  for (std::size_t i = 0; i < shown; ++i) {
    const double y = kMargin + 14.0 * static_cast<double>(i);
    s += "<rect x=\"" + fmt(kWidth - kMargin - 110) + "\" y=\"" + fmt(y - 8) + "\" width=\"8\" height=\"8\" fill=\"" +
         kPalette[i % 10] + "\"/>\n";
    s += "<text x=\"" + fmt(kWidth - kMargin - 98) + "\" y=\"" + fmt(y) + "\">" + escape(series[i].name) + "</text>\n";
  }
  return s;
}

}  // namespace detail

inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series, bool show_legend = true) {
  const detail::Frame f(series);
  std::string s = detail::open(title, xlabel, ylabel, f);
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::string pts;
    for (const auto& [x, y] : series[i].points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      pts += detail::fmt(f.px(x)) + "," + detail::fmt(f.py(y)) + " ";
    }
    s += "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" + std::string(detail::kPalette[i % 10]) +
         "\" points=\"" + pts + "\"/>\n";
  }
  if (show_legend) s += detail::legend(series);
  return s + "</svg>\n";
}

inline std::string scatter_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                 const std::vector<Series>& groups) {
  const detail::Frame f(groups);
  std::string s = detail::open(title, xlabel, ylabel, f);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    for (const auto& [x, y] : groups[i].points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      s += "<circle r=\"3\" fill-opacity=\"0.7\" fill=\"" + std::string(detail::kPalette[i % 10]) + "\" cx=\"" +
           detail::fmt(f.px(x)) + "\" cy=\"" + detail::fmt(f.py(y)) + "\"/>\n";
    }
  }
  s += detail::legend(groups);
  return s + "</svg>\n";
}

}  // namespace geofaith::plot
