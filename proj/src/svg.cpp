#include "dualenc/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "dualenc/errors.hpp"

namespace dualenc {

namespace {

constexpr double kMarginLeft = 64, kMarginRight = 150, kMarginTop = 40, kMarginBottom = 48;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
    if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  }
};

std::string header(int width, int height, const std::string& title) {
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
    << escape(title) << "</text>\n";
  return o.str();
}

std::string frame(double x0, double y0, double x1, double y1) {
  return "<rect x=\"" + num(x0) + "\" y=\"" + num(y0) + "\" width=\"" + num(x1 - x0) +
         "\" height=\"" + num(y1 - y0) + "\" fill=\"none\" stroke=\"#444\"/>\n";
}

std::string legend(double x, double y, const std::vector<std::pair<std::string, std::string>>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const double yy = y + 20.0 * static_cast<double>(i);
    out += "<rect x=\"" + num(x) + "\" y=\"" + num(yy - 9) + "\" width=\"12\" height=\"12\" fill=\"" +
           items[i].second + "\"/>\n";
    out += "<text x=\"" + num(x + 18) + "\" y=\"" + num(yy + 2) + "\" font-size=\"12\">" +
           escape(items[i].first) + "</text>\n";
  }
  return out;
}

std::string y_axis(double x0, double y0, double y1, const Range& r, const std::string& label) {
  std::string out;
  for (int t = 0; t <= 4; ++t) {
    const double v = r.lo + (r.hi - r.lo) * t / 4.0;
    const double y = y1 - (y1 - y0) * t / 4.0;
    out += "<line x1=\"" + num(x0 - 4) + "\" y1=\"" + num(y) + "\" x2=\"" + num(x0) + "\" y2=\"" +
           num(y) + "\" stroke=\"#444\"/>\n";
    out += "<text x=\"" + num(x0 - 6) + "\" y=\"" + num(y + 4) +
           "\" text-anchor=\"end\" font-size=\"10\">" + num(v) + "</text>\n";
  }
  if (!label.empty()) {
    out += "<text x=\"14\" y=\"" + num((y0 + y1) / 2) + "\" font-size=\"12\" transform=\"rotate(-90 14 " +
           num((y0 + y1) / 2) + ")\" text-anchor=\"middle\">" + escape(label) + "</text>\n";
  }
  return out;
}

}  // namespace

const std::string& palette(std::size_t i) {
  static const std::vector<std::string> colors = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return colors[i % colors.size()];
}

std::string render_scatter(const std::string& title, const std::vector<ScatterSeries>& series,
                           int width, int height) {
  Range rx, ry;
  for (const auto& s : series) {
    for (std::size_t i = 0; i + 1 < s.xy.size(); i += 2) {
      rx.add(s.xy[i]);
      ry.add(s.xy[i + 1]);
    }
  }
  rx.finish();
  ry.finish();
  const double x0 = kMarginLeft, x1 = width - kMarginRight, y0 = kMarginTop, y1 = height - kMarginBottom;
  std::string out = header(width, height, title) + frame(x0, y0, x1, y1);
  std::vector<std::pair<std::string, std::string>> items;
  for (const auto& s : series) {
    out += "<g fill=\"" + s.color + "\" fill-opacity=\"0.7\">\n";
    for (std::size_t i = 0; i + 1 < s.xy.size(); i += 2) {
      const double px = x0 + (s.xy[i] - rx.lo) / (rx.hi - rx.lo) * (x1 - x0);
      const double py = y1 - (s.xy[i + 1] - ry.lo) / (ry.hi - ry.lo) * (y1 - y0);
      out += "<circle cx=\"" + num(px) + "\" cy=\"" + num(py) + "\" r=\"2.5\"/>\n";
    }
    out += "</g>\n";
    items.emplace_back(s.label, s.color);
  }
  out += legend(x1 + 16, y0 + 12, items);
  out += "</svg>\n";
  return out;
}

std::string render_lines(const std::string& title, const std::vector<std::string>& x_labels,
                         const std::vector<LineSeries>& series, const std::string& y_label,
                         int width, int height) {
  Range ry;
  for (const auto& s : series) {
    for (double v : s.y) ry.add(v);
  }
  ry.finish();
  const double x0 = kMarginLeft, x1 = width - kMarginRight, y0 = kMarginTop, y1 = height - kMarginBottom;
  const std::size_t n = std::max<std::size_t>(x_labels.size(), 1);
  auto px = [&](std::size_t i) {
    return n == 1 ? (x0 + x1) / 2 : x0 + 20 + (x1 - x0 - 40) * static_cast<double>(i) / static_cast<double>(n - 1);
  };
  std::string out = header(width, height, title) + frame(x0, y0, x1, y1) + y_axis(x0, y0, y1, ry, y_label);
  for (std::size_t i = 0; i < x_labels.size(); ++i) {
    out += "<text x=\"" + num(px(i)) + "\" y=\"" + num(y1 + 18) + "\" text-anchor=\"middle\" font-size=\"12\">" +
           escape(x_labels[i]) + "</text>\n";
  }
  std::vector<std::pair<std::string, std::string>> items;
  for (const auto& s : series) {
    std::string points;
    for (std::size_t i = 0; i < s.y.size() && i < x_labels.size(); ++i) {
      const double py = y1 - (s.y[i] - ry.lo) / (ry.hi - ry.lo) * (y1 - y0);
      points += (i ? " " : "") + num(px(i)) + "," + num(py);
      out += "<circle cx=\"" + num(px(i)) + "\" cy=\"" + num(py) + "\" r=\"3.5\" fill=\"" + s.color + "\"/>\n";
    }
    out += "<polyline points=\"" + points + "\" fill=\"none\" stroke=\"" + s.color + "\" stroke-width=\"2\"/>\n";
    items.emplace_back(s.label, s.color);
  }
  out += legend(x1 + 16, y0 + 12, items);
  out += "</svg>\n";
  return out;
}

std::string render_bars(const std::string& title, const std::vector<std::string>& categories,
                        const std::vector<double>& values, const std::string& y_label,
                        int width, int height) {
  Range ry;
  ry.add(0.0);
  for (double v : values) ry.add(v);
  ry.finish();
  const double x0 = kMarginLeft, x1 = width - kMarginRight, y0 = kMarginTop, y1 = height - kMarginBottom;
  std::string out = header(width, height, title) + frame(x0, y0, x1, y1) + y_axis(x0, y0, y1, ry, y_label);
  const double zero = y1 - (0.0 - ry.lo) / (ry.hi - ry.lo) * (y1 - y0);
  out += "<line x1=\"" + num(x0) + "\" y1=\"" + num(zero) + "\" x2=\"" + num(x1) + "\" y2=\"" + num(zero) +
         "\" stroke=\"#888\"/>\n";
  const std::size_t n = std::max<std::size_t>(categories.size(), 1);
  const double slot = (x1 - x0) / static_cast<double>(n);
  for (std::size_t i = 0; i < categories.size() && i < values.size(); ++i) {
    const double v = std::isfinite(values[i]) ? values[i] : 0.0;
    const double top = y1 - (v - ry.lo) / (ry.hi - ry.lo) * (y1 - y0);
    const double bx = x0 + slot * static_cast<double>(i) + slot * 0.2;
    out += "<rect x=\"" + num(bx) + "\" y=\"" + num(std::min(top, zero)) + "\" width=\"" + num(slot * 0.6) +
           "\" height=\"" + num(std::abs(zero - top)) + "\" fill=\"" + palette(i) + "\"/>\n";
    out += "<text x=\"" + num(bx + slot * 0.3) + "\" y=\"" + num(y1 + 18) +
           "\" text-anchor=\"middle\" font-size=\"12\">" + escape(categories[i]) + "</text>\n";
    out += "<text x=\"" + num(bx + slot * 0.3) + "\" y=\"" + num(std::min(top, zero) - 4) +
           "\" text-anchor=\"middle\" font-size=\"10\">" + num(v) + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace dualenc
