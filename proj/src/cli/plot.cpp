#include "mta/plot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include <fmt/format.h>

#include "mta/errors.hpp"
#include "mta/io.hpp"

namespace mta {
namespace {

constexpr double kWidth = 720, kHeight = 440;
constexpr double kLeft = 70, kRight = 170, kTop = 40, kBottom = 60;
constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string escape(std::string_view s) {
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

std::string join(const std::vector<double>& v) {
  std::string out;
  for (double d : v) out += (out.empty() ? "" : " ") + fmt::format("{}", d);
  return out;
}

struct Range {
  double lo, hi;
  double map(double v, double a, double b) const { return a + (v - lo) / (hi - lo) * (b - a); }
};

Range padded_range(double lo, double hi) {
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  return {lo, hi};
}

}  // namespace

std::string render_svg(const LinePlot& plot) {
  double xlo = INFINITY, xhi = -INFINITY, ylo = 0.0, yhi = -INFINITY;
  for (const auto& s : plot.series) {
    if (s.x.size() != s.y.size()) throw ConfigError("plot series '" + s.name + "' has mismatched x and y");
    for (double v : s.x) xlo = std::min(xlo, v), xhi = std::max(xhi, v);
    for (double v : s.y) ylo = std::min(ylo, v), yhi = std::max(yhi, v);
  }
  if (!std::isfinite(xlo)) xlo = 0, xhi = 1;
  if (!std::isfinite(yhi)) yhi = 1;
  yhi = std::max(yhi, ylo + 1e-12);
  const Range xr = padded_range(xlo, xhi), yr = padded_range(ylo, yhi * 1.05);
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;

  std::string out = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      kWidth, kHeight, kWidth, kHeight);
  out += fmt::format("<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n", (x0 + x1) / 2,
                     escape(plot.title));
  out += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", x0, y0, x1);
  out += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", x0, y0, y1);
  for (int i = 0; i <= 5; ++i) {
    const double xv = xr.lo + (xr.hi - xr.lo) * i / 5, yv = yr.lo + (yr.hi - yr.lo) * i / 5;
    const double px = xr.map(xv, x0, x1), py = yr.map(yv, y0, y1);
    out += fmt::format("<line x1=\"{0:.2f}\" y1=\"{1}\" x2=\"{0:.2f}\" y2=\"{2}\" stroke=\"black\"/>", px, y0, y0 + 5);
    out += fmt::format("<text x=\"{:.2f}\" y=\"{}\" text-anchor=\"middle\">{:.4g}</text>\n", px, y0 + 18, xv);
    out += fmt::format("<line x1=\"{0}\" y1=\"{1:.2f}\" x2=\"{2}\" y2=\"{1:.2f}\" stroke=\"#ddd\"/>", x0, py, x1);
    out += fmt::format("<text x=\"{}\" y=\"{:.2f}\" text-anchor=\"end\">{:.3g}</text>\n", x0 - 6, py + 4, yv);
  }
  out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", (x0 + x1) / 2, kHeight - 18,
                     escape(plot.x_label));
  out += fmt::format("<text x=\"18\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {0})\">{1}</text>\n",
                     (y0 + y1) / 2, escape(plot.y_label));

  for (std::size_t k = 0; k < plot.series.size(); ++k) {
    const auto& s = plot.series[k];
    const char* color = kColors[k % std::size(kColors)];
    std::string points;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      points += fmt::format("{}{:.2f},{:.2f}", i ? " " : "", xr.map(s.x[i], x0, x1), yr.map(s.y[i], y0, y1));
    }
    out += fmt::format(
        "<polyline class=\"series\" data-name=\"{}\" data-x=\"{}\" data-y=\"{}\" points=\"{}\" fill=\"none\" "
        "stroke=\"{}\" stroke-width=\"2\"/>\n",
        escape(s.name), join(s.x), join(s.y), points, color);
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      out += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"3\" fill=\"{}\"/>", xr.map(s.x[i], x0, x1),
                         yr.map(s.y[i], y0, y1), color);
    }
    out += '\n';
    const double ly = y1 + 16 * k;
    out += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"{3}\" stroke-width=\"2\"/>", x1 + 15,
                       ly, x1 + 35, color);
    out += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", x1 + 40, ly + 4, escape(s.name));
  }
  out += "</svg>\n";
  return out;
}

std::string plot_data_csv(const LinePlot& plot) {
  std::string out = "series,x,y\n";
  for (const auto& s : plot.series) {
    if (s.name.find_first_of(",\n") != std::string::npos) throw ConfigError("plot series name '" + s.name + "' has a comma");
    for (std::size_t i = 0; i < s.x.size(); ++i) out += fmt::format("{},{},{}\n", s.name, s.x[i], s.y[i]);
  }
  return out;
}

LinePlot parse_plot_data_csv(std::string_view text, const std::string& source) {
  LinePlot plot;
  std::size_t pos = 0, line = 0;
  auto number = [&](std::string_view f) {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
    if (ec != std::errc() || p != f.data() + f.size()) {
      throw FormatError(source + ":" + std::to_string(line) + ": bad number '" + std::string(f) + "'");
    }
    return v;
  };
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view row = text.substr(pos, end - pos);
    pos = end + 1;
    ++line;
    if (line == 1) {
      if (row != "series,x,y") throw FormatError(source + ": expected header series,x,y");
      continue;
    }
    if (row.empty()) continue;
    const std::size_t a = row.find(','), b = row.find(',', a + 1);
    if (a == std::string_view::npos || b == std::string_view::npos) throw FormatError(source + ":" + std::to_string(line) + ": expected 3 columns");
    const std::string name(row.substr(0, a));
    auto it = std::find_if(plot.series.begin(), plot.series.end(), [&](const PlotSeries& s) { return s.name == name; });
    if (it == plot.series.end()) it = plot.series.insert(plot.series.end(), PlotSeries{name, {}, {}});
    it->x.push_back(number(row.substr(a + 1, b - a - 1)));
    it->y.push_back(number(row.substr(b + 1)));
  }
  if (line == 0) throw FormatError(source + ": empty plot data");
  return plot;
}

void write_plot(const LinePlot& plot, const std::filesystem::path& svg_path) {
  std::filesystem::path data = svg_path;
  data.replace_extension(".csv");
  io::write_file_atomic(data, plot_data_csv(plot));
  io::write_file_atomic(svg_path, render_svg(plot));
}

}  // namespace mta
