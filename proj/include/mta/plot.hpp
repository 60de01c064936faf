#pragma once

// Static line charts written as SVG, each with a sibling CSV holding the
// plotted series in long format (series,x,y).

#include <filesystem>
#include <string>
#include <vector>

namespace mta {

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct LinePlot {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<PlotSeries> series;
};

/// Each series becomes a polyline carrying its raw values in data-x and
/// data-y attributes.
std::string render_svg(const LinePlot& plot);
std::string plot_data_csv(const LinePlot& plot);
/// Inverse of plot_data_csv; series keep their first-appearance order.
LinePlot parse_plot_data_csv(std::string_view text, const std::string& source = "<memory>");

/// Writes `svg_path` and the data file next to it with extension ".csv".
void write_plot(const LinePlot& plot, const std::filesystem::path& svg_path);

}  // namespace mta
