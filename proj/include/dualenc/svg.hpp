#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace dualenc {

struct ScatterSeries {
  std::string label;
  std::string color;
  std::vector<double> xy;  // interleaved x, y
};

struct LineSeries {
  std::string label;
  std::string color;
  std::vector<double> y;  // one value per x category
};

// Small deterministic SVG charts; numbers are printed with fixed precision so
// equal inputs give byte-identical files.
std::string render_scatter(const std::string& title, const std::vector<ScatterSeries>& series,
                           int width = 640, int height = 520);
std::string render_lines(const std::string& title, const std::vector<std::string>& x_labels,
                         const std::vector<LineSeries>& series, const std::string& y_label,
                         int width = 640, int height = 420);
std::string render_bars(const std::string& title, const std::vector<std::string>& categories,
                        const std::vector<double>& values, const std::string& y_label,
                        int width = 640, int height = 420);

// Default colours for series i.
const std::string& palette(std::size_t i);

void write_text_file(const std::filesystem::path& path, const std::string& content);

}  // namespace dualenc
