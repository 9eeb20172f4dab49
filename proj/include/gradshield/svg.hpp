#pragma once

#include <string>
#include <vector>

namespace gradshield::svg {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool identity_line = false;
  // Shades the upper-left (x < 0, y > 0) and lower-right quadrants.
  bool quadrant_shading = false;
  bool lines = false;  // connect points of each series in x order as given
  double width = 480.0;
  double height = 360.0;
};

struct Range {
  double lo = 0.0;
  double hi = 1.0;
};

// Padded range covering every finite value; a degenerate range is widened
// symmetrically.
Range covering_range(const std::vector<double>& values);

// Deterministic SVG: fixed element order and fixed number formatting. Empty or
// all-NaN input renders a "no data" placeholder.
std::string plot(const std::vector<Series>& series, const PlotOptions& options);

struct Bar {
  std::string label;
  double value = 0.0;
};
std::string bar_chart(const std::vector<Bar>& bars, const PlotOptions& options);

}  // namespace gradshield::svg
