#include "gradshield/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace gradshield::svg {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string f(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", x);
  return buf;
}

std::string tick(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", x);
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

struct Frame {
  double left = 60, right = 20, top = 30, bottom = 45;
  double w, h;
  Range xr, yr;
  double px(double x) const { return left + (x - xr.lo) / (xr.hi - xr.lo) * (w - left - right); }
  double py(double y) const { return h - bottom - (y - yr.lo) / (yr.hi - yr.lo) * (h - top - bottom); }
};

void header(std::ostringstream& os, const PlotOptions& o) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f(o.width) << "\" height=\"" << f(o.height)
     << "\" viewBox=\"0 0 " << f(o.width) << ' ' << f(o.height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << f(o.width) << "\" height=\"" << f(o.height) << "\" fill=\"white\"/>\n";
  if (!o.title.empty()) {
    os << "<text x=\"" << f(o.width / 2) << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << escape(o.title)
       << "</text>\n";
  }
}

std::string placeholder(const PlotOptions& o) {
  std::ostringstream os;
  header(os, o);
  os << "<text x=\"" << f(o.width / 2) << "\" y=\"" << f(o.height / 2)
     << "\" text-anchor=\"middle\" fill=\"#888\">no data</text>\n</svg>\n";
  return os.str();
}

void axes(std::ostringstream& os, const Frame& fr, const PlotOptions& o) {
  const double x0 = fr.left, x1 = fr.w - fr.right, y0 = fr.h - fr.bottom, y1 = fr.top;
  os << "<rect x=\"" << f(x0) << "\" y=\"" << f(y1) << "\" width=\"" << f(x1 - x0) << "\" height=\"" << f(y0 - y1)
     << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = fr.xr.lo + (fr.xr.hi - fr.xr.lo) * i / 4.0;
    const double yv = fr.yr.lo + (fr.yr.hi - fr.yr.lo) * i / 4.0;
    os << "<text x=\"" << f(fr.px(xv)) << "\" y=\"" << f(y0 + 14) << "\" text-anchor=\"middle\">" << tick(xv)
       << "</text>\n";
    os << "<text x=\"" << f(x0 - 4) << "\" y=\"" << f(fr.py(yv) + 4) << "\" text-anchor=\"end\">" << tick(yv)
       << "</text>\n";
  }
  if (!o.x_label.empty()) {
    os << "<text x=\"" << f((x0 + x1) / 2) << "\" y=\"" << f(fr.h - 8) << "\" text-anchor=\"middle\">"
       << escape(o.x_label) << "</text>\n";
  }
  if (!o.y_label.empty()) {
    os << "<text x=\"14\" y=\"" << f((y0 + y1) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
       << f((y0 + y1) / 2) << ")\">" << escape(o.y_label) << "</text>\n";
  }
}

}  // namespace

Range covering_range(const std::vector<double>& values) {
  double lo = INFINITY, hi = -INFINITY;
  for (double v : values) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!std::isfinite(lo)) return {0.0, 1.0};
  if (hi - lo < 1e-12) {
    const double pad = std::max(std::abs(lo) * 0.1, 0.5);
    return {lo - pad, hi + pad};
  }
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

std::string plot(const std::vector<Series>& series, const PlotOptions& o) {
  std::vector<double> xs, ys;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) {
        xs.push_back(s.x[i]);
        ys.push_back(s.y[i]);
      }
    }
  }
  if (xs.empty()) return placeholder(o);
  Frame fr{};
  fr.w = o.width;
  fr.h = o.height;
  if (o.identity_line) {
    // One shared range so the identity line is the diagonal.
    std::vector<double> all = xs;
    all.insert(all.end(), ys.begin(), ys.end());
    fr.xr = fr.yr = covering_range(all);
  } else {
    fr.xr = covering_range(xs);
    fr.yr = covering_range(ys);
  }
  std::ostringstream os;
  header(os, o);
  if (o.quadrant_shading && fr.xr.lo < 0 && fr.xr.hi > 0 && fr.yr.lo < 0 && fr.yr.hi > 0) {
    const double cx = fr.px(0), cy = fr.py(0);
    os << "<rect x=\"" << f(fr.left) << "\" y=\"" << f(fr.top) << "\" width=\"" << f(cx - fr.left) << "\" height=\""
       << f(cy - fr.top) << "\" fill=\"#2ca02c\" fill-opacity=\"0.08\"/>\n";
    os << "<rect x=\"" << f(cx) << "\" y=\"" << f(cy) << "\" width=\"" << f(fr.w - fr.right - cx) << "\" height=\""
       << f(fr.h - fr.bottom - cy) << "\" fill=\"#d62728\" fill-opacity=\"0.08\"/>\n";
  }
  axes(os, fr, o);
  if (o.identity_line) {
    os << "<line x1=\"" << f(fr.px(fr.xr.lo)) << "\" y1=\"" << f(fr.py(fr.xr.lo)) << "\" x2=\"" << f(fr.px(fr.xr.hi))
       << "\" y2=\"" << f(fr.py(fr.xr.hi)) << "\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n";
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    const std::size_t n = std::min(s.x.size(), s.y.size());
    if (o.lines && n > 1) {
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      bool first = true;
      for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
        os << (first ? "" : " ") << f(fr.px(s.x[i])) << ',' << f(fr.py(s.y[i]));
        first = false;
      }
      os << "\"/>\n";
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      os << "<circle cx=\"" << f(fr.px(s.x[i])) << "\" cy=\"" << f(fr.py(s.y[i])) << "\" r=\"2.5\" fill=\"" << color
         << "\" fill-opacity=\"0.7\"/>\n";
    }
    if (!s.label.empty()) {
      const double ly = fr.top + 14.0 * static_cast<double>(k + 1);
      os << "<text x=\"" << f(fr.left + 8) << "\" y=\"" << f(ly) << "\" fill=\"" << color << "\">" << escape(s.label)
         << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

std::string bar_chart(const std::vector<Bar>& bars, const PlotOptions& o) {
  std::vector<double> vals{0.0};
  for (const auto& b : bars) {
    if (std::isfinite(b.value)) vals.push_back(b.value);
  }
  if (vals.size() == 1) return placeholder(o);
  Frame fr{};
  fr.w = o.width;
  fr.h = o.height;
  fr.bottom = 70;
  fr.xr = {0.0, static_cast<double>(bars.size())};
  fr.yr = covering_range(vals);
  std::ostringstream os;
  header(os, o);
  const double x0 = fr.left, y0 = fr.h - fr.bottom;
  os << "<rect x=\"" << f(x0) << "\" y=\"" << f(fr.top) << "\" width=\"" << f(fr.w - fr.right - x0) << "\" height=\""
     << f(y0 - fr.top) << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = fr.yr.lo + (fr.yr.hi - fr.yr.lo) * i / 4.0;
    os << "<text x=\"" << f(x0 - 4) << "\" y=\"" << f(fr.py(yv) + 4) << "\" text-anchor=\"end\">" << tick(yv)
       << "</text>\n";
  }
  const double zero = fr.py(0.0);
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double a = fr.px(static_cast<double>(i) + 0.15), b = fr.px(static_cast<double>(i) + 0.85);
    if (std::isfinite(bars[i].value)) {
      const double top = fr.py(bars[i].value);
      os << "<rect x=\"" << f(a) << "\" y=\"" << f(std::min(top, zero)) << "\" width=\"" << f(b - a) << "\" height=\""
         << f(std::abs(zero - top)) << "\" fill=\"" << kPalette[0] << "\"/>\n";
    }
    const double cx = (a + b) / 2;
    os << "<text x=\"" << f(cx) << "\" y=\"" << f(y0 + 12) << "\" text-anchor=\"end\" transform=\"rotate(-40 " << f(cx)
       << ' ' << f(y0 + 12) << ")\">" << escape(bars[i].label) << "</text>\n";
  }
  os << "<line x1=\"" << f(x0) << "\" y1=\"" << f(zero) << "\" x2=\"" << f(fr.w - fr.right) << "\" y2=\"" << f(zero)
     << "\" stroke=\"#333\"/>\n";
  if (!o.y_label.empty()) {
    os << "<text x=\"14\" y=\"" << f((y0 + fr.top) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
       << f((y0 + fr.top) / 2) << ")\">" << escape(o.y_label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace gradshield::svg
