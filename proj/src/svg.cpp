#include "gues/svg.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace gues {

namespace {

constexpr std::array<const char*, 8> kPalette{"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                              "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string num(double v, int precision = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string header(int width, int height) {
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  return os.str();
}

}  // namespace

std::string xml_escape(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string svg_line_plot(const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<Series>& series) {
  constexpr int kWidth = 640, kHeight = 420;
  constexpr double kLeft = 70, kRight = 170, kTop = 40, kBottom = 60;
  const double plot_w = kWidth - kLeft - kRight, plot_h = kHeight - kTop - kBottom;

  double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo;
  double y_lo = x_lo, y_hi = -x_lo;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x_lo = std::min(x_lo, s.x[i]);
      x_hi = std::max(x_hi, s.x[i]);
      y_lo = std::min(y_lo, s.y[i]);
      y_hi = std::max(y_hi, s.y[i]);
    }
  }
  if (!std::isfinite(x_lo)) x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;
  if (x_hi == x_lo) x_lo -= 0.5, x_hi += 0.5;
  if (y_hi == y_lo) y_lo -= 0.5, y_hi += 0.5;
  const double y_pad = 0.05 * (y_hi - y_lo);
  y_lo -= y_pad;
  y_hi += y_pad;
  auto px = [&](double x) { return kLeft + (x - x_lo) / (x_hi - x_lo) * plot_w; };
  auto py = [&](double y) { return kTop + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h; };

  std::ostringstream os;
  os << header(kWidth, kHeight);
  os << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
     << xml_escape(title) << "</text>\n";
  os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << plot_w << "\" height=\"" << plot_h
     << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int t = 0; t <= 5; ++t) {
    const double xv = x_lo + (x_hi - x_lo) * t / 5.0, yv = y_lo + (y_hi - y_lo) * t / 5.0;
    os << "<line x1=\"" << num(px(xv)) << "\" y1=\"" << kTop + plot_h << "\" x2=\"" << num(px(xv))
       << "\" y2=\"" << kTop + plot_h + 5 << "\" stroke=\"#333\"/>\n"
       << "<text x=\"" << num(px(xv)) << "\" y=\"" << kTop + plot_h + 19
       << "\" text-anchor=\"middle\">" << num(xv, 1) << "</text>\n"
       << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << num(py(yv)) << "\" x2=\"" << kLeft << "\" y2=\""
       << num(py(yv)) << "\" stroke=\"#333\"/>\n"
       << "<text x=\"" << kLeft - 8 << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\">"
       << num(yv, 3) << "</text>\n";
  }
  os << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kHeight - 18 << "\" text-anchor=\"middle\">"
     << xml_escape(x_label) << "</text>\n";
  os << "<text x=\"18\" y=\"" << kTop + plot_h / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
     << kTop + plot_h / 2 << ")\">" << xml_escape(y_label) << "</text>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % kPalette.size()];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      os << num(px(s.x[i])) << ',' << num(py(s.y[i])) << ' ';
    }
    os << "\"/>\n";
    const double ly = kTop + 16.0 * static_cast<double>(k) + 8;
    os << "<line x1=\"" << kLeft + plot_w + 12 << "\" y1=\"" << ly << "\" x2=\"" << kLeft + plot_w + 32
       << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
       << "<text x=\"" << kLeft + plot_w + 38 << "\" y=\"" << ly + 4 << "\">" << xml_escape(s.label)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string svg_heat_table(const std::string& title, const std::vector<std::string>& row_labels,
                           const std::vector<std::string>& col_labels,
                           const std::vector<std::vector<double>>& values) {
  constexpr int kCell = 56, kLeft = 90, kTop = 70;
  const int rows = static_cast<int>(row_labels.size()), cols = static_cast<int>(col_labels.size());
  const int width = kLeft + cols * kCell + 20, height = kTop + rows * kCell + 20;

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& row : values) {
    for (double v : row) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  const double span = hi > lo ? hi - lo : 1.0;

  std::ostringstream os;
  os << header(width, height);
  os << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
     << xml_escape(title) << "</text>\n";
  for (int c = 0; c < cols; ++c) {
    os << "<text x=\"" << kLeft + c * kCell + kCell / 2 << "\" y=\"" << kTop - 8
       << "\" text-anchor=\"middle\" font-size=\"10\">" << xml_escape(col_labels[static_cast<std::size_t>(c)])
       << "</text>\n";
  }
  for (int r = 0; r < rows; ++r) {
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << kTop + r * kCell + kCell / 2 + 4
       << "\" text-anchor=\"end\" font-size=\"10\">" << xml_escape(row_labels[static_cast<std::size_t>(r)])
       << "</text>\n";
    for (int c = 0; c < cols; ++c) {
      const auto& row = values[static_cast<std::size_t>(r)];
      const double v = static_cast<std::size_t>(c) < row.size() ? row[static_cast<std::size_t>(c)]
                                                                 : std::numeric_limits<double>::quiet_NaN();
      const double t = std::isfinite(v) ? (v - lo) / span : 0.0;
      const int red = static_cast<int>(std::lround(255 - 200 * t));
      const int green = static_cast<int>(std::lround(255 - 120 * t));
      os << "<rect x=\"" << kLeft + c * kCell << "\" y=\"" << kTop + r * kCell << "\" width=\"" << kCell
         << "\" height=\"" << kCell << "\" fill=\"rgb(" << red << ',' << green
         << ",255)\" stroke=\"white\"/>\n"
         << "<text x=\"" << kLeft + c * kCell + kCell / 2 << "\" y=\"" << kTop + r * kCell + kCell / 2 + 4
         << "\" text-anchor=\"middle\" font-size=\"10\">" << (std::isfinite(v) ? num(v, 3) : "n/a")
         << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace gues
