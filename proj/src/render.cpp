#include "ebench/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <vector>

namespace ebench::render {
namespace {

constexpr const char* kRed = "#ff0051";
constexpr const char* kBlue = "#008bfb";

std::string num(double v, const char* fmt = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
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

}  // namespace

std::string force_text(const explain::ForceData& f) {
  std::vector<explain::ForceEntry> all = f.positive;
  all.insert(all.end(), f.negative.begin(), f.negative.end());
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return std::fabs(a.phi) > std::fabs(b.phi); });
  std::size_t width = 10;
  for (const auto& e : all) width = std::max(width, e.feature.size() + 3 + num(e.value).size());
  std::ostringstream os;
  os << "base value: " << num(f.base_value, "%.6g") << '\n';
  os << "prediction: " << num(f.output_value, "%.6g") << '\n';
  for (const auto& e : all) {
    std::string label = e.feature + " = " + num(e.value);
    label.resize(width, ' ');
    os << (e.phi > 0 ? "+ " : "- ") << label << "  " << num(e.phi, "%+.6g") << '\n';
  }
  return os.str();
}

std::string force_svg(const explain::ForceData& f) {
  constexpr double kWidth = 800.0;
  constexpr double kMargin = 40.0;
  constexpr double kBarY = 60.0;
  constexpr double kBarH = 24.0;

  double push_up = 0.0;
  double push_down = 0.0;
  for (const auto& e : f.positive) push_up += e.phi;
  for (const auto& e : f.negative) push_down -= e.phi;
  const bool empty = f.positive.empty() && f.negative.empty();

  double lo = std::min({f.base_value, f.output_value, f.output_value - push_up});
  double hi = std::max({f.base_value, f.output_value, f.output_value + push_down});
  if (!(hi > lo)) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double span = hi - lo;
  auto px = [&](double v) { return kMargin + (v - lo) / span * (kWidth - 2 * kMargin); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"170\" viewBox=\"0 0 "
     << kWidth << " 170\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<line x1=\"" << kMargin << "\" y1=\"" << kBarY + kBarH + 4 << "\" x2=\"" << kWidth - kMargin << "\" y2=\""
     << kBarY + kBarH + 4 << "\" stroke=\"#999\"/>\n";

  auto marker = [&](double v, const std::string& label, double y) {
    os << "<line class=\"marker\" x1=\"" << num(px(v)) << "\" y1=\"" << kBarY - 12 << "\" x2=\"" << num(px(v))
       << "\" y2=\"" << kBarY + kBarH + 8 << "\" stroke=\"#333\" stroke-width=\"1.5\"/>\n";
    os << "<text x=\"" << num(px(v)) << "\" y=\"" << y << "\" text-anchor=\"middle\">" << xml_escape(label) << ' '
       << num(v, "%.4g") << "</text>\n";
  };

  // Red segments end at the output value, largest nearest to it; blue
  // segments start there and extend right.
  auto bars = [&](const std::vector<explain::ForceEntry>& entries, const char* color, bool left) {
    double edge = f.output_value;
    int row = 0;
    for (const auto& e : entries) {
      const double next = edge - e.phi;
      const double a = px(std::min(edge, next));
      const double b = px(std::max(edge, next));
      os << "<rect class=\"" << (left ? "positive" : "negative") << "\" x=\"" << num(a) << "\" y=\"" << kBarY
         << "\" width=\"" << num(std::max(b - a, 0.5)) << "\" height=\"" << kBarH << "\" fill=\"" << color
         << "\" stroke=\"white\"/>\n";
      os << "<text x=\"" << num((a + b) / 2) << "\" y=\"" << kBarY + kBarH + 20 + 13 * (row % 3)
         << "\" text-anchor=\"middle\" fill=\"" << color << "\">" << xml_escape(e.feature) << " = " << num(e.value)
         << "</text>\n";
      edge = next;
      ++row;
    }
  };

  if (empty) {
    marker(f.base_value, "base value", kBarY - 16);
  } else {
    bars(f.positive, kRed, true);
    bars(f.negative, kBlue, false);
    marker(f.base_value, "base value", kBarY - 16);
    marker(f.output_value, "f(x)", kBarY - 30);
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace ebench::render
