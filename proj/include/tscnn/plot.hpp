#pragma once

// Hand-emitted SVG of a training trace: background and foreground loss curves
// with the gap between them shaded, plus beta on a secondary axis.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "tscnn/harness.hpp"

namespace tscnn {

struct PlotOptions {
  /// Multiply sum_fg by beta and sum_bg by (1 - beta) before plotting. Use for
  /// SBFL traces, whose recorded sums are unweighted.
  bool weight_by_beta = false;
  int width = 900;
  int height = 480;
  std::string title = "Training loss";
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

inline std::string render_loss_svg(const std::vector<TraceRow>& rows, const PlotOptions& opt = {}) {
  if (rows.empty()) throw InvalidArgument("plot-loss: trace has no rows");
  const std::size_t n = rows.size();
  std::vector<double> bg(n), fg(n), beta(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = rows[i].report;
    beta[i] = r.beta;
    fg[i] = opt.weight_by_beta ? r.beta * r.sum_fg : r.sum_fg;
    bg[i] = opt.weight_by_beta ? (1 - r.beta) * r.sum_bg : r.sum_bg;
  }
  double ymax = 0;
  for (std::size_t i = 0; i < n; ++i) ymax = std::max({ymax, bg[i], fg[i]});
  if (!(ymax > 0) || !std::isfinite(ymax)) ymax = 1;

  const double left = 70, right = 70, top = 40, bottom = 50;
  const double pw = opt.width - left - right, ph = opt.height - top - bottom;
  auto X = [&](std::size_t i) { return left + (n == 1 ? pw / 2 : pw * static_cast<double>(i) / static_cast<double>(n - 1)); };
  auto Y = [&](double v) { return top + ph * (1 - v / ymax); };
  auto YB = [&](double b) { return top + ph * (1 - b); };  // beta axis spans [0, 1]

  auto polyline = [&](const std::vector<double>& v, auto map) {
    std::string pts;
    for (std::size_t i = 0; i < n; ++i) pts += (i ? " " : "") + detail::num(X(i)) + "," + detail::num(map(v[i]));
    return pts;
  };

  std::string gap;
  for (std::size_t i = 0; i < n; ++i) gap += (i ? " " : "") + detail::num(X(i)) + "," + detail::num(Y(fg[i]));
  for (std::size_t i = n; i-- > 0;) gap += " " + detail::num(X(i)) + "," + detail::num(Y(bg[i]));

  const std::string W = std::to_string(opt.width), H = std::to_string(opt.height);
  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + W + "\" height=\"" + H + "\" viewBox=\"0 0 " + W + " " +
       H + "\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + W + "\" height=\"" + H + "\" fill=\"white\"/>\n";
  s += "<text x=\"" + detail::num(opt.width / 2.0) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" +
       detail::xml_escape(opt.title) + "</text>\n";

  // Axes and ticks.
  s += "<g id=\"axes\" stroke=\"black\" stroke-width=\"1\" fill=\"none\">\n";
  s += "<line x1=\"" + detail::num(left) + "\" y1=\"" + detail::num(top + ph) + "\" x2=\"" + detail::num(left + pw) +
       "\" y2=\"" + detail::num(top + ph) + "\"/>\n";
  s += "<line x1=\"" + detail::num(left) + "\" y1=\"" + detail::num(top) + "\" x2=\"" + detail::num(left) + "\" y2=\"" +
       detail::num(top + ph) + "\"/>\n";
  s += "<line x1=\"" + detail::num(left + pw) + "\" y1=\"" + detail::num(top) + "\" x2=\"" + detail::num(left + pw) +
       "\" y2=\"" + detail::num(top + ph) + "\"/>\n";
  s += "</g>\n<g id=\"ticks\" font-size=\"11\" fill=\"black\">\n";
  for (int k = 0; k <= 4; ++k) {
    const double f = k / 4.0;
    char label[32];
    std::snprintf(label, sizeof label, "%.3g", ymax * f);
    s += "<text x=\"" + detail::num(left - 6) + "\" y=\"" + detail::num(Y(ymax * f) + 4) + "\" text-anchor=\"end\">" +
         label + "</text>\n";
    std::snprintf(label, sizeof label, "%.2f", f);
    s += "<text x=\"" + detail::num(left + pw + 6) + "\" y=\"" + detail::num(YB(f) + 4) + "\">" + label + "</text>\n";
  }
  s += "<text x=\"" + detail::num(left) + "\" y=\"" + detail::num(top + ph + 18) + "\">" +
       std::to_string(rows.front().step) + "</text>\n";
  s += "<text x=\"" + detail::num(left + pw) + "\" y=\"" + detail::num(top + ph + 18) + "\" text-anchor=\"end\">" +
       std::to_string(rows.back().step) + "</text>\n";
  s += "<text x=\"" + detail::num(left + pw / 2) + "\" y=\"" + detail::num(top + ph + 36) +
       "\" text-anchor=\"middle\">step</text>\n";
  s += "<text x=\"16\" y=\"" + detail::num(top + ph / 2) + "\" transform=\"rotate(-90 16 " +
       detail::num(top + ph / 2) + ")\" text-anchor=\"middle\">loss sum</text>\n";
  s += "<text x=\"" + detail::num(opt.width - 16.0) + "\" y=\"" + detail::num(top + ph / 2) + "\" transform=\"rotate(90 " +
       detail::num(opt.width - 16.0) + " " + detail::num(top + ph / 2) + ")\" text-anchor=\"middle\">beta</text>\n";
  s += "</g>\n";

  s += "<polygon id=\"gap\" points=\"" + gap + "\" fill=\"#f2b134\" fill-opacity=\"0.3\" stroke=\"none\"/>\n";
  s += "<polyline id=\"sum_bg\" points=\"" + polyline(bg, Y) + "\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n";
  s += "<polyline id=\"sum_fg\" points=\"" + polyline(fg, Y) + "\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\"/>\n";
  s += "<polyline id=\"beta\" points=\"" + polyline(beta, YB) +
       "\" fill=\"none\" stroke=\"#2ca02c\" stroke-width=\"1\" stroke-dasharray=\"4 3\"/>\n";

  // Legend.
  const double lx = left + 12, ly = top + 12;
  const char* names[] = {"background loss", "foreground loss", "beta"};
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c"};
  s += "<g id=\"legend\" font-size=\"12\">\n";
  for (int k = 0; k < 3; ++k) {
    const double y = ly + 16 * k;
    s += "<line x1=\"" + detail::num(lx) + "\" y1=\"" + detail::num(y) + "\" x2=\"" + detail::num(lx + 20) + "\" y2=\"" +
         detail::num(y) + "\" stroke=\"" + colors[k] + "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + detail::num(lx + 26) + "\" y=\"" + detail::num(y + 4) + "\">" + names[k] + "</text>\n";
  }
  s += "</g>\n</svg>\n";
  return s;
}

}  // namespace tscnn
