#pragma once

// Per-slice overlap and distance metrics, median aggregation, metrics CSV.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "tscnn/errors.hpp"

namespace tscnn {

/// A binary 2D mask, row-major.
struct MaskSlice {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  MaskSlice() = default;
  MaskSlice(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w, 0) {}
  MaskSlice(std::size_t h, std::size_t w, std::vector<std::uint8_t> px) : height(h), width(w), pixels(std::move(px)) {
    if (pixels.size() != h * w) throw InvalidShape("MaskSlice: pixel count does not match extents");
  }

  std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  bool empty() const {
    return std::none_of(pixels.begin(), pixels.end(), [](std::uint8_t v) { return v != 0; });
  }
};

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::uint64_t total() const { return tp + fp + tn + fn; }
};

struct MetricsRecord {
  std::string slice_id;
  double dsc = 1;
  double sensitivity = 1;
  double specificity = 1;
  double hausdorff_mm = 0;
  bool gt_empty = false;
  bool pred_empty = false;
};

struct MetricsSummary {
  double dsc = 0;
  double sensitivity = 0;
  double specificity = 0;
  double hausdorff_mm = 0;
};

struct HausdorffResult {
  double mm = 0;
  bool degenerate = false;  // at least one mask empty
};

namespace detail {
inline void check_same_extent(const MaskSlice& a, const MaskSlice& b, const char* op) {
  if (a.height != b.height || a.width != b.width) {
    throw InvalidShape(std::string(op) + ": mask extents differ (" + std::to_string(a.height) + "x" +
                       std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) +
                       ")");
  }
}
}  // namespace detail

inline ConfusionCounts confusion(const MaskSlice& pred, const MaskSlice& gt) {
  detail::check_same_extent(pred, gt, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    const bool p = pred.pixels[i] != 0, g = gt.pixels[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// Zero denominators score 1.0: nothing to find and nothing missed.
inline double dsc(const ConfusionCounts& c) {
  const auto d = 2 * c.tp + c.fp + c.fn;
  return d == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(d);
}
inline double sensitivity(const ConfusionCounts& c) {
  const auto d = c.tp + c.fn;
  return d == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(d);
}
inline double specificity(const ConfusionCounts& c) {
  const auto d = c.tn + c.fp;
  return d == 0 ? 1.0 : static_cast<double>(c.tn) / static_cast<double>(d);
}

namespace detail {

// 1D squared-distance transform (Felzenszwalb & Huttenlocher lower envelope).
// f[q] is the cost at q, positions are q * step.
inline void distance_transform_1d(const std::vector<double>& f, double step, std::vector<double>& out,
                                  std::vector<std::size_t>& v, std::vector<double>& z) {
  const std::size_t n = f.size();
  const double inf = std::numeric_limits<double>::infinity();
  out.assign(n, inf);
  v.assign(n, 0);
  z.assign(n + 1, 0);
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (std::isinf(f[q])) continue;
    if (!any) {
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      any = true;
      continue;
    }
    const double pq = static_cast<double>(q) * step;
    auto intersect = [&](std::size_t r) {
      const double pr = static_cast<double>(r) * step;
      return ((f[q] + pq * pq) - (f[r] + pr * pr)) / (2.0 * (pq - pr));
    };
    double s = intersect(v[k]);
    while (s <= z[k]) s = intersect(v[--k]);  // z[0] = -inf stops the walk
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (!any) return;
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double pq = static_cast<double>(q) * step;
    while (z[k + 1] < pq) ++k;
    // Evaluate with the exact integer offset; neighbouring sites guard against
    // an envelope breakpoint rounded to the wrong side of q.
    // Explicit fma: the rounding must not depend on whether the compiler contracts.
    auto cost = [&](std::size_t site) {
      const double d = (static_cast<double>(q) - static_cast<double>(site)) * step;
      return std::fma(d, d, f[site]);
    };
    double best = cost(v[k]);
    if (k > 0) best = std::min(best, cost(v[k - 1]));
    if (z[k + 1] != inf) best = std::min(best, cost(v[k + 1]));
    out[q] = best;
  }
}

}  // namespace detail

/// Squared Euclidean distance (in mm^2) from every pixel center to the nearest
/// foreground pixel center of `mask`. Infinite when the mask is empty.
inline std::vector<double> squared_distance_map(const MaskSlice& mask, double spacing_y, double spacing_x) {
  const double inf = std::numeric_limits<double>::infinity();
  const std::size_t h = mask.height, w = mask.width;
  std::vector<double> cols(h * w, inf);
  std::vector<double> f, out, z;
  std::vector<std::size_t> v;
  // Column pass: (spacing_y * dy)^2 to the nearest foreground pixel in the column.
  f.resize(h);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) f[y] = mask.at(y, x) ? 0.0 : inf;
    detail::distance_transform_1d(f, spacing_y, out, v, z);
    for (std::size_t y = 0; y < h; ++y) cols[y * w + x] = out[y];
  }
  // Row pass adds (spacing_x * dx)^2.
  std::vector<double> result(h * w, inf);
  f.resize(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) f[x] = cols[y * w + x];
    detail::distance_transform_1d(f, spacing_x, out, v, z);
    for (std::size_t x = 0; x < w; ++x) result[y * w + x] = out[x];
  }
  return result;
}

inline double image_diagonal_mm(std::size_t h, std::size_t w, double spacing_y, double spacing_x) {
  const double a = static_cast<double>(h) * spacing_y, b = static_cast<double>(w) * spacing_x;
  return std::sqrt(a * a + b * b);
}

/// Symmetric Hausdorff distance between the foreground pixel centers of two masks.
inline HausdorffResult hausdorff(const MaskSlice& pred, const MaskSlice& gt, double spacing_y, double spacing_x) {
  detail::check_same_extent(pred, gt, "hausdorff");
  if (!(spacing_y > 0) || !(spacing_x > 0)) throw InvalidArgument("hausdorff: spacing must be positive");
  const bool pe = pred.empty(), ge = gt.empty();
  if (pe && ge) return {0.0, true};
  if (pe || ge) return {image_diagonal_mm(pred.height, pred.width, spacing_y, spacing_x), true};
  auto directed_sq = [](const MaskSlice& from, const std::vector<double>& to_map) {
    double worst = 0;
    for (std::size_t i = 0; i < from.pixels.size(); ++i)
      if (from.pixels[i]) worst = std::max(worst, to_map[i]);
    return worst;
  };
  const double a = directed_sq(pred, squared_distance_map(gt, spacing_y, spacing_x));
  const double b = directed_sq(gt, squared_distance_map(pred, spacing_y, spacing_x));
  return {std::sqrt(std::max(a, b)), false};
}

inline HausdorffResult hausdorff(const MaskSlice& pred, const MaskSlice& gt, double spacing = 1.0) {
  return hausdorff(pred, gt, spacing, spacing);
}

inline MetricsRecord evaluate_slice(std::string id, const MaskSlice& pred, const MaskSlice& gt, double spacing_y,
                                    double spacing_x) {
  const auto c = confusion(pred, gt);
  MetricsRecord r;
  r.slice_id = std::move(id);
  r.dsc = dsc(c);
  r.sensitivity = sensitivity(c);
  r.specificity = specificity(c);
  r.hausdorff_mm = hausdorff(pred, gt, spacing_y, spacing_x).mm;
  r.gt_empty = c.tp + c.fn == 0;
  r.pred_empty = c.tp + c.fp == 0;
  return r;
}

/// Median; even counts average the two middle values.
inline double median(std::vector<double> values) {
  if (values.empty()) throw InvalidArgument("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

/// Per-metric medians. Degenerate-Hausdorff slices participate with their penalty value.
inline MetricsSummary aggregate(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw InvalidArgument("aggregate: no metrics records");
  std::vector<double> d, se, sp, hd;
  for (const auto& r : records) {
    d.push_back(r.dsc);
    se.push_back(r.sensitivity);
    sp.push_back(r.specificity);
    hd.push_back(r.hausdorff_mm);
  }
  return {median(d), median(se), median(sp), median(hd)};
}

inline std::string format_fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string metrics_csv(const std::vector<MetricsRecord>& records) {
  std::string out = "slice_id,dsc,sensitivity,specificity,hausdorff_mm,gt_empty,pred_empty\n";
  for (const auto& r : records) {
    out += r.slice_id + ',' + format_fixed6(r.dsc) + ',' + format_fixed6(r.sensitivity) + ',' +
           format_fixed6(r.specificity) + ',' + format_fixed6(r.hausdorff_mm) + ',' + (r.gt_empty ? "1" : "0") +
           ',' + (r.pred_empty ? "1" : "0") + '\n';
  }
  const auto m = aggregate(records);
  out += "MEDIAN," + format_fixed6(m.dsc) + ',' + format_fixed6(m.sensitivity) + ',' + format_fixed6(m.specificity) +
         ',' + format_fixed6(m.hausdorff_mm) + ",,\n";
  return out;
}

}  // namespace tscnn
