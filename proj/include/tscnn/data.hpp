#pragma once

// Volumes, synthetic lesion phantoms, the TSCV container, preprocessing,
// slice triplets, half-size patching, augmentation and k-fold splits.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tscnn/metrics.hpp"
#include "tscnn/nn.hpp"

namespace tscnn {

/// Intensity stack [D,H,W], slice-major, row-major.
struct Volume {
  std::size_t depth = 0, height = 0, width = 0;
  std::vector<float> voxels;
  float spacing_y = 1.0f, spacing_x = 1.0f;

  Volume() = default;
  Volume(std::size_t d, std::size_t h, std::size_t w, float fill = 0.0f)
      : depth(d), height(h), width(w), voxels(d * h * w, fill) {}

  std::size_t plane() const { return height * width; }
  float at(std::size_t z, std::size_t y, std::size_t x) const { return voxels[(z * height + y) * width + x]; }
  float& at(std::size_t z, std::size_t y, std::size_t x) { return voxels[(z * height + y) * width + x]; }
  std::vector<float> slice(std::size_t z) const {
    return {voxels.begin() + z * plane(), voxels.begin() + (z + 1) * plane()};
  }
  bool operator==(const Volume&) const = default;
};

/// Binary labels with the geometry of a Volume.
struct MaskVolume {
  std::size_t depth = 0, height = 0, width = 0;
  std::vector<std::uint8_t> labels;
  float spacing_y = 1.0f, spacing_x = 1.0f;

  MaskVolume() = default;
  MaskVolume(std::size_t d, std::size_t h, std::size_t w) : depth(d), height(h), width(w), labels(d * h * w, 0) {}

  std::size_t plane() const { return height * width; }
  std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const { return labels[(z * height + y) * width + x]; }
  std::uint8_t& at(std::size_t z, std::size_t y, std::size_t x) { return labels[(z * height + y) * width + x]; }
  MaskSlice slice(std::size_t z) const {
    return MaskSlice(height, width, {labels.begin() + z * plane(), labels.begin() + (z + 1) * plane()});
  }
  bool operator==(const MaskVolume&) const = default;
};

inline void check_geometry(const Volume& v, const MaskVolume& m) {
  if (v.depth != m.depth || v.height != m.height || v.width != m.width) {
    throw InvalidShape("volume " + std::to_string(v.depth) + "x" + std::to_string(v.height) + "x" +
                       std::to_string(v.width) + " and mask " + std::to_string(m.depth) + "x" +
                       std::to_string(m.height) + "x" + std::to_string(m.width) + " differ in geometry");
  }
}

// ---------------------------------------------------------------------------
// Phantoms
// ---------------------------------------------------------------------------

struct PhantomConfig {
  std::size_t image_size = 64;
  std::size_t slices = 8;
  std::size_t lesion_count_min = 2;
  std::size_t lesion_count_max = 5;
  double lesion_radius_min = 1.5;  // px, radius of the half-peak disk
  double lesion_radius_max = 3.0;
  std::size_t lesion_extent_min = 1;  // consecutive slices
  std::size_t lesion_extent_max = 3;
  double lesion_gain = 0.5;
  std::size_t distractor_count = 2;
  std::size_t texture_smoothness = 3;  // box-blur passes over the noise field
  double texture_amplitude = 0.06;
  double noise_sigma = 0.01;
  double spacing_mm = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (image_size < 16) throw ConfigError("phantom image_size must be >= 16");
    if (slices < 1) throw ConfigError("phantom slices must be >= 1");
    if (lesion_count_min > lesion_count_max) throw ConfigError("lesion count range is empty");
    if (lesion_radius_min < 1.0 || lesion_radius_min > lesion_radius_max) {
      throw ConfigError("lesion radii must satisfy 1 <= min <= max");
    }
    if (lesion_extent_min < 1 || lesion_extent_min > lesion_extent_max || lesion_extent_max > slices) {
      throw ConfigError("lesion extents must satisfy 1 <= min <= max <= slices");
    }
    if (!(spacing_mm > 0)) throw ConfigError("spacing_mm must be positive");
  }
};

enum class Region : std::uint8_t { Outside = 0, Skull = 1, Brain = 2, Band = 3 };

struct Phantom {
  Volume image;
  MaskVolume mask;
  std::vector<Region> region;  // in-plane map, shared by all slices
  MaskVolume distractors;      // half-peak footprint of every distractor
};

namespace detail {

struct Disk {
  double cy, cx, radius;
};

inline std::vector<double> smooth_field(std::size_t n, std::size_t passes, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> f(n * n);
  for (auto& v : f) v = normal(rng);
  std::vector<double> tmp(n * n);
  for (std::size_t p = 0; p < passes; ++p) {
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        double s = 0;
        int c = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(n) || xx >= static_cast<long>(n)) continue;
            s += f[yy * n + xx];
            ++c;
          }
        tmp[y * n + x] = s / c;
      }
    f.swap(tmp);
  }
  double sd = 0;
  for (double v : f) sd += v * v;
  sd = std::sqrt(sd / static_cast<double>(f.size()));
  if (sd > 0)
    for (auto& v : f) v /= sd;
  return f;
}

/// True when every pixel within `reach` of (cy, cx) lies in the image and satisfies `ok`.
template <class Pred>
bool disk_fits(std::size_t n, double cy, double cx, double reach, Pred ok) {
  const long r = static_cast<long>(std::ceil(reach));
  for (long dy = -r; dy <= r; ++dy)
    for (long dx = -r; dx <= r; ++dx) {
      if (static_cast<double>(dy * dy + dx * dx) > reach * reach) continue;
      const long y = static_cast<long>(cy) + dy, x = static_cast<long>(cx) + dx;
      if (y < 0 || x < 0 || y >= static_cast<long>(n) || x >= static_cast<long>(n)) return false;
      if (!ok(static_cast<std::size_t>(y), static_cast<std::size_t>(x))) return false;
    }
  return true;
}

/// Adds a Gaussian bump whose half-peak level set is the disk; marks that disk in `mask_plane`.
inline void stamp_blob(std::size_t n, const Disk& d, double gain, float* image_plane, std::uint8_t* mask_plane) {
  const double sigma = d.radius / std::sqrt(2.0 * std::log(2.0));
  const long reach = static_cast<long>(std::ceil(3.0 * sigma));
  for (long dy = -reach; dy <= reach; ++dy)
    for (long dx = -reach; dx <= reach; ++dx) {
      const long y = static_cast<long>(d.cy) + dy, x = static_cast<long>(d.cx) + dx;
      if (y < 0 || x < 0 || y >= static_cast<long>(n) || x >= static_cast<long>(n)) continue;
      const double r2 = static_cast<double>(dy * dy + dx * dx);
      const double profile = std::exp(-r2 / (2.0 * sigma * sigma));
      image_plane[y * n + x] += static_cast<float>(gain * profile);
      if (profile > 0.5) mask_plane[y * n + x] = 1;
    }
}

}  // namespace detail

/// Synthetic T1-like slice stack: elliptical skull rim, textured interior with
/// a white-matter band, bright punctate lesions inside the band (mask = half-peak
/// disk), and bright non-lesion distractors outside it. Fully determined by cfg.
inline Phantom generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = cfg.image_size, depth = cfg.slices;
  const auto nd = static_cast<double>(n);

  const double scale = 0.9 + 0.1 * unit(rng);
  const double cy = (nd - 1) / 2 + (unit(rng) - 0.5) * 4, cx = (nd - 1) / 2 + (unit(rng) - 0.5) * 4;
  const double ay = 0.46 * nd * scale, ax = 0.40 * nd * scale;

  Phantom ph;
  ph.region.assign(n * n, Region::Outside);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double ry = (static_cast<double>(y) - cy) / ay, rx = (static_cast<double>(x) - cx) / ax;
      const double rho = std::sqrt(ry * ry + rx * rx);
      Region r = Region::Outside;
      if (rho <= 1.0) r = Region::Skull;
      if (rho <= 0.86) r = Region::Brain;
      if (rho >= 0.28 && rho <= 0.75) r = Region::Band;
      ph.region[y * n + x] = r;
    }

  ph.image = Volume(depth, n, n);
  ph.mask = MaskVolume(depth, n, n);
  ph.distractors = MaskVolume(depth, n, n);
  for (auto* g : {&ph.image.spacing_y, &ph.image.spacing_x, &ph.mask.spacing_y, &ph.mask.spacing_x,
                  &ph.distractors.spacing_y, &ph.distractors.spacing_x})
    *g = static_cast<float>(cfg.spacing_mm);

  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  for (std::size_t z = 0; z < depth; ++z) {
    const auto texture = detail::smooth_field(n, cfg.texture_smoothness, rng);
    for (std::size_t i = 0; i < n * n; ++i) {
      double v = 0.02;
      switch (ph.region[i]) {
        case Region::Skull: v = 0.9; break;
        case Region::Brain: v = 0.30 + cfg.texture_amplitude * texture[i]; break;
        case Region::Band: v = 0.40 + cfg.texture_amplitude * texture[i]; break;
        case Region::Outside: break;
      }
      ph.image.voxels[z * n * n + i] = static_cast<float>(std::max(0.0, v + noise(rng)));
    }
  }

  auto pick_extent = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  auto region_at = [&](std::size_t y, std::size_t x) { return ph.region[y * n + x]; };
  constexpr double kJitterReach = 1.0;  // per-slice centres move at most 1 px

  // Every centre whose reach disk satisfies `ok`; placement draws uniformly from these.
  auto candidates = [&](double reach, auto ok, bool lower_half) {
    std::vector<std::pair<double, double>> out;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        if (lower_half && static_cast<double>(y) < cy) continue;
        if (detail::disk_fits(n, static_cast<double>(y), static_cast<double>(x), reach, ok))
          out.emplace_back(static_cast<double>(y), static_cast<double>(x));
      }
    return out;
  };
  auto in_band = [&](std::size_t y, std::size_t x) { return region_at(y, x) == Region::Band; };
  auto off_band = [&](std::size_t y, std::size_t x) {
    auto r = region_at(y, x);
    return r == Region::Brain || r == Region::Skull;
  };

  const std::size_t lesions = pick_extent(cfg.lesion_count_min, cfg.lesion_count_max);
  for (std::size_t l = 0; l < lesions; ++l) {
    const double radius = cfg.lesion_radius_min + (cfg.lesion_radius_max - cfg.lesion_radius_min) * unit(rng);
    const std::size_t extent = pick_extent(cfg.lesion_extent_min, cfg.lesion_extent_max);
    const std::size_t z0 = pick_extent(0, depth - extent);
    const auto spots = candidates(radius + kJitterReach, in_band, false);
    if (spots.empty()) {
      throw GenerationError("cannot place a lesion of radius " + std::to_string(radius) +
                            " px inside the white-matter band: no position fits");
    }
    const auto [py, px] = spots[std::uniform_int_distribution<std::size_t>(0, spots.size() - 1)(rng)];
    // Per-slice jitter: the centre or one of its 4-neighbours, so any two
    // slices of a lesion stay within 2 px of each other.
    static constexpr int kStep[5][2] = {{0, 0}, {-1, 0}, {1, 0}, {0, -1}, {0, 1}};
    std::uniform_int_distribution<int> jitter(0, 4);
    for (std::size_t z = z0; z < z0 + extent; ++z) {
      const auto& j = kStep[jitter(rng)];
      detail::Disk d{py + j[0], px + j[1], radius};
      detail::stamp_blob(n, d, cfg.lesion_gain, ph.image.voxels.data() + z * n * n, ph.mask.labels.data() + z * n * n);
    }
  }

  for (std::size_t k = 0; k < cfg.distractor_count; ++k) {
    // The first distractor is a larger hemorrhage-like blob in the lower half;
    // the rest are small bright spots anywhere off the band.
    const bool hemorrhage = k == 0;
    const double radius = hemorrhage ? 2.0 + 1.0 * unit(rng) : 1.5 + 1.0 * unit(rng);
    const std::size_t extent = pick_extent(1, std::min<std::size_t>(3, depth));
    const std::size_t z0 = pick_extent(0, depth - extent);
    const auto spots = candidates(radius + 0.5, off_band, hemorrhage);
    if (spots.empty()) {
      throw GenerationError("cannot place a distractor of radius " + std::to_string(radius) +
                            " px outside the white-matter band: no position fits");
    }
    const auto [py, px] = spots[std::uniform_int_distribution<std::size_t>(0, spots.size() - 1)(rng)];
    for (std::size_t z = z0; z < z0 + extent; ++z) {
      detail::stamp_blob(n, {py, px, radius}, cfg.lesion_gain, ph.image.voxels.data() + z * n * n,
                         ph.distractors.labels.data() + z * n * n);
    }
  }
  return ph;
}

// ---------------------------------------------------------------------------
// TSCV container
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kVolumeVersion = 1;

namespace detail {

inline std::string encode_header(std::uint8_t kind, std::size_t d, std::size_t h, std::size_t w, float sy, float sx) {
  std::string buf = "TSCV";
  io::put_u32(buf, kVolumeVersion);
  io::put_u8(buf, kind);
  io::put_u32(buf, static_cast<std::uint32_t>(d));
  io::put_u32(buf, static_cast<std::uint32_t>(h));
  io::put_u32(buf, static_cast<std::uint32_t>(w));
  io::put_f32(buf, sy);
  io::put_f32(buf, sx);
  return buf;
}

struct TscvHeader {
  std::uint8_t kind;
  std::size_t d, h, w;
  float sy, sx;
};

inline TscvHeader decode_header(io::Reader& r, std::uint8_t expected_kind) {
  const std::string magic = r.bytes(4, "magic");
  if (magic != "TSCV") throw FormatError("bad magic '" + magic + "', expected 'TSCV'", 0);
  const auto version_at = r.offset();
  if (auto v = r.u32("version"); v != kVolumeVersion) {
    throw FormatError("unsupported TSCV version " + std::to_string(v), version_at);
  }
  const auto kind_at = r.offset();
  TscvHeader hd{};
  hd.kind = r.u8("kind");
  if (hd.kind > 1) throw FormatError("unknown TSCV kind " + std::to_string(hd.kind), kind_at);
  if (hd.kind != expected_kind) {
    throw FormatError(std::string("TSCV kind is ") + (hd.kind ? "mask" : "intensity") + ", expected " +
                          (expected_kind ? "mask" : "intensity"),
                      kind_at);
  }
  const auto dims_at = r.offset();
  hd.d = r.u32("depth");
  hd.h = r.u32("height");
  hd.w = r.u32("width");
  if (hd.d == 0 || hd.h == 0 || hd.w == 0) throw FormatError("zero extent in TSCV header", dims_at);
  const auto spacing_at = r.offset();
  hd.sy = r.f32("spacing_y");
  hd.sx = r.f32("spacing_x");
  if (!(hd.sy > 0) || !(hd.sx > 0) || !std::isfinite(hd.sy) || !std::isfinite(hd.sx)) {
    throw FormatError("non-positive pixel spacing", spacing_at);
  }
  return hd;
}

}  // namespace detail

inline std::string encode_volume(const Volume& v) {
  std::string buf = detail::encode_header(0, v.depth, v.height, v.width, v.spacing_y, v.spacing_x);
  for (float f : v.voxels) io::put_f32(buf, f);
  return buf;
}

inline std::string encode_mask(const MaskVolume& m) {
  std::string buf = detail::encode_header(1, m.depth, m.height, m.width, m.spacing_y, m.spacing_x);
  buf.append(m.labels.begin(), m.labels.end());
  return buf;
}

inline Volume decode_volume(std::string bytes) {
  io::Reader r(std::move(bytes));
  auto hd = detail::decode_header(r, 0);
  Volume v(hd.d, hd.h, hd.w);
  v.spacing_y = hd.sy;
  v.spacing_x = hd.sx;
  r.need(v.voxels.size() * 4, "intensity payload");
  for (auto& f : v.voxels) {
    const auto at = r.offset();
    f = r.f32("intensity payload");
    if (!std::isfinite(f)) throw FormatError("non-finite intensity", at);
  }
  if (!r.at_end()) throw FormatError("trailing bytes after payload", r.offset());
  return v;
}

inline MaskVolume decode_mask(std::string bytes) {
  io::Reader r(std::move(bytes));
  auto hd = detail::decode_header(r, 1);
  MaskVolume m(hd.d, hd.h, hd.w);
  m.spacing_y = hd.sy;
  m.spacing_x = hd.sx;
  r.need(m.labels.size(), "mask payload");
  for (auto& l : m.labels) {
    const auto at = r.offset();
    l = r.u8("mask payload");
    if (l > 1) throw FormatError("mask label " + std::to_string(l) + " is not binary", at);
  }
  if (!r.at_end()) throw FormatError("trailing bytes after payload", r.offset());
  return m;
}

inline void write_volume(const std::filesystem::path& path, const Volume& v) {
  io::write_file_atomic(path, encode_volume(v));
}
inline Volume read_volume(const std::filesystem::path& path) { return decode_volume(io::read_file(path)); }
inline void write_mask(const std::filesystem::path& path, const MaskVolume& m) {
  io::write_file_atomic(path, encode_mask(m));
}
inline MaskVolume read_mask(const std::filesystem::path& path) { return decode_mask(io::read_file(path)); }

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Square in-plane window; may extend past the image when the image is not square.
struct CropBox {
  long y0 = 0, x0 = 0;
  std::size_t side = 0;
};

/// Bounding box of voxels above `threshold_fraction` of the volume max,
/// grown to a centered square and shifted to stay inside the image.
inline CropBox skull_square_box(const Volume& v, double threshold_fraction = 0.1) {
  if (v.voxels.empty()) throw PreprocessError("crop: empty volume");
  const float peak = *std::max_element(v.voxels.begin(), v.voxels.end());
  if (!(peak > 0.0f)) throw PreprocessError("crop: no foreground (volume max is not positive)");
  const double thr = threshold_fraction * peak;
  std::size_t y0 = v.height, y1 = 0, x0 = v.width, x1 = 0;
  bool any = false;
  for (std::size_t z = 0; z < v.depth; ++z)
    for (std::size_t y = 0; y < v.height; ++y)
      for (std::size_t x = 0; x < v.width; ++x)
        if (v.at(z, y, x) > thr) {
          any = true;
          y0 = std::min(y0, y);
          y1 = std::max(y1, y);
          x0 = std::min(x0, x);
          x1 = std::max(x1, x);
        }
  if (!any) throw PreprocessError("crop: no voxel above the foreground threshold");
  const std::size_t bh = y1 - y0 + 1, bw = x1 - x0 + 1;
  const std::size_t side = std::max(bh, bw);
  auto place = [side](std::size_t lo, std::size_t extent, std::size_t limit) {
    long start = static_cast<long>(lo) - static_cast<long>((side - extent) / 2);
    if (side <= limit) return std::clamp(start, 0L, static_cast<long>(limit - side));
    return -static_cast<long>((side - limit) / 2);
  };
  return {place(y0, bh, v.height), place(x0, bw, v.width), side};
}

inline Volume crop(const Volume& v, const CropBox& box) {
  Volume out(v.depth, box.side, box.side);
  out.spacing_y = v.spacing_y;
  out.spacing_x = v.spacing_x;
  for (std::size_t z = 0; z < v.depth; ++z)
    for (std::size_t y = 0; y < box.side; ++y)
      for (std::size_t x = 0; x < box.side; ++x) {
        const long sy = box.y0 + static_cast<long>(y), sx = box.x0 + static_cast<long>(x);
        if (sy >= 0 && sx >= 0 && sy < static_cast<long>(v.height) && sx < static_cast<long>(v.width))
          out.at(z, y, x) = v.at(z, sy, sx);
      }
  return out;
}

inline MaskVolume crop(const MaskVolume& m, const CropBox& box) {
  MaskVolume out(m.depth, box.side, box.side);
  out.spacing_y = m.spacing_y;
  out.spacing_x = m.spacing_x;
  for (std::size_t z = 0; z < m.depth; ++z)
    for (std::size_t y = 0; y < box.side; ++y)
      for (std::size_t x = 0; x < box.side; ++x) {
        const long sy = box.y0 + static_cast<long>(y), sx = box.x0 + static_cast<long>(x);
        if (sy >= 0 && sx >= 0 && sy < static_cast<long>(m.height) && sx < static_cast<long>(m.width))
          out.at(z, y, x) = m.at(z, sy, sx);
      }
  return out;
}

inline Volume crop_skull_square(const Volume& v, double threshold_fraction = 0.1) {
  return crop(v, skull_square_box(v, threshold_fraction));
}

namespace detail {
// Corner-aligned source coordinate of target index i.
inline double source_coord(std::size_t i, std::size_t src, std::size_t dst) {
  if (dst == 1 || src == 1) return 0.0;
  return static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
}
inline float rescaled_spacing(float spacing, std::size_t src, std::size_t dst) {
  if (dst == 1 || src == 1 || src == dst) return spacing;
  return static_cast<float>(spacing * static_cast<double>(src - 1) / static_cast<double>(dst - 1));
}
}  // namespace detail

/// Per-slice bilinear resampling with corner-aligned sampling.
inline Volume resample_bilinear(const Volume& v, std::size_t target_h, std::size_t target_w) {
  if (target_h == 0 || target_w == 0) throw InvalidArgument("resample: target size must be >= 1");
  Volume out(v.depth, target_h, target_w);
  out.spacing_y = detail::rescaled_spacing(v.spacing_y, v.height, target_h);
  out.spacing_x = detail::rescaled_spacing(v.spacing_x, v.width, target_w);
  for (std::size_t z = 0; z < v.depth; ++z)
    for (std::size_t y = 0; y < target_h; ++y) {
      const double sy = detail::source_coord(y, v.height, target_h);
      const std::size_t y0 = static_cast<std::size_t>(std::floor(sy));
      const std::size_t y1 = std::min(y0 + 1, v.height - 1);
      const double fy = sy - static_cast<double>(y0);
      for (std::size_t x = 0; x < target_w; ++x) {
        const double sx = detail::source_coord(x, v.width, target_w);
        const std::size_t x0 = static_cast<std::size_t>(std::floor(sx));
        const std::size_t x1 = std::min(x0 + 1, v.width - 1);
        const double fx = sx - static_cast<double>(x0);
        if (fy == 0.0 && fx == 0.0) {
          out.at(z, y, x) = v.at(z, y0, x0);
          continue;
        }
        const double top = v.at(z, y0, x0) * (1 - fx) + v.at(z, y0, x1) * fx;
        const double bottom = v.at(z, y1, x0) * (1 - fx) + v.at(z, y1, x1) * fx;
        out.at(z, y, x) = static_cast<float>(top * (1 - fy) + bottom * fy);
      }
    }
  return out;
}

inline Volume resample_bilinear(const Volume& v, std::size_t target) { return resample_bilinear(v, target, target); }

/// Nearest-neighbour resampling for labels, on the same corner-aligned grid.
inline MaskVolume resample_nearest(const MaskVolume& m, std::size_t target_h, std::size_t target_w) {
  if (target_h == 0 || target_w == 0) throw InvalidArgument("resample: target size must be >= 1");
  MaskVolume out(m.depth, target_h, target_w);
  out.spacing_y = detail::rescaled_spacing(m.spacing_y, m.height, target_h);
  out.spacing_x = detail::rescaled_spacing(m.spacing_x, m.width, target_w);
  for (std::size_t z = 0; z < m.depth; ++z)
    for (std::size_t y = 0; y < target_h; ++y) {
      const auto sy = static_cast<std::size_t>(std::lround(detail::source_coord(y, m.height, target_h)));
      for (std::size_t x = 0; x < target_w; ++x) {
        const auto sx = static_cast<std::size_t>(std::lround(detail::source_coord(x, m.width, target_w)));
        out.at(z, y, x) = m.at(z, sy, sx);
      }
    }
  return out;
}

/// Per-volume min-max rescale to [0, 1]; constant volumes become zeros.
inline Volume normalize(const Volume& v) {
  Volume out = v;
  if (v.voxels.empty()) return out;
  auto [lo, hi] = std::minmax_element(v.voxels.begin(), v.voxels.end());
  const double mn = *lo, mx = *hi;
  if (!(mx > mn)) {
    std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
    return out;
  }
  for (auto& f : out.voxels) f = static_cast<float>((f - mn) / (mx - mn));
  return out;
}

struct PreparedVolume {
  std::string id;
  Volume image;
  MaskVolume mask;
};

/// Crop to the skull square, resample to `image_size`, normalize.
inline PreparedVolume prepare_volume(std::string id, const Volume& v, const MaskVolume& m, std::size_t image_size) {
  check_geometry(v, m);
  const CropBox box = skull_square_box(v);
  PreparedVolume p;
  p.id = std::move(id);
  p.image = normalize(resample_bilinear(crop(v, box), image_size, image_size));
  p.mask = resample_nearest(crop(m, box), image_size, image_size);
  return p;
}

// ---------------------------------------------------------------------------
// Triplets, patches, augmentation
// ---------------------------------------------------------------------------

/// (I_{t-1}, I_t, I_{t+1}) plus the target mask of I_t; all planes height x width.
struct SliceTriplet {
  std::size_t height = 0, width = 0;
  std::vector<float> prev, cur, next, target;
  bool operator==(const SliceTriplet&) const = default;

  bool has_foreground() const {
    return std::any_of(target.begin(), target.end(), [](float v) { return v > 0.5f; });
  }
};

/// One triplet per slice; the first and last slices reuse themselves as the missing neighbour.
inline std::vector<SliceTriplet> make_triplets(const Volume& v, const MaskVolume& m) {
  check_geometry(v, m);
  std::vector<SliceTriplet> out;
  for (std::size_t t = 0; t < v.depth; ++t) {
    SliceTriplet s;
    s.height = v.height;
    s.width = v.width;
    s.prev = v.slice(t == 0 ? 0 : t - 1);
    s.cur = v.slice(t);
    s.next = v.slice(t + 1 == v.depth ? t : t + 1);
    s.target.resize(m.plane());
    for (std::size_t i = 0; i < m.plane(); ++i) s.target[i] = m.labels[t * m.plane() + i];
    out.push_back(std::move(s));
  }
  return out;
}

struct PatchPosition {
  std::size_t y0 = 0, x0 = 0;
};

struct Patch {
  PatchPosition pos;
  SliceTriplet triplet;
};

namespace detail {
inline std::vector<float> window(const std::vector<float>& plane, std::size_t width, PatchPosition p, std::size_t ph,
                                 std::size_t pw) {
  std::vector<float> out(ph * pw);
  for (std::size_t y = 0; y < ph; ++y)
    std::copy_n(plane.begin() + (p.y0 + y) * width + p.x0, pw, out.begin() + y * pw);
  return out;
}
}  // namespace detail

/// Non-overlapping 2x2 grid of half-size windows (TL, TR, BL, BR).
inline std::vector<Patch> patchify(const SliceTriplet& t) {
  if (t.height % 2 || t.width % 2) {
    throw InvalidArgument("patchify: slice size " + std::to_string(t.height) + "x" + std::to_string(t.width) +
                          " is not even");
  }
  const std::size_t ph = t.height / 2, pw = t.width / 2;
  std::vector<Patch> out;
  for (std::size_t gy = 0; gy < 2; ++gy)
    for (std::size_t gx = 0; gx < 2; ++gx) {
      PatchPosition p{gy * ph, gx * pw};
      Patch patch{p, {ph, pw, detail::window(t.prev, t.width, p, ph, pw), detail::window(t.cur, t.width, p, ph, pw),
                      detail::window(t.next, t.width, p, ph, pw), detail::window(t.target, t.width, p, ph, pw)}};
      out.push_back(std::move(patch));
    }
  return out;
}

/// Places patch planes back at their positions in a height x width plane.
inline std::vector<float> stitch(const std::vector<std::vector<float>>& planes, const std::vector<PatchPosition>& pos,
                                 std::size_t patch_h, std::size_t patch_w, std::size_t height, std::size_t width) {
  if (planes.size() != pos.size()) throw InvalidArgument("stitch: planes and positions differ in count");
  std::vector<float> out(height * width, 0.0f);
  for (std::size_t k = 0; k < planes.size(); ++k) {
    if (planes[k].size() != patch_h * patch_w || pos[k].y0 + patch_h > height || pos[k].x0 + patch_w > width) {
      throw InvalidShape("stitch: patch " + std::to_string(k) + " does not fit");
    }
    for (std::size_t y = 0; y < patch_h; ++y)
      std::copy_n(planes[k].begin() + y * patch_w, patch_w, out.begin() + (pos[k].y0 + y) * width + pos[k].x0);
  }
  return out;
}

/// Deterministic core of augment(): optional horizontal flip of all four
/// planes, then intensity gain on the three images clipped to [0, 1].
inline SliceTriplet augment_with(const SliceTriplet& t, bool flip, float gain) {
  SliceTriplet out = t;
  if (flip) {
    for (auto* plane : {&out.prev, &out.cur, &out.next, &out.target})
      for (std::size_t y = 0; y < t.height; ++y)
        std::reverse(plane->begin() + y * t.width, plane->begin() + (y + 1) * t.width);
  }
  if (gain != 1.0f) {
    for (auto* plane : {&out.prev, &out.cur, &out.next})
      for (auto& v : *plane) v = std::clamp(v * gain, 0.0f, 1.0f);
  }
  return out;
}

/// Flip with probability 0.5, then gain uniform in [0.9, 1.1].
inline SliceTriplet augment(const SliceTriplet& t, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool flip = unit(rng) < 0.5;
  const auto gain = static_cast<float>(0.9 + 0.2 * unit(rng));
  return augment_with(t, flip, gain);
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Volume-level k-fold split: seeded permutation, chunked as evenly as possible.
inline std::vector<Fold> kfold_split(const std::vector<std::string>& ids, std::size_t k, std::uint64_t seed) {
  if (k < 2 || k > ids.size()) {
    throw InvalidArgument("kfold_split: k = " + std::to_string(k) + " must lie in [2, " + std::to_string(ids.size()) +
                          "]");
  }
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  // Fisher-Yates with an explicit draw so the permutation does not depend on std::shuffle.
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  std::vector<Fold> folds(k);
  std::size_t start = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = ids.size() / k + (f < ids.size() % k ? 1 : 0);
    std::vector<bool> in_test(ids.size(), false);
    for (std::size_t i = start; i < start + len; ++i) in_test[order[i]] = true;
    for (std::size_t i = start; i < start + len; ++i) folds[f].test.push_back(ids[order[i]]);
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (!in_test[i]) folds[f].train.push_back(ids[i]);
    start += len;
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

struct DatasetEntry {
  std::string id;
  Volume image;
  MaskVolume mask;
};

/// Writes `<id>.tscv`, `<id>_mask.tscv` per entry and a `manifest.txt` of "id image mask" lines.
inline void write_dataset(const std::filesystem::path& dir, const std::vector<DatasetEntry>& entries) {
  std::filesystem::create_directories(dir);
  std::string manifest;
  for (const auto& e : entries) {
    const std::string img = e.id + ".tscv", msk = e.id + "_mask.tscv";
    write_volume(dir / img, e.image);
    write_mask(dir / msk, e.mask);
    manifest += e.id + ' ' + img + ' ' + msk + '\n';
  }
  io::write_file_atomic(dir / "manifest.txt", manifest);
}

inline std::vector<DatasetEntry> load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw Error("dataset '" + dir.string() + "' has no manifest.txt");
  std::vector<DatasetEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    DatasetEntry e;
    std::string img, msk;
    if (!(ls >> e.id >> img >> msk)) throw Error("malformed manifest line: '" + line + "'");
    e.image = read_volume(dir / img);
    e.mask = read_mask(dir / msk);
    check_geometry(e.image, e.mask);
    out.push_back(std::move(e));
  }
  if (out.empty()) throw Error("dataset '" + dir.string() + "' lists no volumes");
  return out;
}

}  // namespace tscnn
