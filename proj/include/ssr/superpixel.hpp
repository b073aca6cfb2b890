/* Copyright 2026 The SSR Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// SLIC superpixels and the spatial prior built on them: colour-clustered
// regions, CAM-driven target-region selection and projection of target
// pixels onto the patch-token grid.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <string>
#include <vector>

#include "ssr/error.hpp"
#include "ssr/kmeans.hpp"
#include "ssr/matrix.hpp"
#include "ssr/tensor.hpp"

namespace ssr {

// ---------------------------------------------------------------------------
// Colour conversion

namespace lab_detail {

inline double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

inline double lab_f(double t) {
  return t > 0.008856 ? std::cbrt(t) : 7.787 * t + 16.0 / 116.0;
}

}  // namespace lab_detail

/// sRGB (8-bit) to CIELAB under D65, with scikit-image's matrix and
/// piecewise constants so results agree with rgb2lab.
inline std::array<double, 3> rgb_to_lab(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
  using namespace lab_detail;
  const double r = srgb_to_linear(r8 / 255.0);
  const double g = srgb_to_linear(g8 / 255.0);
  const double b = srgb_to_linear(b8 / 255.0);
  const double x = 0.412453 * r + 0.357580 * g + 0.180423 * b;
  const double y = 0.212671 * r + 0.715160 * g + 0.072169 * b;
  const double z = 0.019334 * r + 0.119193 * g + 0.950227 * b;
  const double fx = lab_f(x / 0.95047);
  const double fy = lab_f(y / 1.00000);
  const double fz = lab_f(z / 1.08883);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

/// u8 [H, W, 3] RGB image to f64 [H, W, 3] Lab.
inline Tensor rgb_to_lab(const Tensor& image) {
  if (image.dtype() != DType::u8 || image.rank() != 3 || image.dim(2) != 3) {
    throw InvalidArgument("rgb_to_lab expects u8 [H, W, 3], got " +
                          std::string(dtype_name(image.dtype())) + " " +
                          shape_str(image.shape()));
  }
  Tensor lab(DType::f64, image.shape());
  auto src = image.values<std::uint8_t>();
  auto dst = lab.values<double>();
  for (std::size_t p = 0; p < src.size() / 3; ++p) {
    const auto v = rgb_to_lab(src[3 * p], src[3 * p + 1], src[3 * p + 2]);
    dst[3 * p] = v[0];
    dst[3 * p + 1] = v[1];
    dst[3 * p + 2] = v[2];
  }
  return lab;
}

// ---------------------------------------------------------------------------
// Superpixel map

struct SuperpixelMap {
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> labels;  // row-major [H, W], values in [0, S)
  int num_superpixels = 0;
  Matrix mean_lab;  // [S, 3]
  Matrix mean_xy;   // [S, 2], pixel-centre coordinates (x, y)
  std::vector<std::int64_t> pixel_counts;

  std::int32_t at(int y, int x) const {
    return labels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }

  Tensor labels_tensor() const {
    return Tensor::from<std::int32_t>({height, width}, labels);
  }
};

namespace slic_detail {

struct LabView {
  int height, width;
  std::span<const double> data;

  double ch(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                 static_cast<std::size_t>(x)) *
                    3 +
                static_cast<std::size_t>(c)];
  }
};

inline LabView view(const Tensor& lab) {
  if (lab.dtype() != DType::f64 || lab.rank() != 3 || lab.dim(2) != 3) {
    throw InvalidArgument("expected f64 Lab image [H, W, 3], got " + shape_str(lab.shape()));
  }
  return {static_cast<int>(lab.dim(0)), static_cast<int>(lab.dim(1)), lab.values<double>()};
}

// Relabels to [0, S') in order of first appearance.
inline int compact(std::vector<std::int32_t>& labels) {
  std::vector<std::int32_t> remap;
  int next = 0;
  for (auto& l : labels) {
    if (l < 0) continue;
    if (static_cast<std::size_t>(l) >= remap.size()) remap.resize(static_cast<std::size_t>(l) + 1, -1);
    auto& r = remap[static_cast<std::size_t>(l)];
    if (r < 0) r = next++;
    l = r;
  }
  return next;
}

}  // namespace slic_detail

/// Fills counts and per-superpixel mean colour/position for `labels`.
inline SuperpixelMap make_superpixel_map(std::vector<std::int32_t> labels, const Tensor& lab) {
  const auto v = slic_detail::view(lab);
  if (labels.size() != static_cast<std::size_t>(v.height) * static_cast<std::size_t>(v.width)) {
    throw InvalidArgument("label map does not match image size");
  }
  SuperpixelMap m;
  m.height = v.height;
  m.width = v.width;
  m.num_superpixels = slic_detail::compact(labels);
  m.labels = std::move(labels);
  const auto s = static_cast<std::size_t>(m.num_superpixels);
  m.mean_lab = Matrix(s, 3);
  m.mean_xy = Matrix(s, 2);
  m.pixel_counts.assign(s, 0);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      const auto l = static_cast<std::size_t>(m.at(y, x));
      ++m.pixel_counts[l];
      for (int c = 0; c < 3; ++c) m.mean_lab(l, static_cast<std::size_t>(c)) += v.ch(y, x, c);
      m.mean_xy(l, 0) += x + 0.5;
      m.mean_xy(l, 1) += y + 0.5;
    }
  }
  for (std::size_t l = 0; l < s; ++l) {
    const double n = static_cast<double>(m.pixel_counts[l]);
    for (std::size_t c = 0; c < 3; ++c) m.mean_lab(l, c) /= n;
    m.mean_xy(l, 0) /= n;
    m.mean_xy(l, 1) /= n;
  }
  return m;
}

/// Merges every 4-connected component smaller than (H*W/S)/4 into its largest
/// adjacent neighbour, then splits any label that is still disconnected.
/// Labels come back compacted in raster order of first appearance.
inline SuperpixelMap enforce_connectivity(const SuperpixelMap& map, const Tensor& lab) {
  const int h = map.height, w = map.width;
  const std::size_t n = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  if (n == 0) return map;

  // Connected components, discovered in raster order.
  std::vector<std::int32_t> comp(n, -1);
  std::vector<std::int64_t> comp_size;
  std::vector<int> q;
  for (std::size_t start = 0; start < n; ++start) {
    if (comp[start] >= 0) continue;
    const auto id = static_cast<std::int32_t>(comp_size.size());
    const auto label = map.labels[start];
    std::int64_t size = 0;
    q.assign(1, static_cast<int>(start));
    comp[start] = id;
    while (!q.empty()) {
      const int p = q.back();
      q.pop_back();
      ++size;
      const int y = p / w, x = p % w;
      const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (auto [ny, nx] : nb) {
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const auto np = static_cast<std::size_t>(ny * w + nx);
        if (comp[np] < 0 && map.labels[np] == label) {
          comp[np] = id;
          q.push_back(static_cast<int>(np));
        }
      }
    }
    comp_size.push_back(size);
  }

  const std::size_t nc = comp_size.size();
  std::vector<std::vector<std::int32_t>> adj(nc);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto a = comp[static_cast<std::size_t>(y * w + x)];
      if (x + 1 < w) {
        const auto b = comp[static_cast<std::size_t>(y * w + x + 1)];
        if (a != b) {
          adj[static_cast<std::size_t>(a)].push_back(b);
          adj[static_cast<std::size_t>(b)].push_back(a);
        }
      }
      if (y + 1 < h) {
        const auto b = comp[static_cast<std::size_t>((y + 1) * w + x)];
        if (a != b) {
          adj[static_cast<std::size_t>(a)].push_back(b);
          adj[static_cast<std::size_t>(b)].push_back(a);
        }
      }
    }
  }

  std::vector<std::int32_t> parent(nc);
  std::iota(parent.begin(), parent.end(), 0);
  std::vector<std::int64_t> group_size = comp_size;
  auto find = [&](std::int32_t c) {
    while (parent[static_cast<std::size_t>(c)] != c) {
      parent[static_cast<std::size_t>(c)] =
          parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(c)])];
      c = parent[static_cast<std::size_t>(c)];
    }
    return c;
  };

  const double min_size =
      static_cast<double>(n) / std::max(1, map.num_superpixels) / 4.0;
  for (std::size_t c = 0; c < nc; ++c) {
    const auto root = find(static_cast<std::int32_t>(c));
    if (static_cast<double>(group_size[static_cast<std::size_t>(root)]) >= min_size) continue;
    std::int32_t target = -1;
    for (auto nb : adj[c]) {
      const auto r = find(nb);
      if (r == root) continue;
      if (target < 0 || group_size[static_cast<std::size_t>(r)] >
                            group_size[static_cast<std::size_t>(target)] ||
          (group_size[static_cast<std::size_t>(r)] ==
               group_size[static_cast<std::size_t>(target)] &&
           r < target)) {
        target = r;
      }
    }
    if (target < 0) continue;
    parent[static_cast<std::size_t>(root)] = target;
    group_size[static_cast<std::size_t>(target)] += group_size[static_cast<std::size_t>(root)];
  }

  std::vector<std::int32_t> labels(n);
  for (std::size_t p = 0; p < n; ++p) labels[p] = find(comp[p]);
  return make_superpixel_map(std::move(labels), lab);
}

/// Diagnostics from the last SLIC assignment pass.
struct SlicTrace {
  double step = 0.0;                    // grid interval s
  Matrix centers_xy;                    // centres used by the final assignment
  std::vector<std::int32_t> raw_labels; // final assignment, before connectivity
};

/// SLIC: grid-seeded local k-means in (L, a, b, x, y) with distance
/// D = sqrt(d_lab^2 + (d_xy / s)^2 m^2), followed by connectivity enforcement.
inline SuperpixelMap slic_segment(const Tensor& lab, int target_superpixels,
                                  double compactness, int iterations,
                                  SlicTrace* trace = nullptr) {
  const auto v = slic_detail::view(lab);
  const int h = v.height, w = v.width;
  const std::size_t n = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  if (target_superpixels < 1 || static_cast<std::size_t>(target_superpixels) > n) {
    throw InvalidArgument("slic_segment: superpixel count " +
                          std::to_string(target_superpixels) + " not in [1, H*W]");
  }
  if (iterations < 0) throw InvalidArgument("slic_segment: negative iteration count");
  if (!(compactness > 0.0)) throw InvalidArgument("slic_segment: compactness must be > 0");

  const double s = std::sqrt(static_cast<double>(n) / target_superpixels);
  const int nx = std::max(1, static_cast<int>(std::lround(w / s)));
  const int ny = std::max(1, static_cast<int>(std::lround(h / s)));
  const double step_x = static_cast<double>(w) / nx;
  const double step_y = static_cast<double>(h) / ny;
  const std::size_t k = static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny);

  auto grad = [&](int y, int x) {
    const int x0 = std::max(0, x - 1), x1 = std::min(w - 1, x + 1);
    const int y0 = std::max(0, y - 1), y1 = std::min(h - 1, y + 1);
    double g = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double dx = v.ch(y, x1, c) - v.ch(y, x0, c);
      const double dy = v.ch(y1, x, c) - v.ch(y0, x, c);
      g += dx * dx + dy * dy;
    }
    return g;
  };

  // Centre state: x, y (continuous, pixel centres at +0.5), L, a, b.
  Matrix centers(k, 5);
  for (int gy = 0; gy < ny; ++gy) {
    for (int gx = 0; gx < nx; ++gx) {
      const auto c = static_cast<std::size_t>(gy * nx + gx);
      double cx = (gx + 0.5) * step_x, cy = (gy + 0.5) * step_y;
      int px = std::clamp(static_cast<int>(std::floor(cx)), 0, w - 1);
      int py = std::clamp(static_cast<int>(std::floor(cy)), 0, h - 1);
      double best = grad(py, px);
      int bx = px, by = py;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int qx = px + dx, qy = py + dy;
          if (qx < 0 || qx >= w || qy < 0 || qy >= h) continue;
          const double g = grad(qy, qx);
          if (g < best) {
            best = g;
            bx = qx;
            by = qy;
          }
        }
      }
      if (bx != px || by != py) {
        cx = bx + 0.5;
        cy = by + 0.5;
        px = bx;
        py = by;
      }
      centers(c, 0) = cx;
      centers(c, 1) = cy;
      for (int ch = 0; ch < 3; ++ch) centers(c, 2 + static_cast<std::size_t>(ch)) = v.ch(py, px, ch);
    }
  }

  // Initial grid assignment: the cell containing each pixel centre.
  std::vector<std::int32_t> labels(n);
  for (int y = 0; y < h; ++y) {
    const int gy = std::min(ny - 1, static_cast<int>((y + 0.5) / step_y));
    for (int x = 0; x < w; ++x) {
      const int gx = std::min(nx - 1, static_cast<int>((x + 0.5) / step_x));
      labels[static_cast<std::size_t>(y * w + x)] = gy * nx + gx;
    }
  }

  const double spatial_weight = (compactness * compactness) / (s * s);
  auto dist2 = [&](std::size_t c, int y, int x) {
    double dl = 0.0;
    for (int ch = 0; ch < 3; ++ch) {
      const double d = v.ch(y, x, ch) - centers(c, 2 + static_cast<std::size_t>(ch));
      dl += d * d;
    }
    const double dx = x + 0.5 - centers(c, 0), dy = y + 0.5 - centers(c, 1);
    return dl + (dx * dx + dy * dy) * spatial_weight;
  };

  Matrix last_centers = centers;
  std::vector<double> best(n);
  for (int it = 0; it < iterations; ++it) {
    last_centers = centers;
    std::fill(best.begin(), best.end(), std::numeric_limits<double>::infinity());
    std::vector<std::int32_t> next(n, -1);
    for (std::size_t c = 0; c < k; ++c) {
      const int x0 = std::max(0, static_cast<int>(std::ceil(centers(c, 0) - s - 0.5)));
      const int x1 = std::min(w - 1, static_cast<int>(std::floor(centers(c, 0) + s - 0.5)));
      const int y0 = std::max(0, static_cast<int>(std::ceil(centers(c, 1) - s - 0.5)));
      const int y1 = std::min(h - 1, static_cast<int>(std::floor(centers(c, 1) + s - 0.5)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const auto p = static_cast<std::size_t>(y * w + x);
          const double d = dist2(c, y, x);
          if (d < best[p]) {
            best[p] = d;
            next[p] = static_cast<std::int32_t>(c);
          }
        }
      }
    }
    // Pixels outside every window fall back to the best centre within 2s.
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const auto p = static_cast<std::size_t>(y * w + x);
        if (next[p] >= 0) continue;
        for (std::size_t c = 0; c < k; ++c) {
          if (std::abs(x + 0.5 - centers(c, 0)) > 2 * s ||
              std::abs(y + 0.5 - centers(c, 1)) > 2 * s)
            continue;
          const double d = dist2(c, y, x);
          if (d < best[p]) {
            best[p] = d;
            next[p] = static_cast<std::int32_t>(c);
          }
        }
        if (next[p] < 0) next[p] = labels[p];
      }
    }
    labels = std::move(next);

    Matrix sums(k, 5);
    std::vector<double> counts(k, 0.0);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const auto c = static_cast<std::size_t>(labels[static_cast<std::size_t>(y * w + x)]);
        counts[c] += 1.0;
        sums(c, 0) += x + 0.5;
        sums(c, 1) += y + 0.5;
        for (int ch = 0; ch < 3; ++ch) sums(c, 2 + static_cast<std::size_t>(ch)) += v.ch(y, x, ch);
      }
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0.0) continue;
      for (std::size_t j = 0; j < 5; ++j) centers(c, j) = sums(c, j) / counts[c];
    }
  }

  if (trace) {
    trace->step = s;
    trace->centers_xy = Matrix(k, 2);
    for (std::size_t c = 0; c < k; ++c) {
      trace->centers_xy(c, 0) = last_centers(c, 0);
      trace->centers_xy(c, 1) = last_centers(c, 1);
    }
    trace->raw_labels = labels;
  }

  SuperpixelMap raw = make_superpixel_map(std::move(labels), lab);
  return enforce_connectivity(raw, lab);
}

// ---------------------------------------------------------------------------
// Colour regions and target selection

struct RegionClustering {
  std::vector<std::int32_t> region_of_superpixel;  // [S], values in [0, R)
  int num_regions = 0;
};

/// K-means over superpixel mean Lab colours. Region ids are compacted in
/// superpixel order, so every region is non-empty.
inline RegionClustering cluster_superpixels(const SuperpixelMap& map, int regions,
                                            std::uint64_t seed) {
  if (regions < 1 || regions > map.num_superpixels) {
    throw InvalidArgument("cluster_superpixels: R=" + std::to_string(regions) +
                          " must lie in [1, S=" + std::to_string(map.num_superpixels) + "]");
  }
  const auto model = kmeans_fit(map.mean_lab, static_cast<std::size_t>(regions), seed);
  RegionClustering rc;
  rc.region_of_superpixel = kmeans_assign(model, map.mean_lab);
  rc.num_regions = slic_detail::compact(rc.region_of_superpixel);
  return rc;
}

enum class RatioMode { mass, count };

struct TargetRegionSet {
  std::vector<bool> is_target;  // [R]
  std::vector<double> ratio;    // [R]
  double threshold = 0.0;
};

/// Nearest-neighbour resample of a [h, w] map to [H, W].
inline Matrix upsample_nearest(const Matrix& src, int height, int width) {
  Matrix out(static_cast<std::size_t>(height), static_cast<std::size_t>(width));
  for (int y = 0; y < height; ++y) {
    const auto sy = static_cast<std::size_t>(y) * src.rows() / static_cast<std::size_t>(height);
    for (int x = 0; x < width; ++x) {
      const auto sx = static_cast<std::size_t>(x) * src.cols() / static_cast<std::size_t>(width);
      out(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = src(sy, sx);
    }
  }
  return out;
}

/// Per region: share of CAM mass carried by pixels at or above
/// `high_conf_thresh`. Regions with share above `ratio_thresh` are targets.
inline TargetRegionSet select_target_regions(const RegionClustering& rc,
                                             const SuperpixelMap& map, const Matrix& cam,
                                             double high_conf_thresh, double ratio_thresh,
                                             RatioMode mode = RatioMode::mass) {
  constexpr double kEps = 1e-8;
  const Matrix up = upsample_nearest(cam, map.height, map.width);
  const auto r = static_cast<std::size_t>(rc.num_regions);
  std::vector<double> high(r, 0.0), total(r, 0.0);
  for (std::size_t p = 0; p < map.labels.size(); ++p) {
    const auto region = static_cast<std::size_t>(
        rc.region_of_superpixel[static_cast<std::size_t>(map.labels[p])]);
    const double v = up.data()[p];
    const bool hit = v >= high_conf_thresh;
    if (mode == RatioMode::mass) {
      total[region] += v;
      if (hit) high[region] += v;
    } else {
      total[region] += 1.0;
      if (hit) high[region] += 1.0;
    }
  }
  TargetRegionSet t;
  t.threshold = ratio_thresh;
  t.ratio.resize(r);
  t.is_target.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    t.ratio[i] = high[i] / std::max(total[i], kEps);
    t.is_target[i] = t.ratio[i] > ratio_thresh;
  }
  return t;
}

/// Patch j of an [h, w] grid is kept when more than half of its pixels lie in
/// target regions. Non-divisible sizes use proportional binning.
inline std::vector<bool> regions_to_patch_mask(const RegionClustering& rc,
                                               const TargetRegionSet& targets,
                                               const SuperpixelMap& map, int grid_h,
                                               int grid_w) {
  if (grid_h < 1 || grid_w < 1 || grid_h > map.height || grid_w > map.width) {
    throw InvalidArgument("regions_to_patch_mask: bad patch grid");
  }
  std::vector<bool> keep(static_cast<std::size_t>(grid_h * grid_w), false);
  for (int py = 0; py < grid_h; ++py) {
    const int y0 = py * map.height / grid_h, y1 = (py + 1) * map.height / grid_h;
    for (int px = 0; px < grid_w; ++px) {
      const int x0 = px * map.width / grid_w, x1 = (px + 1) * map.width / grid_w;
      long in = 0, all = 0;
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          const auto region = rc.region_of_superpixel[static_cast<std::size_t>(map.at(y, x))];
          in += targets.is_target[static_cast<std::size_t>(region)] ? 1 : 0;
          ++all;
        }
      }
      keep[static_cast<std::size_t>(py * grid_w + px)] = 2 * in > all;
    }
  }
  return keep;
}

}  // namespace ssr
