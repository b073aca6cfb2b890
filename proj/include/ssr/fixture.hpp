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

// Synthetic desk-scale dataset: coloured ellipse blobs on a textured
// background, with stand-ins for every backbone output the pipeline reads.
//
// Patch features are a fixed random projection of each patch's 4x4x4 colour
// histogram, so patches of the same class land close together. CAM seeds are
// the per-patch class fraction, blurred, with spurious background bumps and
// noise added. Attention rows are a softmax over feature cosine similarity;
// the DINO stand-in also favours spatially close patches.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "ssr/error.hpp"
#include "ssr/image.hpp"
#include "ssr/manifest.hpp"
#include "ssr/matrix.hpp"
#include "ssr/npy.hpp"
#include "ssr/random.hpp"
#include "ssr/tensor.hpp"

namespace ssr {

struct FixtureConfig {
  std::uint64_t seed = 0;
  int image_size = 96;
  int patch = 8;
  int num_classes = 4;
  int max_blobs = 2;
  int num_images = 24;
  int feat_dim = 64;
  int num_background = 2;
  int layers = 4;
  int heads = 2;
  double leakage = 0.75;  // bump height relative to the true peak
  int leak_bumps = 2;

  int grid() const { return image_size / patch; }

  void validate() const {
    if (image_size < 16 || patch < 2 || image_size % patch != 0) {
      throw InvalidArgument("fixture: image_size must be a multiple of patch (>= 2) and >= 16");
    }
    if (num_classes < 1 || num_classes > 8) throw InvalidArgument("fixture: num_classes in [1, 8]");
    if (max_blobs < 1 || max_blobs > num_classes) {
      throw InvalidArgument("fixture: max_blobs in [1, num_classes]");
    }
    if (num_images < 1) throw InvalidArgument("fixture: num_images >= 1");
    if (feat_dim < 4) throw InvalidArgument("fixture: feat_dim >= 4");
    if (num_background < 0) throw InvalidArgument("fixture: num_background >= 0");
    if (layers < 1 || heads < 1) throw InvalidArgument("fixture: layers and heads >= 1");
    if (leakage < 0.0 || leak_bumps < 0) throw InvalidArgument("fixture: leakage >= 0");
  }
};

inline constexpr std::array<const char*, 8> kFixtureClassNames = {
    "crimson", "lime", "azure", "amber", "violet", "teal", "coral", "olive"};

inline constexpr std::array<std::array<int, 3>, 8> kFixturePalette = {{
    {200, 30, 50}, {60, 200, 50}, {40, 110, 220}, {230, 170, 20},
    {150, 60, 200}, {20, 160, 150}, {240, 110, 90}, {120, 130, 20},
}};

struct FixtureImage {
  std::string image_id;
  std::vector<int> labels;
  Tensor rgb;        // u8 [H, W, 3]
  Tensor gt;         // i32 [H, W], 0 = background, c + 1 = class c
  Tensor clip_feat;  // f32 [N, d1]
  Tensor clip_attn;  // f32 [L, H, N+1, N+1]
  Tensor dino_attn;  // f32 [L, H, N+1, N+1]
  Tensor cam_seed;   // f32 [C_f, g, g]
  Tensor text_feat;  // f32 [C_f + M, d1]
};

namespace fixture_detail {

struct Shared {
  Matrix projection;  // [64, d1]
  Matrix class_text;  // [C, d1]
  Matrix background_text;  // [M, d1]
};

inline std::vector<double> histogram_of(std::span<const std::uint8_t> rgb_pixels) {
  std::vector<double> h(64, 0.0);
  const std::size_t n = rgb_pixels.size() / 3;
  for (std::size_t i = 0; i < n; ++i) {
    const int r = rgb_pixels[3 * i] / 64, g = rgb_pixels[3 * i + 1] / 64,
              b = rgb_pixels[3 * i + 2] / 64;
    h[static_cast<std::size_t>(r * 16 + g * 4 + b)] += 1.0 / static_cast<double>(n);
  }
  return h;
}

inline std::vector<double> project_hist(const std::vector<double>& hist, const Matrix& proj) {
  std::vector<double> out(proj.cols(), 0.0);
  for (std::size_t b = 0; b < hist.size(); ++b) {
    if (hist[b] == 0.0) continue;
    auto row = proj.row(b);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += hist[b] * row[k];
  }
  return out;
}

inline Shared make_shared(const FixtureConfig& cfg, Rng& rng) {
  const auto d1 = static_cast<std::size_t>(cfg.feat_dim);
  Shared s{Matrix(64, d1), Matrix(static_cast<std::size_t>(cfg.num_classes), d1),
           Matrix(static_cast<std::size_t>(cfg.num_background), d1)};
  for (auto& v : s.projection.data()) v = rng.normal();
  // Text embeddings share the colour signal of their class plus a private
  // direction, so the two modalities are related but not identical.
  for (int c = 0; c < cfg.num_classes; ++c) {
    std::vector<std::uint8_t> px;
    for (int i = 0; i < 16; ++i)
      for (int k = 0; k < 3; ++k) px.push_back(static_cast<std::uint8_t>(kFixturePalette[c][k]));
    auto base = project_hist(histogram_of(px), s.projection);
    const double bn = std::sqrt(dot(base, base));
    std::vector<double> noise(d1);
    for (auto& v : noise) v = rng.normal();
    const double nn = std::sqrt(dot(noise, noise));
    for (std::size_t k = 0; k < d1; ++k)
      s.class_text(static_cast<std::size_t>(c), k) = 0.6 * base[k] / bn + 0.8 * noise[k] / nn;
  }
  for (auto& v : s.background_text.data()) v = rng.normal() / std::sqrt(static_cast<double>(d1));
  return s;
}

struct Blob {
  int cls;
  double cx, cy, rx, ry, angle;
  int x0, y0, x1, y1;  // inclusive pixel bounding box

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
    return u * u + v * v <= 1.0;
  }
};

inline std::vector<double> gaussian_blur(const std::vector<double>& src, int g, double sigma) {
  const int rad = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * rad + 1));
  double sum = 0.0;
  for (int i = -rad; i <= rad; ++i) {
    kernel[static_cast<std::size_t>(i + rad)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[static_cast<std::size_t>(i + rad)];
  }
  for (auto& k : kernel) k /= sum;
  auto at = [g](int y, int x) { return static_cast<std::size_t>(y * g + x); };
  std::vector<double> tmp(src.size(), 0.0), out(src.size(), 0.0);
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x)
      for (int i = -rad; i <= rad; ++i) {
        const int xx = std::clamp(x + i, 0, g - 1);
        tmp[at(y, x)] += kernel[static_cast<std::size_t>(i + rad)] * src[at(y, xx)];
      }
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x)
      for (int i = -rad; i <= rad; ++i) {
        const int yy = std::clamp(y + i, 0, g - 1);
        out[at(y, x)] += kernel[static_cast<std::size_t>(i + rad)] * tmp[at(yy, x)];
      }
  return out;
}

// Softmax over scaled cosine similarity; the first token is the mean feature.
inline void fill_attention(Tensor& out, std::size_t layer, std::size_t head, const Matrix& unit,
                           double temperature, int g, double locality) {
  const std::size_t n = unit.rows() + 1;
  Matrix tokens(n, unit.cols());
  for (std::size_t i = 0; i < unit.rows(); ++i) {
    auto src = unit.row(i);
    std::copy(src.begin(), src.end(), tokens.row(i + 1).begin());
    for (std::size_t k = 0; k < unit.cols(); ++k) tokens(0, k) += src[k];
  }
  tokens = l2_normalize_rows(tokens);
  const Matrix cos = matmul_bt(tokens, tokens);
  const auto heads = static_cast<std::size_t>(out.dim(1));
  auto v = out.values<float>();
  const std::size_t base = (layer * heads + head) * n * n;
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double s = cos(i, j) / temperature;
      if (locality > 0.0 && i > 0 && j > 0) {
        const int yi = static_cast<int>(i - 1) / g, xi = static_cast<int>(i - 1) % g;
        const int yj = static_cast<int>(j - 1) / g, xj = static_cast<int>(j - 1) % g;
        const double d2 = (yi - yj) * (yi - yj) + (xi - xj) * (xi - xj);
        s -= d2 / (2.0 * locality * locality);
      }
      row[j] = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (auto& r : row) z += (r = std::exp(r - mx));
    for (std::size_t j = 0; j < n; ++j) v[base + i * n + j] = static_cast<float>(row[j] / z);
  }
}

inline FixtureImage make_image(const FixtureConfig& cfg, const Shared& shared, int index,
                               Rng rng) {
  const int size = cfg.image_size, g = cfg.grid(), p = cfg.patch;
  const auto n_patch = static_cast<std::size_t>(g * g);
  const auto d1 = static_cast<std::size_t>(cfg.feat_dim);
  FixtureImage img;
  char id[32];
  std::snprintf(id, sizeof id, "img_%04d", index);
  img.image_id = id;

  // Classes present, in ascending order.
  const int count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_blobs)));
  std::vector<int> pool(static_cast<std::size_t>(cfg.num_classes));
  for (int c = 0; c < cfg.num_classes; ++c) pool[static_cast<std::size_t>(c)] = c;
  for (std::size_t i = pool.size(); i > 1; --i)
    std::swap(pool[i - 1], pool[static_cast<std::size_t>(rng.below(i))]);

  std::vector<Blob> blobs;
  for (int b = 0; b < count; ++b) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      Blob bl{};
      bl.cls = pool[static_cast<std::size_t>(b)];
      bl.rx = rng.uniform(0.14, 0.24) * size;
      bl.ry = rng.uniform(0.14, 0.24) * size;
      bl.angle = rng.uniform(0.0, 3.14159265358979);
      const double ext = std::max(bl.rx, bl.ry);
      bl.cx = rng.uniform(ext + 1.0, size - ext - 1.0);
      bl.cy = rng.uniform(ext + 1.0, size - ext - 1.0);
      bl.x0 = size, bl.y0 = size, bl.x1 = -1, bl.y1 = -1;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          if (bl.contains(x + 0.5, y + 0.5)) {
            bl.x0 = std::min(bl.x0, x), bl.x1 = std::max(bl.x1, x);
            bl.y0 = std::min(bl.y0, y), bl.y1 = std::max(bl.y1, y);
          }
      bool clear = bl.x1 >= 0;
      for (const auto& o : blobs) {
        if (bl.x0 <= o.x1 + p && o.x0 <= bl.x1 + p && bl.y0 <= o.y1 + p && o.y0 <= bl.y1 + p)
          clear = false;
      }
      if (clear) {
        blobs.push_back(bl);
        break;
      }
    }
  }
  std::sort(blobs.begin(), blobs.end(), [](const Blob& a, const Blob& b) { return a.cls < b.cls; });
  for (const auto& b : blobs) img.labels.push_back(b.cls);

  // Pixels.
  img.rgb = Tensor(DType::u8, {size, size, 3});
  img.gt = Tensor(DType::i32, {size, size});
  auto px = img.rgb.values<std::uint8_t>();
  auto gt = img.gt.values<std::int32_t>();
  const double base = rng.uniform(105.0, 145.0);
  std::array<double, 3> tint{rng.uniform(-15, 15), rng.uniform(-15, 15), rng.uniform(-15, 15)};
  const double fx = rng.uniform(0.15, 0.45), fy = rng.uniform(0.15, 0.45),
               phase = rng.uniform(0.0, 6.28318530718);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const auto i = static_cast<std::size_t>(y * size + x);
      int cls = -1;
      for (const auto& b : blobs)
        if (b.contains(x + 0.5, y + 0.5)) cls = b.cls;
      gt[i] = cls + 1;
      for (int k = 0; k < 3; ++k) {
        double v;
        if (cls >= 0) {
          v = kFixturePalette[static_cast<std::size_t>(cls)][static_cast<std::size_t>(k)] +
              rng.uniform(-12.0, 12.0);
        } else {
          v = base + tint[static_cast<std::size_t>(k)] + 12.0 * std::sin(fx * x + fy * y + phase) +
              rng.uniform(-10.0, 10.0);
        }
        px[3 * i + static_cast<std::size_t>(k)] =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }

  // Patch features.
  Matrix feat(n_patch, d1);
  std::vector<std::vector<double>> frac(blobs.size(), std::vector<double>(n_patch, 0.0));
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      std::vector<std::uint8_t> patch_px;
      const auto pi = static_cast<std::size_t>(gy * g + gx);
      for (int y = gy * p; y < (gy + 1) * p; ++y)
        for (int x = gx * p; x < (gx + 1) * p; ++x) {
          const auto i = static_cast<std::size_t>(y * size + x);
          for (int k = 0; k < 3; ++k) patch_px.push_back(px[3 * i + static_cast<std::size_t>(k)]);
          for (std::size_t b = 0; b < blobs.size(); ++b)
            if (gt[i] == blobs[b].cls + 1) frac[b][pi] += 1.0 / (p * p);
        }
      const auto f = project_hist(histogram_of(patch_px), shared.projection);
      for (std::size_t k = 0; k < d1; ++k) feat(pi, k) = f[k] + 0.05 * rng.normal();
    }
  img.clip_feat = feat.to_tensor<float>();

  // CAM seeds: blurred truth plus spurious background activations. The peak
  // must stay inside the blob; leakage is damped until it does.
  const auto cf = static_cast<std::int64_t>(blobs.size());
  img.cam_seed = Tensor(DType::f32, {cf, g, g});
  auto cam_out = img.cam_seed.values<float>();
  std::vector<std::size_t> background;
  for (std::size_t pi = 0; pi < n_patch; ++pi) {
    bool bg = true;
    for (const auto& f : frac) bg = bg && f[pi] == 0.0;
    if (bg) background.push_back(pi);
  }
  for (std::size_t b = 0; b < blobs.size(); ++b) {
    const auto blurred = gaussian_blur(frac[b], g, 0.9);
    const double peak = *std::max_element(blurred.begin(), blurred.end());
    std::vector<std::array<double, 3>> bumps;  // (y, x, amplitude)
    for (int k = 0; k < cfg.leak_bumps && !background.empty(); ++k) {
      const auto at = background[static_cast<std::size_t>(rng.below(background.size()))];
      bumps.push_back({static_cast<double>(at / static_cast<std::size_t>(g)),
                       static_cast<double>(at % static_cast<std::size_t>(g)),
                       cfg.leakage * peak * rng.uniform(0.8, 1.15)});
    }
    std::vector<double> noise(n_patch);
    for (auto& v : noise) v = 0.08 * peak * rng.uniform();
    const int bx0 = blobs[b].x0 / p, bx1 = blobs[b].x1 / p;
    const int by0 = blobs[b].y0 / p, by1 = blobs[b].y1 / p;
    double damp = 1.0;
    for (int attempt = 0;; ++attempt) {
      std::vector<double> cam = blurred;
      for (const auto& bump : bumps)
        for (int y = 0; y < g; ++y)
          for (int x = 0; x < g; ++x) {
            const double d2 = (y - bump[0]) * (y - bump[0]) + (x - bump[1]) * (x - bump[1]);
            cam[static_cast<std::size_t>(y * g + x)] += damp * bump[2] * std::exp(-d2 / (2 * 1.1 * 1.1));
          }
      for (std::size_t i = 0; i < n_patch; ++i) cam[i] += noise[i];
      const auto arg = static_cast<int>(std::max_element(cam.begin(), cam.end()) - cam.begin());
      const int ay = arg / g, ax = arg % g;
      if (ay >= by0 && ay <= by1 && ax >= bx0 && ax <= bx1) {
        for (std::size_t i = 0; i < n_patch; ++i)
          cam_out[b * n_patch + i] = static_cast<float>(cam[i]);
        break;
      }
      if (attempt >= 16) throw NumericError("fixture: CAM peak escaped the blob of " + img.image_id);
      damp *= 0.7;
    }
  }

  // Attention stand-ins.
  const Matrix unit = l2_normalize_rows(feat);
  const std::int64_t n_tok = static_cast<std::int64_t>(n_patch) + 1;
  img.clip_attn = Tensor(DType::f32, {cfg.layers, cfg.heads, n_tok, n_tok});
  img.dino_attn = Tensor(DType::f32, {cfg.layers, cfg.heads, n_tok, n_tok});
  for (int l = 0; l < cfg.layers; ++l)
    for (int h = 0; h < cfg.heads; ++h) {
      const double t = 0.06 * (1.0 + 0.3 * h + 0.1 * l);
      fill_attention(img.clip_attn, static_cast<std::size_t>(l), static_cast<std::size_t>(h),
                     unit, t, g, 0.0);
      fill_attention(img.dino_attn, static_cast<std::size_t>(l), static_cast<std::size_t>(h),
                     unit, t, g, 2.5 + 0.5 * h);
    }

  // Text rows: present classes first, then background prompts.
  const auto m = static_cast<std::size_t>(cfg.num_background);
  Matrix text(blobs.size() + m, d1);
  for (std::size_t b = 0; b < blobs.size(); ++b) {
    auto src = shared.class_text.row(static_cast<std::size_t>(blobs[b].cls));
    std::copy(src.begin(), src.end(), text.row(b).begin());
  }
  for (std::size_t k = 0; k < m; ++k) {
    auto src = shared.background_text.row(k);
    std::copy(src.begin(), src.end(), text.row(blobs.size() + k).begin());
  }
  img.text_feat = text.to_tensor<float>();
  return img;
}

}  // namespace fixture_detail

/// Generates every image in memory. Deterministic in `cfg`.
inline std::vector<FixtureImage> make_fixture(const FixtureConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const auto shared = fixture_detail::make_shared(cfg, rng);
  std::vector<FixtureImage> out;
  for (int i = 0; i < cfg.num_images; ++i)
    out.push_back(fixture_detail::make_image(cfg, shared, i, Rng(rng.fork())));
  return out;
}

/// Writes images, ground truth, feature files and manifest.json under `dir`.
inline DatasetManifest write_fixture(const FixtureConfig& cfg, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const auto images = make_fixture(cfg);
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "gt");
  fs::create_directories(dir / "features");
  DatasetManifest m;
  m.root = fs::absolute(dir);
  for (int c = 0; c < cfg.num_classes; ++c) m.class_names.emplace_back(kFixtureClassNames[static_cast<std::size_t>(c)]);
  m.num_background = cfg.num_background;
  m.patch_grid = std::array<int, 2>{cfg.grid(), cfg.grid()};
  for (const auto& img : images) {
    ManifestEntry e;
    e.image_id = img.image_id;
    e.labels = img.labels;
    e.image_path = fs::path("images") / (img.image_id + ".ppm");
    write_ppm(img.rgb, dir / e.image_path);
    e.gt_path = fs::path("gt") / (img.image_id + ".npy");
    save_tensor(img.gt, dir / *e.gt_path);
    const std::pair<const char*, const Tensor*> roles[] = {
        {"clip_feat", &img.clip_feat}, {"clip_attn", &img.clip_attn},
        {"dino_attn", &img.dino_attn}, {"cam_seed", &img.cam_seed},
        {"text_feat", &img.text_feat}};
    for (const auto& [role, t] : roles) {
      const auto rel = fs::path("features") / (img.image_id + "." + role + ".npy");
      save_tensor(*t, dir / rel);
      e.feature_paths[role] = rel;
    }
    m.entries.push_back(std::move(e));
  }
  save_manifest(m, dir / "manifest.json");
  return load_manifest(dir / "manifest.json");
}

}  // namespace ssr
