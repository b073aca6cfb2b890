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

// End-to-end composition: superpixel-guided CAM refinement per image and
// metric evaluation over label directories, with a bounded worker pool.
// Each image is processed independently, so output does not depend on the
// number of workers.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "ssr/affinity.hpp"
#include "ssr/config.hpp"
#include "ssr/error.hpp"
#include "ssr/eval.hpp"
#include "ssr/image.hpp"
#include "ssr/manifest.hpp"
#include "ssr/npy.hpp"
#include "ssr/superpixel.hpp"

namespace ssr {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. The exception of
/// the lowest failing index is rethrown after all threads finish.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const auto threads = static_cast<std::size_t>(std::max(1, workers));
  std::vector<std::exception_ptr> errors(n);
  if (threads == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, n); ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Channel-wise nearest upsample of a [C, gh*gw] map to [C, H*W].
inline Matrix upsample_channels(const Matrix& cam, int gh, int gw, int height, int width) {
  Matrix out(cam.rows(), static_cast<std::size_t>(height) * static_cast<std::size_t>(width));
  for (std::size_t c = 0; c < cam.rows(); ++c)
    for (int y = 0; y < height; ++y) {
      const auto sy = static_cast<std::size_t>(y) * static_cast<std::size_t>(gh) /
                      static_cast<std::size_t>(height);
      for (int x = 0; x < width; ++x) {
        const auto sx = static_cast<std::size_t>(x) * static_cast<std::size_t>(gw) /
                        static_cast<std::size_t>(width);
        out(c, static_cast<std::size_t>(y * width + x)) =
            cam(c, sy * static_cast<std::size_t>(gw) + sx);
      }
    }
  return out;
}

/// Per-pixel label map from a [C_f, gh*gw] CAM at image resolution.
inline Tensor label_map(const Matrix& cam, std::span<const int> labels, int gh, int gw, int height,
                        int width, double bg_thresh) {
  const auto up = upsample_channels(cam, gh, gw, height, width);
  return Tensor::from<std::int32_t>({height, width}, cam_to_pseudo_label(up, labels, bg_thresh));
}

struct ImageRefinement {
  std::string image_id;
  Matrix refined;  // [C_f, gh*gw]
  Tensor refined_cam;   // f32 [C_f, gh, gw]
  Tensor pseudo_label;  // i32 [H, W]
  Tensor seed_label;    // i32 [H, W], from the unrefined CAM
  int superpixels = 0;
  int regions = 0;
  int target_regions = 0;
  int kept_patches = 0;
  bool mask_fallback = false;
};

/// Superpixel-guided correction of one image's CAM seeds.
inline ImageRefinement refine_image(const DatasetManifest& m, const ManifestEntry& e,
                                    const PipelineConfig& cfg) {
  const FeatureBundle b = load_bundle(m, e);
  const Tensor rgb = load_image(e.image_path);
  const int height = static_cast<int>(rgb.dim(0)), width = static_cast<int>(rgb.dim(1));
  if (b.grid_h > height || b.grid_w > width) {
    throw DataError("entry " + e.image_id + ": patch grid larger than the image");
  }
  const Tensor lab = rgb_to_lab(rgb);
  const int target = std::min(cfg.slic.superpixels, height * width);
  const SuperpixelMap sp = slic_segment(lab, target, cfg.slic.compactness, cfg.slic.iterations);
  const auto rc = cluster_superpixels(sp, std::min(cfg.slic.regions, sp.num_superpixels),
                                      cfg.slic.seed);

  // One spatial prior per image from the strongest class at each patch.
  Matrix cam_max(static_cast<std::size_t>(b.grid_h), static_cast<std::size_t>(b.grid_w));
  for (std::size_t c = 0; c < b.cam_seed.rows(); ++c)
    for (std::size_t j = 0; j < b.cam_seed.cols(); ++j)
      cam_max.data()[j] = std::max(cam_max.data()[j], b.cam_seed(c, j));
  const auto targets = select_target_regions(rc, sp, cam_max, cfg.slic.high_conf_thresh,
                                             cfg.slic.ratio_thresh, ratio_mode(cfg.slic));
  const MaskMatrix mask = build_mask(regions_to_patch_mask(rc, targets, sp, b.grid_h, b.grid_w));

  const auto clip_l = static_cast<int>(b.clip_attn.dim(0));
  const auto dino_l = static_cast<int>(b.dino_attn.dim(0));
  const Matrix clip = average_heads(b.clip_attn, last_layers(clip_l, cfg.affinity.clip_layers));
  const Matrix dino = average_heads(b.dino_attn, last_layers(dino_l, cfg.affinity.dino_layers));
  const auto a = fuse_affinity(clip, dino, cfg.affinity.w_clip, cfg.affinity.w_dino);
  const auto a_star = apply_mask(a, mask, cfg.affinity.renormalize);

  ImageRefinement r;
  r.image_id = e.image_id;
  r.refined = refine_cam(a_star, b.cam_seed, cfg.affinity.prop_steps);
  Matrix stacked = r.refined;
  r.refined_cam = Tensor(DType::f32, {static_cast<std::int64_t>(b.labels.size()), b.grid_h, b.grid_w});
  auto dst = r.refined_cam.values<float>();
  for (std::size_t i = 0; i < stacked.size(); ++i) dst[i] = static_cast<float>(stacked.data()[i]);
  r.pseudo_label = label_map(r.refined, b.labels, b.grid_h, b.grid_w, height, width, cfg.bg_thresh);
  r.seed_label = label_map(b.cam_seed, b.labels, b.grid_h, b.grid_w, height, width, cfg.bg_thresh);
  r.superpixels = sp.num_superpixels;
  r.regions = rc.num_regions;
  r.target_regions = static_cast<int>(std::count(targets.is_target.begin(), targets.is_target.end(), true));
  r.kept_patches = static_cast<int>(std::count(mask.column_keep.begin(), mask.column_keep.end(), true));
  r.mask_fallback = mask.fallback_used;
  return r;
}

struct RefineSummary {
  std::size_t images = 0;
  std::size_t mask_fallbacks = 0;
  double mean_kept_fraction = 0.0;
};

/// Writes refined_cam/, pseudo_label/ and seed_label/ under `out_dir`.
inline RefineSummary run_refine(const DatasetManifest& m, const PipelineConfig& cfg,
                                const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  for (const char* sub : {"refined_cam", "pseudo_label", "seed_label"})
    fs::create_directories(out_dir / sub);
  std::vector<double> kept(m.entries.size(), 0.0);
  std::vector<char> fallback(m.entries.size(), 0);
  parallel_for(m.entries.size(), cfg.workers, [&](std::size_t i) {
    const auto r = refine_image(m, m.entries[i], cfg);
    save_tensor(r.refined_cam, out_dir / "refined_cam" / (r.image_id + ".npy"));
    save_tensor(r.pseudo_label, out_dir / "pseudo_label" / (r.image_id + ".npy"));
    save_tensor(r.seed_label, out_dir / "seed_label" / (r.image_id + ".npy"));
    kept[i] = static_cast<double>(r.kept_patches) / static_cast<double>(r.refined.cols());
    fallback[i] = r.mask_fallback;
  });
  RefineSummary s;
  s.images = m.entries.size();
  for (std::size_t i = 0; i < kept.size(); ++i) {
    s.mean_kept_fraction += kept[i] / static_cast<double>(kept.size());
    s.mask_fallbacks += static_cast<std::size_t>(fallback[i]);
  }
  return s;
}

struct EvalResult {
  ConfusionAccumulator confusion;
  SegmentationMetrics metrics;
  std::size_t images = 0;
};

/// Scores every `<id>.npy` in `gt_dir` against the same name in `pred_dir`.
inline EvalResult evaluate_directories(const std::filesystem::path& pred_dir,
                                       const std::filesystem::path& gt_dir, int num_foreground,
                                       int workers) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(gt_dir)) throw DataError("ground-truth directory not found: " + gt_dir.string());
  if (!fs::is_directory(pred_dir)) throw DataError("prediction directory not found: " + pred_dir.string());
  std::vector<fs::path> names;
  for (const auto& entry : fs::directory_iterator(gt_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".npy")
      names.push_back(entry.path().filename());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw DataError("no .npy ground-truth files in " + gt_dir.string());

  const int classes = num_foreground + 1;
  std::vector<ConfusionAccumulator> partial(names.size(), ConfusionAccumulator(classes));
  parallel_for(names.size(), workers, [&](std::size_t i) {
    const auto pred_path = pred_dir / names[i];
    if (!fs::exists(pred_path)) throw DataError("missing prediction: " + pred_path.string());
    const Tensor gt = load_tensor(gt_dir / names[i]);
    const Tensor pred = load_tensor(pred_path);
    if (gt.dtype() != DType::i32 || pred.dtype() != DType::i32) {
      throw DataError(names[i].string() + ": label maps must be int32");
    }
    if (gt.shape() != pred.shape()) {
      throw DataError(names[i].string() + ": prediction " + shape_str(pred.shape()) +
                      " vs ground truth " + shape_str(gt.shape()));
    }
    try {
      partial[i].accumulate(pred.values<std::int32_t>(), gt.values<std::int32_t>());
    } catch (const InvalidArgument& err) {
      throw DataError(names[i].string() + ": " + err.what());
    }
  });
  EvalResult out{ConfusionAccumulator(classes), {}, names.size()};
  for (const auto& p : partial) out.confusion.merge(p);
  if (out.confusion.pixel_count() == 0) throw DataError("every ground-truth pixel is ignored");
  out.metrics = metrics(out.confusion);
  return out;
}

// ---------------------------------------------------------------------------
// Bar chart of per-class IoU, precision and recall.

namespace plot_detail {

// 3x5 glyphs for the axis labels.
inline const char* glyph(char c) {
  switch (c) {
    case '0': return "111101101101111";
    case '1': return "010110010010111";
    case '2': return "111001111100111";
    case '3': return "111001111001111";
    case '4': return "101101111001001";
    case '5': return "111100111001111";
    case '6': return "111100111101111";
    case '7': return "111001001001001";
    case '8': return "111101111101111";
    case '9': return "111101111001111";
    case '.': return "000000000000010";
    default: return "000000000000000";
  }
}

struct Canvas {
  int w, h;
  Tensor rgb;

  Canvas(int width, int height) : w(width), h(height), rgb(DType::u8, {height, width, 3}) {
    auto v = rgb.values<std::uint8_t>();
    std::fill(v.begin(), v.end(), std::uint8_t{255});
  }

  void fill(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
    auto v = rgb.values<std::uint8_t>();
    for (int y = std::max(0, y0); y < std::min(h, y1); ++y)
      for (int x = std::max(0, x0); x < std::min(w, x1); ++x)
        for (int k = 0; k < 3; ++k) v[static_cast<std::size_t>((y * w + x) * 3 + k)] = c[static_cast<std::size_t>(k)];
  }

  void text(int x, int y, const std::string& s, int scale) {
    for (char ch : s) {
      const char* g = glyph(ch);
      for (int r = 0; r < 5; ++r)
        for (int q = 0; q < 3; ++q)
          if (g[r * 3 + q] == '1')
            fill(x + q * scale, y + r * scale, x + (q + 1) * scale, y + (r + 1) * scale, {40, 40, 40});
      x += 4 * scale;
    }
  }
};

}  // namespace plot_detail

/// Grouped bars per class (IoU, precision, recall); absent classes are blank.
inline void write_metrics_plot(const SegmentationMetrics& m, const std::filesystem::path& path) {
  const int classes = static_cast<int>(m.per_class_iou.size());
  const int group = 40, bar = 10, left = 44, top = 16, plot_h = 200;
  plot_detail::Canvas cv(left + classes * group + 16, top + plot_h + 24);
  for (int t = 0; t <= 4; ++t) {
    const int y = top + plot_h - t * plot_h / 4;
    cv.fill(left, y, cv.w - 8, y + 1, {220, 220, 220});
    const std::string label = t == 4 ? "1.0" : "0." + std::to_string(t * 25).substr(0, t ? 2 : 1);
    cv.text(4, y - 5, label, 2);
  }
  cv.fill(left, top, left + 1, top + plot_h + 1, {60, 60, 60});
  cv.fill(left, top + plot_h, cv.w - 8, top + plot_h + 1, {60, 60, 60});
  const std::array<std::array<std::uint8_t, 3>, 3> colours = {{{66, 133, 244}, {244, 160, 0}, {52, 168, 83}}};
  for (int c = 0; c < classes; ++c) {
    const double vals[3] = {m.per_class_iou[static_cast<std::size_t>(c)],
                            m.per_class_precision[static_cast<std::size_t>(c)],
                            m.per_class_recall[static_cast<std::size_t>(c)]};
    for (int k = 0; k < 3; ++k) {
      if (std::isnan(vals[k])) continue;
      const int x0 = left + c * group + 6 + k * bar;
      const int hgt = static_cast<int>(std::lround(vals[k] * plot_h));
      cv.fill(x0, top + plot_h - hgt, x0 + bar - 1, top + plot_h, colours[static_cast<std::size_t>(k)]);
    }
    cv.text(left + c * group + 14, top + plot_h + 6, std::to_string(c), 2);
  }
  write_png(cv.rgb, path);
}

}  // namespace ssr
