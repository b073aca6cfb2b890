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

// Attention-derived affinity: head/layer averaging, CLIP/DINO fusion, the
// column mask over target patches, and CAM propagation.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ssr/error.hpp"
#include "ssr/matrix.hpp"
#include "ssr/tensor.hpp"

namespace ssr {

/// Row sums within this distance of 1 count as already normalised and are
/// left untouched, which keeps normalisation idempotent bit for bit.
inline constexpr double kRowSumTolerance = 1e-12;

struct AffinityMatrix {
  Matrix values;  // [N, N], patch tokens only
  bool row_normalized = false;
};

struct MaskMatrix {
  std::vector<bool> column_keep;  // [N]
  bool fallback_used = false;     // set when no column was selected

  std::size_t size() const noexcept { return column_keep.size(); }

  Matrix materialize() const {
    const auto n = column_keep.size();
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) m(i, j) = column_keep[j] ? 1.0 : 0.0;
    return m;
  }
};

/// Half-open layer interval [begin, end).
struct LayerRange {
  int begin = 0;
  int end = 0;
};

/// The last `count` layers of an L-layer stack (all layers if count >= L).
inline LayerRange last_layers(int num_layers, int count) {
  return {std::max(0, num_layers - count), num_layers};
}

/// Mean over the selected layers and all heads of [L, H, N+1, N+1] attention,
/// class token (index 0) dropped, then symmetrised and clamped at zero.
inline Matrix average_heads(const Tensor& attn, LayerRange layers) {
  if (attn.rank() != 4 || attn.dim(2) != attn.dim(3) || attn.dim(2) < 2) {
    throw InvalidArgument("average_heads expects [L, H, N+1, N+1], got " +
                          shape_str(attn.shape()));
  }
  const auto num_layers = static_cast<int>(attn.dim(0));
  if (layers.begin >= layers.end) throw InvalidArgument("average_heads: empty layer range");
  if (layers.begin < 0 || layers.end > num_layers) {
    throw InvalidArgument("average_heads: layer range [" + std::to_string(layers.begin) + ", " +
                          std::to_string(layers.end) + ") outside [0, " +
                          std::to_string(num_layers) + ")");
  }
  const auto heads = static_cast<std::size_t>(attn.dim(1));
  const auto tokens = static_cast<std::size_t>(attn.dim(2));
  const std::size_t n = tokens - 1;
  const std::vector<double> data = attn.to_double();

  Matrix mean(n, n);
  for (int l = layers.begin; l < layers.end; ++l) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t base = (static_cast<std::size_t>(l) * heads + hd) * tokens * tokens;
      for (std::size_t i = 0; i < n; ++i) {
        const double* src = data.data() + base + (i + 1) * tokens + 1;
        auto dst = mean.row(i);
        for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
      }
    }
  }
  const double count = static_cast<double>(layers.end - layers.begin) * static_cast<double>(heads);
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double v = 0.5 * (mean(i, j) / count + mean(j, i) / count);
      out(i, j) = std::max(0.0, v);
    }
  }
  return out;
}

/// Rescales rows to sum to 1. All-zero rows become uniform 1/N; their count is
/// reported through `zero_rows`.
inline Matrix row_normalize(Matrix m, int* zero_rows = nullptr) {
  int zeros = 0;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    double s = 0.0;
    for (double x : row) s += x;
    if (s <= 0.0) {
      ++zeros;
      std::fill(row.begin(), row.end(), 1.0 / static_cast<double>(m.cols()));
      continue;
    }
    if (std::abs(s - 1.0) <= kRowSumTolerance) continue;
    for (auto& x : row) x /= s;
  }
  if (zero_rows) *zero_rows = zeros;
  return m;
}

/// A = rownorm(w_clip * rownorm(clip) + w_dino * rownorm(dino)).
inline AffinityMatrix fuse_affinity(const Matrix& clip_avg, const Matrix& dino_avg,
                                    double w_clip, double w_dino, int* zero_rows = nullptr) {
  if (clip_avg.rows() != clip_avg.cols() || clip_avg.rows() != dino_avg.rows() ||
      dino_avg.rows() != dino_avg.cols()) {
    throw InvalidArgument("fuse_affinity: attention maps must be square and equal-sized");
  }
  if (w_clip < 0.0 || w_dino < 0.0 || std::abs(w_clip + w_dino - 1.0) > 1e-9) {
    throw InvalidArgument("fuse_affinity: weights must be non-negative and sum to 1");
  }
  int z1 = 0, z2 = 0, z3 = 0;
  const Matrix c = row_normalize(clip_avg, &z1);
  const Matrix d = row_normalize(dino_avg, &z2);
  Matrix mix(c.rows(), c.cols());
  for (std::size_t i = 0; i < mix.size(); ++i)
    mix.data()[i] = w_clip * c.data()[i] + w_dino * d.data()[i];
  AffinityMatrix a{row_normalize(std::move(mix), &z3), true};
  if (zero_rows) *zero_rows = z1 + z2 + z3;
  return a;
}

/// Column selector over patch tokens. An empty selection falls back to
/// keeping every column so the CAM cannot collapse to zero.
inline MaskMatrix build_mask(std::vector<bool> column_keep) {
  MaskMatrix m{std::move(column_keep), false};
  if (std::none_of(m.column_keep.begin(), m.column_keep.end(), [](bool b) { return b; })) {
    std::fill(m.column_keep.begin(), m.column_keep.end(), true);
    m.fallback_used = true;
  }
  return m;
}

/// A*[i, j] = A[i, j] * keep[j]. With `renormalize`, non-zero rows are
/// rescaled to sum 1 and rows left empty become one-hot on the diagonal.
inline AffinityMatrix apply_mask(const AffinityMatrix& a, const MaskMatrix& mask,
                                 bool renormalize) {
  const std::size_t n = a.values.rows();
  if (mask.size() != n || a.values.cols() != n) {
    throw InvalidArgument("apply_mask: mask has " + std::to_string(mask.size()) +
                          " columns, affinity is " + std::to_string(n) + "x" +
                          std::to_string(a.values.cols()));
  }
  const bool all_kept =
      std::all_of(mask.column_keep.begin(), mask.column_keep.end(), [](bool b) { return b; });
  AffinityMatrix out{a.values, all_kept && a.row_normalized};
  for (std::size_t i = 0; i < n; ++i) {
    auto row = out.values.row(i);
    for (std::size_t j = 0; j < n; ++j)
      if (!mask.column_keep[j]) row[j] = 0.0;
  }
  if (!renormalize) return out;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = out.values.row(i);
    double s = 0.0;
    for (double x : row) s += x;
    if (s <= 0.0) {
      std::fill(row.begin(), row.end(), 0.0);
      row[i] = 1.0;
    } else if (std::abs(s - 1.0) > kRowSumTolerance) {
      for (auto& x : row) x /= s;
    }
  }
  out.row_normalized = true;
  return out;
}

/// cam_out[c, i] = sum_j A*[i, j] cam[c, j], applied `steps` times. No
/// normalisation.
inline Matrix propagate_cam(const AffinityMatrix& a_star, const Matrix& cam, int steps) {
  if (steps < 1) throw InvalidArgument("propagation steps must be >= 1");
  if (cam.cols() != a_star.values.rows()) {
    throw InvalidArgument("refine_cam: CAM has " + std::to_string(cam.cols()) +
                          " patches, affinity " + std::to_string(a_star.values.rows()));
  }
  Matrix out = cam;
  for (int t = 0; t < steps; ++t) out = matmul_bt(out, a_star.values);
  return out;
}

/// Min-max rescale of each row to [0, 1]. A constant row becomes all ones if
/// positive, otherwise all zeros.
inline Matrix minmax_normalize_rows(Matrix m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    if (row.empty()) continue;
    const auto [lo_it, hi_it] = std::minmax_element(row.begin(), row.end());
    const double lo = *lo_it, hi = *hi_it;
    if (hi - lo < 1e-12) {
      std::fill(row.begin(), row.end(), hi > 0.0 ? 1.0 : 0.0);
      continue;
    }
    for (auto& x : row) x = (x - lo) / (hi - lo);
  }
  return m;
}

/// Propagates each class channel through A* and renormalises it to [0, 1].
inline Matrix refine_cam(const AffinityMatrix& a_star, const Matrix& cam, int steps) {
  return minmax_normalize_rows(propagate_cam(a_star, cam, steps));
}

}  // namespace ssr
