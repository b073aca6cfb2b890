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

// Cross-modal prototype alignment.
//
// Image patch features go through the ISA head, text class embeddings through
// the TSA head. Class-wise masked average pooling of the projected patches
// gives one image sample per (image, present class) pair; K-means over all
// pairs yields image and text prototype banks. Samples are trained with a
// prototype cross-entropy against the other modality's bank, with a learnable
// temperature. All backward passes are written out by hand.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include "ssr/error.hpp"
#include "ssr/eval.hpp"
#include "ssr/kmeans.hpp"
#include "ssr/manifest.hpp"
#include "ssr/matrix.hpp"
#include "ssr/npy.hpp"
#include "ssr/random.hpp"

namespace ssr {

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// Projection heads

struct BatchNorm {
  std::vector<double> gamma, beta, running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

struct DenseLayer {
  Matrix weight;                  // [d_out, d_in]
  std::vector<double> bias;       // [d_out]
  std::optional<BatchNorm> norm;  // present on hidden layers
};

/// Stacked linear (+ batch-norm + ReLU) layers. The last layer is purely
/// linear and its output rows are L2-normalised.
struct ProjectionHead {
  std::vector<DenseLayer> layers;

  std::size_t in_dim() const { return layers.front().weight.cols(); }
  std::size_t out_dim() const { return layers.back().weight.rows(); }
};

/// dims = {d_in, hidden..., d_out}. He-normal weights, zero bias, unit BN.
inline ProjectionHead make_projection_head(std::span<const std::size_t> dims, Rng& rng) {
  if (dims.size() < 2) throw InvalidArgument("projection head needs at least two dims");
  ProjectionHead head;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const bool last = l + 2 == dims.size();
    DenseLayer layer;
    layer.weight = Matrix(dims[l + 1], dims[l]);
    const double scale = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(dims[l]));
    for (auto& w : layer.weight.data()) w = scale * rng.normal();
    layer.bias.assign(dims[l + 1], 0.0);
    if (!last) {
      BatchNorm bn;
      bn.gamma.assign(dims[l + 1], 1.0);
      bn.beta.assign(dims[l + 1], 0.0);
      bn.running_mean.assign(dims[l + 1], 0.0);
      bn.running_var.assign(dims[l + 1], 1.0);
      layer.norm = std::move(bn);
    }
    head.layers.push_back(std::move(layer));
  }
  return head;
}

struct LayerCache {
  Matrix input;                  // [n, d_in]
  Matrix pre_norm;               // x W^T + b
  Matrix normalized;             // x-hat (hidden layers)
  Matrix activation_input;       // gamma * x-hat + beta (hidden layers)
  std::vector<double> inv_std;   // per feature
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // biased
};

struct HeadForward {
  Matrix output;                 // [n, d_out], unit rows
  std::vector<double> out_norms; // pre-normalisation row norms
  std::vector<LayerCache> layers;
  Mode mode = Mode::eval;
};

inline HeadForward project_forward(const ProjectionHead& head, const Matrix& x, Mode mode) {
  if (x.cols() != head.in_dim()) {
    throw InvalidArgument("project: input has " + std::to_string(x.cols()) +
                          " features, head expects " + std::to_string(head.in_dim()));
  }
  if (mode == Mode::train && x.rows() < 2) {
    throw InvalidArgument("project: train mode needs at least 2 rows for batch statistics");
  }
  HeadForward fwd;
  fwd.mode = mode;
  Matrix cur = x;
  for (const auto& layer : head.layers) {
    LayerCache c;
    c.input = cur;
    Matrix z = matmul_bt(cur, layer.weight);
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += layer.bias[j];
    c.pre_norm = z;
    if (layer.norm) {
      const auto& bn = *layer.norm;
      const std::size_t n = z.rows(), d = z.cols();
      std::vector<double> mean(d, 0.0), var(d, 0.0);
      if (mode == Mode::train) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) mean[j] += z(i, j);
        for (auto& m : mean) m /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            const double t = z(i, j) - mean[j];
            var[j] += t * t;
          }
        for (auto& v : var) v /= static_cast<double>(n);
      } else {
        mean = bn.running_mean;
        var = bn.running_var;
      }
      c.inv_std.resize(d);
      for (std::size_t j = 0; j < d; ++j) c.inv_std[j] = 1.0 / std::sqrt(var[j] + bn.eps);
      c.normalized = Matrix(n, d);
      c.activation_input = Matrix(n, d);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          const double xh = (z(i, j) - mean[j]) * c.inv_std[j];
          c.normalized(i, j) = xh;
          const double y = bn.gamma[j] * xh + bn.beta[j];
          c.activation_input(i, j) = y;
          z(i, j) = std::max(0.0, y);
        }
      c.batch_mean = std::move(mean);
      c.batch_var = std::move(var);
    }
    cur = std::move(z);
    fwd.layers.push_back(std::move(c));
  }
  fwd.out_norms.resize(cur.rows());
  for (std::size_t i = 0; i < cur.rows(); ++i) {
    auto row = cur.row(i);
    const double r = std::sqrt(dot(row, row));
    fwd.out_norms[i] = r;
    if (r > 0.0)
      for (auto& v : row) v /= r;
  }
  fwd.output = std::move(cur);
  return fwd;
}

/// Forward pass; output rows have unit L2 norm.
inline Matrix project(const ProjectionHead& head, const Matrix& x, Mode mode) {
  return project_forward(head, x, mode).output;
}

/// Folds the batch statistics of a train-mode pass into the running stats.
inline void update_running_stats(ProjectionHead& head, const HeadForward& fwd) {
  if (fwd.mode != Mode::train) return;
  for (std::size_t l = 0; l < head.layers.size(); ++l) {
    auto& norm = head.layers[l].norm;
    if (!norm) continue;
    const auto& c = fwd.layers[l];
    const double n = static_cast<double>(c.input.rows());
    for (std::size_t j = 0; j < norm->running_mean.size(); ++j) {
      norm->running_mean[j] =
          (1.0 - norm->momentum) * norm->running_mean[j] + norm->momentum * c.batch_mean[j];
      norm->running_var[j] = (1.0 - norm->momentum) * norm->running_var[j] +
                             norm->momentum * c.batch_var[j] * n / (n - 1.0);
    }
  }
}

struct HeadGrad {
  std::vector<Matrix> weight;
  std::vector<std::vector<double>> bias, gamma, beta;

  static HeadGrad zeros_like(const ProjectionHead& head) {
    HeadGrad g;
    for (const auto& l : head.layers) {
      g.weight.emplace_back(l.weight.rows(), l.weight.cols());
      g.bias.emplace_back(l.bias.size(), 0.0);
      g.gamma.emplace_back(l.norm ? l.norm->gamma.size() : 0, 0.0);
      g.beta.emplace_back(l.norm ? l.norm->beta.size() : 0, 0.0);
    }
    return g;
  }
};

/// Reverse pass for `project_forward`. Accumulates parameter gradients into
/// `grad` and returns dL/dx.
inline Matrix project_backward(const ProjectionHead& head, const HeadForward& fwd,
                               const Matrix& d_output, HeadGrad& grad) {
  const std::size_t n = fwd.output.rows();
  // L2 normalisation: do/dz = (I - o o^T) / r.
  Matrix d(n, fwd.output.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const double r = fwd.out_norms[i];
    if (r <= 0.0) continue;
    const double proj = dot(fwd.output.row(i), d_output.row(i));
    for (std::size_t j = 0; j < d.cols(); ++j)
      d(i, j) = (d_output(i, j) - fwd.output(i, j) * proj) / r;
  }

  for (std::size_t l = head.layers.size(); l-- > 0;) {
    const auto& layer = head.layers[l];
    const auto& c = fwd.layers[l];
    if (layer.norm) {
      const auto& bn = *layer.norm;
      const std::size_t dd = d.cols();
      // ReLU, then the affine part of batch-norm.
      Matrix dxhat(n, dd);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dd; ++j) {
          const double dy = c.activation_input(i, j) > 0.0 ? d(i, j) : 0.0;
          grad.gamma[l][j] += dy * c.normalized(i, j);
          grad.beta[l][j] += dy;
          dxhat(i, j) = dy * bn.gamma[j];
        }
      if (fwd.mode == Mode::train) {
        const double nn = static_cast<double>(n);
        for (std::size_t j = 0; j < dd; ++j) {
          double sum = 0.0, sum_x = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            sum += dxhat(i, j);
            sum_x += dxhat(i, j) * c.normalized(i, j);
          }
          for (std::size_t i = 0; i < n; ++i)
            d(i, j) = c.inv_std[j] / nn *
                      (nn * dxhat(i, j) - sum - c.normalized(i, j) * sum_x);
        }
      } else {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < dd; ++j) d(i, j) = dxhat(i, j) * c.inv_std[j];
      }
    }
    const Matrix dw = matmul_at(d, c.input);
    for (std::size_t k = 0; k < dw.size(); ++k) grad.weight[l].data()[k] += dw.data()[k];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d.cols(); ++j) grad.bias[l][j] += d(i, j);
    d = matmul(d, layer.weight);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Pooling, logits and losses

inline constexpr double kPoolEps = 1e-8;

/// CAM-weighted mean of feature rows, L2-normalised.
inline std::vector<double> masked_average_pool(std::span<const double> cam, const Matrix& feats) {
  if (cam.size() != feats.rows()) {
    throw InvalidArgument("masked_average_pool: " + std::to_string(cam.size()) +
                          " weights for " + std::to_string(feats.rows()) + " rows");
  }
  double mass = 0.0;
  std::vector<double> f(feats.cols(), 0.0);
  for (std::size_t j = 0; j < cam.size(); ++j) {
    mass += cam[j];
    auto row = feats.row(j);
    for (std::size_t k = 0; k < f.size(); ++k) f[k] += cam[j] * row[k];
  }
  const double denom = std::max(mass, kPoolEps);
  for (auto& v : f) v /= denom;
  const double r = std::sqrt(dot(f, f));
  if (r > 0.0)
    for (auto& v : f) v /= r;
  return f;
}

/// Adds dL/dfeats for `masked_average_pool` into `d_feats`.
inline void masked_average_pool_backward(std::span<const double> cam, const Matrix& feats,
                                         std::span<const double> d_out, Matrix& d_feats) {
  double mass = 0.0;
  std::vector<double> f(feats.cols(), 0.0);
  for (std::size_t j = 0; j < cam.size(); ++j) {
    mass += cam[j];
    auto row = feats.row(j);
    for (std::size_t k = 0; k < f.size(); ++k) f[k] += cam[j] * row[k];
  }
  const double denom = std::max(mass, kPoolEps);
  for (auto& v : f) v /= denom;
  const double r = std::sqrt(dot(f, f));
  if (r <= 0.0) return;
  std::vector<double> unit(f.size());
  for (std::size_t k = 0; k < f.size(); ++k) unit[k] = f[k] / r;
  const double proj = dot(unit, d_out);
  std::vector<double> d_raw(f.size());
  for (std::size_t k = 0; k < f.size(); ++k) d_raw[k] = (d_out[k] - unit[k] * proj) / r;
  for (std::size_t j = 0; j < cam.size(); ++j) {
    const double w = cam[j] / denom;
    if (w == 0.0) continue;
    auto row = d_feats.row(j);
    for (std::size_t k = 0; k < row.size(); ++k) row[k] += w * d_raw[k];
  }
}

/// logits[i, k] = <v_i, P_k> / tau.
inline Matrix prototype_logits(const Matrix& v, const Matrix& prototypes, double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("prototype_logits: tau must be > 0");
  Matrix out = matmul_bt(v, prototypes);
  for (auto& x : out.data()) x /= tau;
  return out;
}

/// argmax_k cos(F_i, P_k) over unit rows; ties go to the lowest k.
inline std::vector<std::int32_t> pseudo_labels(const Matrix& f, const Matrix& prototypes) {
  const Matrix s = matmul_bt(f, prototypes);
  std::vector<std::int32_t> out(f.rows(), 0);
  for (std::size_t i = 0; i < s.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < s.cols(); ++k)
      if (s(i, k) > s(i, best)) best = k;
    out[i] = static_cast<std::int32_t>(best);
  }
  return out;
}

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;  // same shape as the logits
};

/// Mean softmax cross-entropy of each row against its positive column.
inline LossAndGrad proto_loss(const Matrix& logits, std::span<const std::int32_t> pos) {
  if (pos.size() != logits.rows()) throw InvalidArgument("proto_loss: one positive per row");
  const std::size_t n = logits.rows(), k = logits.cols();
  LossAndGrad out{0.0, Matrix(n, k)};
  if (n == 0) return out;
  for (std::size_t i = 0; i < n; ++i) {
    if (pos[i] < 0 || static_cast<std::size_t>(pos[i]) >= k) {
      throw InvalidArgument("proto_loss: positive index out of range");
    }
    auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = std::log(z);
    out.loss -= row[static_cast<std::size_t>(pos[i])] - mx - log_z;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(row[j] - mx - log_z);
      out.grad(i, j) = (p - (j == static_cast<std::size_t>(pos[i]) ? 1.0 : 0.0)) /
                       static_cast<double>(n);
    }
  }
  out.loss /= static_cast<double>(n);
  return out;
}

/// Mean pixel cross-entropy. `logits` is [classes, pixels]; `mask` holds a
/// class per pixel or 255 for ignore. No labelled pixel gives loss 0.
inline LossAndGrad seg_loss(const Matrix& logits, std::span<const std::int32_t> mask) {
  const std::size_t classes = logits.rows(), pixels = logits.cols();
  if (mask.size() != pixels) throw InvalidArgument("seg_loss: mask size mismatch");
  LossAndGrad out{0.0, Matrix(classes, pixels)};
  std::size_t counted = 0;
  for (auto m : mask) {
    if (m == kIgnoreLabel) continue;
    if (m < 0 || static_cast<std::size_t>(m) >= classes) {
      throw InvalidArgument("seg_loss: label " + std::to_string(m) + " outside [0, " +
                            std::to_string(classes) + ")");
    }
    ++counted;
  }
  if (counted == 0) return out;
  const double scale = 1.0 / static_cast<double>(counted);
  for (std::size_t p = 0; p < pixels; ++p) {
    if (mask[p] == kIgnoreLabel) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, logits(c, p));
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(logits(c, p) - mx);
    const double log_z = std::log(z);
    const auto y = static_cast<std::size_t>(mask[p]);
    out.loss -= (logits(y, p) - mx - log_z) * scale;
    for (std::size_t c = 0; c < classes; ++c) {
      const double prob = std::exp(logits(c, p) - mx - log_z);
      out.grad(c, p) = (prob - (c == y ? 1.0 : 0.0)) * scale;
    }
  }
  return out;
}

inline double total_loss(double l_proto, double l_seg, double gamma) {
  return l_proto + gamma * l_seg;
}

// ---------------------------------------------------------------------------
// Prototype banks

struct PrototypeBank {
  Matrix image;  // [K, d2], unit rows
  Matrix text;   // [K, d2], unit rows; row k corresponds to image row k
  std::int64_t refresh_interval = 5000;
  std::int64_t last_refresh_iter = 0;
  bool matched_by_vote = true;  // false when the cosine fallback was used

  std::size_t k() const noexcept { return image.rows(); }
};

/// Maximum-score perfect matching on a square matrix (Hungarian algorithm).
/// Returns col_of_row.
inline std::vector<std::size_t> hungarian_max(const Matrix& score) {
  const std::size_t n = score.rows();
  if (score.cols() != n) throw InvalidArgument("hungarian_max: square matrix required");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = -score(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col_of_row(n, 0);
  for (std::size_t j = 1; j <= n; ++j) col_of_row[p[j] - 1] = j - 1;
  return col_of_row;
}

namespace proto_detail {

// Majority class of each cluster; ties go to the lowest class id.
inline std::vector<int> majority_class(std::span<const std::int32_t> cluster,
                                       std::span<const int> classes, std::size_t k) {
  std::vector<std::map<int, int>> votes(k);
  for (std::size_t i = 0; i < cluster.size(); ++i)
    ++votes[static_cast<std::size_t>(cluster[i])][classes[i]];
  std::vector<int> out(k, -1);
  for (std::size_t c = 0; c < k; ++c) {
    int best = 0;
    for (const auto& [cls, count] : votes[c]) {
      if (count > best) {
        best = count;
        out[c] = cls;
      }
    }
  }
  return out;
}

}  // namespace proto_detail

/// Independent K-means on image and text pair features. Text clusters are
/// reordered to line up with image clusters: by majority class when both
/// sides give a one-to-one class labelling, otherwise by maximum-cosine
/// matching of the centroids.
inline PrototypeBank refresh_prototypes(const Matrix& f_image, const Matrix& f_text,
                                        std::span<const int> class_of_pair, std::size_t k,
                                        std::uint64_t seed) {
  if (f_image.rows() != f_text.rows() || f_image.rows() != class_of_pair.size()) {
    throw InvalidArgument("refresh_prototypes: pair arrays differ in length");
  }
  if (f_image.rows() < k) {
    throw InvalidArgument("refresh_prototypes: " + std::to_string(f_image.rows()) +
                          " pairs cannot form " + std::to_string(k) + " prototypes");
  }
  Rng rng(seed);
  const auto img = kmeans_fit(f_image, k, rng.fork());
  const auto txt = kmeans_fit(f_text, k, rng.fork());
  const Matrix p_image = l2_normalize_rows(img.centroids);
  const Matrix p_text = l2_normalize_rows(txt.centroids);

  const auto img_major =
      proto_detail::majority_class(kmeans_assign(img, f_image), class_of_pair, k);
  const auto txt_major =
      proto_detail::majority_class(kmeans_assign(txt, f_text), class_of_pair, k);

  std::vector<std::size_t> text_for_image(k, k);
  bool by_vote = true;
  for (std::size_t a = 0; a < k && by_vote; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      if (img_major[a] >= 0 && txt_major[b] == img_major[a]) {
        if (text_for_image[a] != k) by_vote = false;  // class claimed twice
        text_for_image[a] = b;
      }
    }
    if (text_for_image[a] == k) by_vote = false;
  }
  if (by_vote) {
    std::vector<bool> seen(k, false);
    for (auto b : text_for_image) {
      if (seen[b]) by_vote = false;
      seen[b] = true;
    }
  }
  if (!by_vote) text_for_image = hungarian_max(matmul_bt(p_image, p_text));

  PrototypeBank bank;
  bank.image = p_image;
  bank.text = Matrix(k, p_text.cols());
  for (std::size_t a = 0; a < k; ++a) {
    auto src = p_text.row(text_for_image[a]);
    std::copy(src.begin(), src.end(), bank.text.row(a).begin());
  }
  bank.matched_by_vote = by_vote;
  return bank;
}

// ---------------------------------------------------------------------------
// Alignment state and training

struct LinearProbe {
  Matrix weight;             // [C+1, d1], a 1x1 convolution over patch features
  std::vector<double> bias;  // [C+1]
};

struct AlignmentConfig {
  double lr = 1e-5;
  double weight_decay = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double gamma = 0.1;     // weight of the segmentation loss
  double tau_init = 0.05;
  std::int64_t refresh_interval = 5000;
  std::size_t prototypes = 0;  // K; 0 means one per foreground class
  std::size_t hidden_dim = 0;  // 0 means d1 / 2
  std::size_t proj_dim = 0;    // d2; 0 means d1 / 4
  std::size_t batch_images = 8;
  double bg_thresh = 0.45;     // pseudo masks for the segmentation loss
  bool symmetric = true;       // also train text samples against image prototypes
  std::uint64_t seed = 0;
};

struct AlignmentState {
  ProjectionHead isa;
  ProjectionHead tsa;
  double log_tau = 0.0;
  LinearProbe probe;
  PrototypeBank bank;
  std::vector<std::vector<double>> adam_m, adam_v;
  std::int64_t adam_step = 0;
  std::int64_t iteration = 0;
  std::uint64_t seed = 0;

  double tau() const { return std::exp(log_tau); }
};

struct Gradients {
  HeadGrad isa, tsa;
  Matrix probe_weight;
  std::vector<double> probe_bias;
  double log_tau = 0.0;
};

struct ParamSlot {
  std::string name;
  std::span<double> values;
  bool decay = true;
};

inline std::vector<ParamSlot> parameter_slots(AlignmentState& s) {
  std::vector<ParamSlot> out;
  auto add_head = [&](const std::string& prefix, ProjectionHead& h) {
    for (std::size_t l = 0; l < h.layers.size(); ++l) {
      auto& layer = h.layers[l];
      const auto p = prefix + "." + std::to_string(l) + ".";
      out.push_back({p + "weight", layer.weight.data(), true});
      out.push_back({p + "bias", layer.bias, true});
      if (layer.norm) {
        out.push_back({p + "bn_gamma", layer.norm->gamma, true});
        out.push_back({p + "bn_beta", layer.norm->beta, true});
      }
    }
  };
  add_head("isa", s.isa);
  add_head("tsa", s.tsa);
  out.push_back({"probe.weight", s.probe.weight.data(), true});
  out.push_back({"probe.bias", s.probe.bias, true});
  // The temperature is not a weight; decaying it would drag tau towards 1.
  out.push_back({"log_tau", std::span<double>(&s.log_tau, 1), false});
  return out;
}

/// Same order as `parameter_slots`.
inline std::vector<std::span<double>> gradient_slots(Gradients& g, const AlignmentState& s) {
  std::vector<std::span<double>> out;
  auto add_head = [&](HeadGrad& hg, const ProjectionHead& h) {
    for (std::size_t l = 0; l < h.layers.size(); ++l) {
      out.emplace_back(hg.weight[l].data());
      out.emplace_back(hg.bias[l]);
      if (h.layers[l].norm) {
        out.emplace_back(hg.gamma[l]);
        out.emplace_back(hg.beta[l]);
      }
    }
  };
  add_head(g.isa, s.isa);
  add_head(g.tsa, s.tsa);
  out.emplace_back(g.probe_weight.data());
  out.emplace_back(g.probe_bias);
  out.emplace_back(&g.log_tau, 1);
  return out;
}

inline AlignmentState init_alignment(std::size_t feat_dim, std::size_t num_classes,
                                     const AlignmentConfig& cfg) {
  const std::size_t hidden = cfg.hidden_dim ? cfg.hidden_dim : feat_dim / 2;
  const std::size_t proj = cfg.proj_dim ? cfg.proj_dim : feat_dim / 4;
  if (hidden < 1 || proj < 1 || proj >= feat_dim) {
    throw InvalidArgument("alignment heads need 1 <= d2 < d1 (d1=" + std::to_string(feat_dim) +
                          ")");
  }
  if (!(cfg.tau_init > 0.0)) throw InvalidArgument("tau_init must be > 0");
  Rng rng(cfg.seed);
  AlignmentState s;
  const std::size_t dims[] = {feat_dim, hidden, proj};
  s.isa = make_projection_head(dims, rng);
  s.tsa = make_projection_head(dims, rng);
  s.log_tau = std::log(cfg.tau_init);
  s.probe.weight = Matrix(num_classes + 1, feat_dim);
  s.probe.bias.assign(num_classes + 1, 0.0);
  s.bank.refresh_interval = cfg.refresh_interval;
  s.seed = cfg.seed;
  return s;
}

/// One sample per (image, present class): pooled ISA features and the TSA
/// embedding of that class's text row. Eval-mode projections.
struct PairSet {
  Matrix f_image;  // [P, d2]
  Matrix f_text;   // [P, d2]
  std::vector<int> class_of_pair;
  std::vector<std::size_t> image_of_pair;
};

inline PairSet collect_pairs(std::span<const FeatureBundle> data, const AlignmentState& s) {
  std::size_t total = 0;
  for (const auto& b : data) total += b.labels.size();
  const std::size_t d2 = s.isa.out_dim();
  PairSet out{Matrix(total, d2), Matrix(total, d2), {}, {}};
  std::size_t p = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& b = data[i];
    const Matrix v = project(s.isa, b.clip_feat, Mode::eval);
    Matrix text_rows(b.labels.size(), b.text_feat.cols());
    for (std::size_t c = 0; c < b.labels.size(); ++c) {
      std::copy(b.text_feat.row(c).begin(), b.text_feat.row(c).end(), text_rows.row(c).begin());
    }
    const Matrix t = project(s.tsa, text_rows, Mode::eval);
    for (std::size_t c = 0; c < b.labels.size(); ++c, ++p) {
      const auto f = masked_average_pool(b.cam_seed.row(c), v);
      std::copy(f.begin(), f.end(), out.f_image.row(p).begin());
      std::copy(t.row(c).begin(), t.row(c).end(), out.f_text.row(p).begin());
      out.class_of_pair.push_back(b.labels[c]);
      out.image_of_pair.push_back(i);
    }
  }
  return out;
}

struct StepLosses {
  double proto = 0.0;
  double proto_image = 0.0;  // image samples vs text prototypes
  double proto_text = 0.0;   // text samples vs image prototypes
  double seg = 0.0;
  double total = 0.0;
};

struct ObjectiveResult {
  StepLosses losses;
  Gradients grads;
  HeadForward isa_forward, tsa_forward;
};

/// Full training objective on a batch with gradients for every parameter.
/// Pure: the state is not modified.
inline ObjectiveResult alignment_objective(const AlignmentState& s,
                                           std::span<const FeatureBundle* const> batch,
                                           const AlignmentConfig& cfg) {
  if (s.bank.k() == 0) throw InvalidArgument("alignment_objective: prototypes not initialised");
  const std::size_t d1 = s.isa.in_dim();
  std::size_t rows = 0, pairs = 0;
  for (const auto* b : batch) {
    rows += b->num_patches();
    pairs += b->labels.size();
  }
  if (pairs < 2) throw InvalidArgument("alignment_objective: batch needs at least 2 pairs");

  Matrix x(rows, d1), text_rows(pairs, d1);
  std::vector<std::size_t> offsets;
  for (std::size_t r = 0, p = 0; const auto* b : batch) {
    offsets.push_back(r);
    for (std::size_t i = 0; i < b->num_patches(); ++i, ++r)
      std::copy(b->clip_feat.row(i).begin(), b->clip_feat.row(i).end(), x.row(r).begin());
    for (std::size_t c = 0; c < b->labels.size(); ++c, ++p)
      std::copy(b->text_feat.row(c).begin(), b->text_feat.row(c).end(), text_rows.row(p).begin());
  }

  ObjectiveResult res;
  res.isa_forward = project_forward(s.isa, x, Mode::train);
  res.tsa_forward = project_forward(s.tsa, text_rows, Mode::train);
  const Matrix& v = res.isa_forward.output;
  const Matrix& g = res.tsa_forward.output;

  // Pooled image samples.
  Matrix f(pairs, v.cols());
  std::vector<Matrix> patch_views;
  std::vector<std::pair<std::size_t, std::size_t>> pair_src;  // (batch index, channel)
  for (std::size_t bi = 0, p = 0; bi < batch.size(); ++bi) {
    const auto* b = batch[bi];
    Matrix vb(b->num_patches(), v.cols());
    for (std::size_t i = 0; i < b->num_patches(); ++i)
      std::copy(v.row(offsets[bi] + i).begin(), v.row(offsets[bi] + i).end(), vb.row(i).begin());
    for (std::size_t c = 0; c < b->labels.size(); ++c, ++p) {
      const auto pooled = masked_average_pool(b->cam_seed.row(c), vb);
      std::copy(pooled.begin(), pooled.end(), f.row(p).begin());
      pair_src.emplace_back(bi, c);
    }
    patch_views.push_back(std::move(vb));
  }

  const double tau = s.tau();
  res.grads.isa = HeadGrad::zeros_like(s.isa);
  res.grads.tsa = HeadGrad::zeros_like(s.tsa);

  const Matrix logits_img = prototype_logits(f, s.bank.text, tau);
  auto ce_img = proto_loss(logits_img, pseudo_labels(f, s.bank.image));
  const double w_dir = cfg.symmetric ? 0.5 : 1.0;
  res.losses.proto_image = ce_img.loss;

  // d/dlog_tau of logits = -logits.
  double d_log_tau = 0.0;
  for (std::size_t i = 0; i < logits_img.size(); ++i)
    d_log_tau -= w_dir * ce_img.grad.data()[i] * logits_img.data()[i];
  Matrix df = matmul(ce_img.grad, s.bank.text);
  for (auto& val : df.data()) val *= w_dir / tau;

  Matrix dg(pairs, g.cols());
  if (cfg.symmetric) {
    const Matrix logits_txt = prototype_logits(g, s.bank.image, tau);
    auto ce_txt = proto_loss(logits_txt, pseudo_labels(g, s.bank.text));
    res.losses.proto_text = ce_txt.loss;
    for (std::size_t i = 0; i < logits_txt.size(); ++i)
      d_log_tau -= w_dir * ce_txt.grad.data()[i] * logits_txt.data()[i];
    dg = matmul(ce_txt.grad, s.bank.image);
    for (auto& val : dg.data()) val *= w_dir / tau;
    res.losses.proto = 0.5 * (ce_img.loss + ce_txt.loss);
  } else {
    res.losses.proto = ce_img.loss;
  }
  res.grads.log_tau = d_log_tau;

  Matrix dv(rows, v.cols());
  std::vector<Matrix> d_views;
  for (const auto& pv : patch_views) d_views.emplace_back(pv.rows(), pv.cols());
  for (std::size_t p = 0; p < pairs; ++p) {
    const auto [bi, c] = pair_src[p];
    masked_average_pool_backward(batch[bi]->cam_seed.row(c), patch_views[bi], df.row(p),
                                 d_views[bi]);
  }
  for (std::size_t bi = 0; bi < batch.size(); ++bi)
    for (std::size_t i = 0; i < d_views[bi].rows(); ++i)
      std::copy(d_views[bi].row(i).begin(), d_views[bi].row(i).end(), dv.row(offsets[bi] + i).begin());
  project_backward(s.isa, res.isa_forward, dv, res.grads.isa);
  project_backward(s.tsa, res.tsa_forward, dg, res.grads.tsa);

  // Segmentation loss through the linear probe on frozen features.
  const std::size_t classes = s.probe.weight.rows();
  Matrix seg_logits = matmul_bt(s.probe.weight, x);  // [C+1, rows]
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t r = 0; r < rows; ++r) seg_logits(c, r) += s.probe.bias[c];
  std::vector<std::int32_t> mask;
  mask.reserve(rows);
  for (const auto* b : batch) {
    const auto m = cam_to_pseudo_label(b->cam_seed, b->labels, cfg.bg_thresh);
    mask.insert(mask.end(), m.begin(), m.end());
  }
  const auto seg = seg_loss(seg_logits, mask);
  res.losses.seg = seg.loss;
  res.grads.probe_weight = matmul(seg.grad, x);
  res.grads.probe_bias.assign(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t r = 0; r < rows; ++r) res.grads.probe_bias[c] += seg.grad(c, r);
  for (auto& val : res.grads.probe_weight.data()) val *= cfg.gamma;
  for (auto& val : res.grads.probe_bias) val *= cfg.gamma;

  res.losses.total = total_loss(res.losses.proto, res.losses.seg, cfg.gamma);
  return res;
}

/// Decoupled weight decay Adam step over all slots.
inline void adamw_update(AlignmentState& s, Gradients& g, const AlignmentConfig& cfg) {
  auto params = parameter_slots(s);
  auto grads = gradient_slots(g, s);
  if (s.adam_m.size() != params.size()) {
    s.adam_m.clear();
    s.adam_v.clear();
    for (const auto& p : params) {
      s.adam_m.emplace_back(p.values.size(), 0.0);
      s.adam_v.emplace_back(p.values.size(), 0.0);
    }
  }
  ++s.adam_step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.adam_step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.adam_step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = s.adam_m[k];
    auto& v = s.adam_v[k];
    auto p = params[k].values;
    auto gr = grads[k];
    const double decay = params[k].decay ? 1.0 - cfg.lr * cfg.weight_decay : 1.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] *= decay;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gr[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gr[i] * gr[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

inline std::size_t prototype_count(const AlignmentConfig& cfg, std::size_t num_classes) {
  return cfg.prototypes ? cfg.prototypes : num_classes;
}

/// Rebuilds the prototype bank from all pairs in `data`.
inline void refresh_bank(AlignmentState& s, std::span<const FeatureBundle> data,
                         std::size_t k) {
  const PairSet pairs = collect_pairs(data, s);
  const auto interval = s.bank.refresh_interval;
  s.bank = refresh_prototypes(pairs.f_image, pairs.f_text, pairs.class_of_pair, k,
                              s.seed ^ (0xA5A5A5A5ULL + static_cast<std::uint64_t>(s.iteration)));
  s.bank.refresh_interval = interval;
  s.bank.last_refresh_iter = s.iteration;
}

inline std::string parameter_norm_report(AlignmentState& s) {
  std::ostringstream os;
  for (const auto& p : parameter_slots(s)) {
    os << p.name << "=" << std::sqrt(dot(p.values, p.values)) << " ";
  }
  return os.str();
}

/// Forward, backward, AdamW update, running-stat update, iteration count and
/// scheduled prototype refresh.
inline StepLosses train_step(AlignmentState& s, std::span<const FeatureBundle* const> batch,
                             std::span<const FeatureBundle> dataset,
                             const AlignmentConfig& cfg, std::size_t num_classes) {
  for (const auto& p : parameter_slots(s)) {
    if (!all_finite(p.values)) {
      throw NumericError("non-finite parameter " + p.name + " at iteration " +
                         std::to_string(s.iteration) + "; parameter norms: " +
                         parameter_norm_report(s));
    }
  }
  auto res = alignment_objective(s, batch, cfg);
  bool finite = std::isfinite(res.losses.total);
  for (auto slot : gradient_slots(res.grads, s)) finite = finite && all_finite(slot);
  if (!finite) {
    throw NumericError("non-finite loss at iteration " + std::to_string(s.iteration) +
                       "; parameter norms: " + parameter_norm_report(s));
  }
  adamw_update(s, res.grads, cfg);
  update_running_stats(s.isa, res.isa_forward);
  update_running_stats(s.tsa, res.tsa_forward);
  ++s.iteration;
  if (s.iteration - s.bank.last_refresh_iter >= s.bank.refresh_interval) {
    refresh_bank(s, dataset, prototype_count(cfg, num_classes));
  }
  return res.losses;
}

/// Eval-mode prototype loss over every pair in `data` against the current bank.
inline StepLosses evaluate_proto_loss(const AlignmentState& s,
                                      std::span<const FeatureBundle> data,
                                      const AlignmentConfig& cfg) {
  const PairSet pairs = collect_pairs(data, s);
  StepLosses out;
  out.proto_image = proto_loss(prototype_logits(pairs.f_image, s.bank.text, s.tau()),
                               pseudo_labels(pairs.f_image, s.bank.image))
                        .loss;
  if (cfg.symmetric) {
    out.proto_text = proto_loss(prototype_logits(pairs.f_text, s.bank.image, s.tau()),
                                pseudo_labels(pairs.f_text, s.bank.text))
                         .loss;
    out.proto = 0.5 * (out.proto_image + out.proto_text);
  } else {
    out.proto = out.proto_image;
  }
  out.total = out.proto;
  return out;
}

/// Sets every batch-norm running statistic to the full-dataset batch
/// statistic, so eval-mode projections match train mode from the start.
inline void calibrate_running_stats(AlignmentState& s, std::span<const FeatureBundle> data) {
  std::size_t rows = 0, text = 0;
  for (const auto& b : data) {
    rows += b.num_patches();
    text += b.labels.size();
  }
  if (rows < 2 || text < 2) return;
  Matrix x(rows, s.isa.in_dim()), t(text, s.tsa.in_dim());
  for (std::size_t r = 0, p = 0; const auto& b : data) {
    for (std::size_t i = 0; i < b.num_patches(); ++i, ++r)
      std::copy(b.clip_feat.row(i).begin(), b.clip_feat.row(i).end(), x.row(r).begin());
    for (std::size_t c = 0; c < b.labels.size(); ++c, ++p)
      std::copy(b.text_feat.row(c).begin(), b.text_feat.row(c).end(), t.row(p).begin());
  }
  auto adopt = [](ProjectionHead& head, const HeadForward& fwd) {
    for (std::size_t l = 0; l < head.layers.size(); ++l) {
      auto& norm = head.layers[l].norm;
      if (!norm) continue;
      const auto& c = fwd.layers[l];
      const double n = static_cast<double>(c.input.rows());
      norm->running_mean = c.batch_mean;
      for (std::size_t j = 0; j < c.batch_var.size(); ++j)
        norm->running_var[j] = c.batch_var[j] * n / (n - 1.0);
    }
  };
  adopt(s.isa, project_forward(s.isa, x, Mode::train));
  adopt(s.tsa, project_forward(s.tsa, t, Mode::train));
}

struct TrainHistory {
  StepLosses initial_eval;
  StepLosses final_eval;
  std::vector<StepLosses> steps;
};

/// Runs `iterations` steps from a fresh state. Batches are drawn from a
/// seeded per-epoch permutation of the images.
inline AlignmentState train_align(std::span<const FeatureBundle> dataset, std::size_t num_classes,
                                  const AlignmentConfig& cfg, std::int64_t iterations,
                                  TrainHistory* history = nullptr) {
  if (dataset.empty()) throw InvalidArgument("train_align: empty dataset");
  AlignmentState s = init_alignment(dataset.front().clip_feat.cols(), num_classes, cfg);
  calibrate_running_stats(s, dataset);
  refresh_bank(s, dataset, prototype_count(cfg, num_classes));
  if (history) history->initial_eval = evaluate_proto_loss(s, dataset, cfg);

  Rng rng(cfg.seed ^ 0x5EEDULL);
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  const std::size_t batch_size = std::clamp<std::size_t>(cfg.batch_images, 1, dataset.size());
  std::vector<const FeatureBundle*> batch;
  for (std::int64_t it = 0; it < iterations; ++it) {
    batch.clear();
    while (batch.size() < batch_size) {
      if (cursor == order.size()) {
        order.resize(dataset.size());
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
        cursor = 0;
      }
      batch.push_back(&dataset[order[cursor++]]);
    }
    const auto losses = train_step(s, batch, dataset, cfg, num_classes);
    if (history) history->steps.push_back(losses);
  }
  if (history) history->final_eval = evaluate_proto_loss(s, dataset, cfg);
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints: one .npy per tensor plus checkpoint.json.

inline void save_checkpoint(AlignmentState& s, const AlignmentConfig& cfg,
                            const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["schema_version"] = 1;
  meta["iteration"] = s.iteration;
  meta["adam_step"] = s.adam_step;
  meta["seed"] = s.seed;
  meta["tau"] = s.tau();
  meta["bank"] = {{"k", s.bank.k()},
                  {"refresh_interval", s.bank.refresh_interval},
                  {"last_refresh_iter", s.bank.last_refresh_iter},
                  {"matched_by_vote", s.bank.matched_by_vote}};
  meta["config"] = {{"lr", cfg.lr},
                    {"weight_decay", cfg.weight_decay},
                    {"gamma", cfg.gamma},
                    {"tau_init", cfg.tau_init},
                    {"batch_images", cfg.batch_images},
                    {"symmetric", cfg.symmetric}};
  nlohmann::json heads = nlohmann::json::object();
  for (auto* named : {&s.isa, &s.tsa}) {
    const std::string prefix = named == &s.isa ? "isa" : "tsa";
    nlohmann::json dims = nlohmann::json::array();
    dims.push_back(named->in_dim());
    for (std::size_t l = 0; l < named->layers.size(); ++l) {
      auto& layer = named->layers[l];
      dims.push_back(layer.weight.rows());
      const auto p = prefix + "." + std::to_string(l) + ".";
      save_tensor(layer.weight.to_tensor<double>(), dir / (p + "weight.npy"));
      save_tensor(Tensor::from<double>({static_cast<std::int64_t>(layer.bias.size())}, layer.bias),
                  dir / (p + "bias.npy"));
      if (layer.norm) {
        const auto n = static_cast<std::int64_t>(layer.norm->gamma.size());
        save_tensor(Tensor::from<double>({n}, layer.norm->gamma), dir / (p + "bn_gamma.npy"));
        save_tensor(Tensor::from<double>({n}, layer.norm->beta), dir / (p + "bn_beta.npy"));
        save_tensor(Tensor::from<double>({n}, layer.norm->running_mean),
                    dir / (p + "bn_running_mean.npy"));
        save_tensor(Tensor::from<double>({n}, layer.norm->running_var),
                    dir / (p + "bn_running_var.npy"));
      }
    }
    heads[prefix] = dims;
  }
  meta["heads"] = heads;
  save_tensor(s.probe.weight.to_tensor<double>(), dir / "probe.weight.npy");
  save_tensor(Tensor::from<double>({static_cast<std::int64_t>(s.probe.bias.size())}, s.probe.bias),
              dir / "probe.bias.npy");
  save_tensor(Tensor::from<double>({}, {s.log_tau}), dir / "log_tau.npy");
  save_tensor(s.bank.image.to_tensor<double>(), dir / "prototypes.image.npy");
  save_tensor(s.bank.text.to_tensor<double>(), dir / "prototypes.text.npy");
  std::ofstream out(dir / "checkpoint.json", std::ios::trunc);
  out << meta.dump(2) << "\n";
  if (!out) throw IoError("cannot write " + (dir / "checkpoint.json").string());
}

inline AlignmentState load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw IoError("cannot open " + (dir / "checkpoint.json").string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("checkpoint.json: " + std::string(e.what()), e.byte);
  }
  auto vec = [&](const std::string& name) {
    const Tensor t = load_tensor(dir / name);
    return t.to_double();
  };
  AlignmentState s;
  try {
    s.iteration = meta.at("iteration").get<std::int64_t>();
    s.adam_step = meta.at("adam_step").get<std::int64_t>();
    s.seed = meta.at("seed").get<std::uint64_t>();
    for (auto* head : {&s.isa, &s.tsa}) {
      const std::string prefix = head == &s.isa ? "isa" : "tsa";
      const auto dims = meta.at("heads").at(prefix).get<std::vector<std::size_t>>();
      for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        DenseLayer layer;
        const auto p = prefix + "." + std::to_string(l) + ".";
        layer.weight = Matrix::from_tensor(load_tensor(dir / (p + "weight.npy")));
        layer.bias = vec(p + "bias.npy");
        if (l + 2 < dims.size()) {
          BatchNorm bn;
          bn.gamma = vec(p + "bn_gamma.npy");
          bn.beta = vec(p + "bn_beta.npy");
          bn.running_mean = vec(p + "bn_running_mean.npy");
          bn.running_var = vec(p + "bn_running_var.npy");
          layer.norm = std::move(bn);
        }
        head->layers.push_back(std::move(layer));
      }
    }
    s.probe.weight = Matrix::from_tensor(load_tensor(dir / "probe.weight.npy"));
    s.probe.bias = vec("probe.bias.npy");
    s.log_tau = vec("log_tau.npy").at(0);
    s.bank.image = Matrix::from_tensor(load_tensor(dir / "prototypes.image.npy"));
    s.bank.text = Matrix::from_tensor(load_tensor(dir / "prototypes.text.npy"));
    s.bank.refresh_interval = meta.at("bank").at("refresh_interval").get<std::int64_t>();
    s.bank.last_refresh_iter = meta.at("bank").at("last_refresh_iter").get<std::int64_t>();
    s.bank.matched_by_vote = meta.at("bank").at("matched_by_vote").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint.json: " + std::string(e.what()));
  }
  return s;
}

}  // namespace ssr
