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

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ssr/error.hpp"
#include "ssr/matrix.hpp"

namespace ssr {

inline constexpr std::int32_t kIgnoreLabel = 255;

/// Label maps use 0 for background and class index + 1 for foreground class.
/// Pixels whose best present-class score does not exceed `bg_thresh` are
/// background. `cam` is [C_f, h*w], rows aligned with `labels`.
inline std::vector<std::int32_t> cam_to_pseudo_label(const Matrix& cam,
                                                     std::span<const int> labels,
                                                     double bg_thresh) {
  if (labels.empty()) throw InvalidArgument("cam_to_pseudo_label: empty label list");
  if (cam.rows() != labels.size()) {
    throw InvalidArgument("cam_to_pseudo_label: " + std::to_string(cam.rows()) +
                          " CAM channels for " + std::to_string(labels.size()) + " labels");
  }
  std::vector<std::int32_t> out(cam.cols(), 0);
  for (std::size_t p = 0; p < cam.cols(); ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cam.rows(); ++c)
      if (cam(c, p) > cam(best, p)) best = c;
    if (cam(best, p) > bg_thresh) out[p] = labels[best] + 1;
  }
  return out;
}

/// Rows are ground truth, columns prediction; index 0 is background.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(int num_classes)
      : n_(num_classes), matrix_(static_cast<std::size_t>(num_classes * num_classes), 0) {
    if (num_classes < 1) throw InvalidArgument("confusion matrix needs >= 1 class");
  }

  int num_classes() const noexcept { return n_; }
  std::int64_t pixel_count() const noexcept { return pixels_; }
  std::int64_t at(int gt, int pred) const {
    return matrix_[static_cast<std::size_t>(gt * n_ + pred)];
  }
  const std::vector<std::int64_t>& matrix() const noexcept { return matrix_; }

  void accumulate(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt) {
    if (pred.size() != gt.size()) {
      throw InvalidArgument("accumulate: prediction has " + std::to_string(pred.size()) +
                            " pixels, ground truth " + std::to_string(gt.size()));
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == kIgnoreLabel) continue;
      if (gt[i] < 0 || gt[i] >= n_ || pred[i] < 0 || pred[i] >= n_) {
        throw InvalidArgument("accumulate: class out of range at pixel " + std::to_string(i) +
                              " (gt " + std::to_string(gt[i]) + ", pred " +
                              std::to_string(pred[i]) + ")");
      }
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == kIgnoreLabel) continue;
      ++matrix_[static_cast<std::size_t>(gt[i] * n_ + pred[i])];
      ++pixels_;
    }
  }

  void merge(const ConfusionAccumulator& other) {
    if (other.n_ != n_) throw InvalidArgument("merge: class count mismatch");
    for (std::size_t i = 0; i < matrix_.size(); ++i) matrix_[i] += other.matrix_[i];
    pixels_ += other.pixels_;
  }

 private:
  int n_;
  std::vector<std::int64_t> matrix_;
  std::int64_t pixels_ = 0;
};

struct SegmentationMetrics {
  double miou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  // Fraction of foreground ground-truth pixels predicted as a different
  // foreground class.
  double confusion_ratio = 0.0;
  // NaN for classes absent from both ground truth and prediction.
  std::vector<double> per_class_iou;
  std::vector<double> per_class_precision;
  std::vector<double> per_class_recall;
};

/// Averages run over classes present in ground truth or prediction.
inline SegmentationMetrics metrics(const ConfusionAccumulator& acc) {
  if (acc.pixel_count() == 0) throw InvalidArgument("metrics: no pixels accumulated");
  const int n = acc.num_classes();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  SegmentationMetrics m;
  m.per_class_iou.assign(static_cast<std::size_t>(n), nan);
  m.per_class_precision.assign(static_cast<std::size_t>(n), nan);
  m.per_class_recall.assign(static_cast<std::size_t>(n), nan);

  int present = 0;
  for (int c = 0; c < n; ++c) {
    std::int64_t gt_total = 0, pred_total = 0;
    for (int k = 0; k < n; ++k) {
      gt_total += acc.at(c, k);
      pred_total += acc.at(k, c);
    }
    if (gt_total == 0 && pred_total == 0) continue;
    const auto tp = static_cast<double>(acc.at(c, c));
    const auto fn = static_cast<double>(gt_total) - tp;
    const auto fp = static_cast<double>(pred_total) - tp;
    const auto i = static_cast<std::size_t>(c);
    m.per_class_iou[i] = tp / (tp + fp + fn);
    m.per_class_precision[i] = pred_total ? tp / static_cast<double>(pred_total) : 0.0;
    m.per_class_recall[i] = gt_total ? tp / static_cast<double>(gt_total) : 0.0;
    m.miou += m.per_class_iou[i];
    m.precision += m.per_class_precision[i];
    m.recall += m.per_class_recall[i];
    ++present;
  }
  m.miou /= present;
  m.precision /= present;
  m.recall /= present;

  std::int64_t fg = 0, confused = 0;
  for (int g = 1; g < n; ++g) {
    for (int p = 0; p < n; ++p) {
      fg += acc.at(g, p);
      if (p >= 1 && p != g) confused += acc.at(g, p);
    }
  }
  m.confusion_ratio = fg ? static_cast<double>(confused) / static_cast<double>(fg) : 0.0;
  return m;
}

}  // namespace ssr
