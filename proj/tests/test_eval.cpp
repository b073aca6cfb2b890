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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "ssr/eval.hpp"
#include "ssr/random.hpp"

namespace ssr {
namespace {

using Labels = std::vector<std::int32_t>;

SegmentationMetrics score(const Labels& pred, const Labels& gt, int classes) {
  ConfusionAccumulator acc(classes);
  acc.accumulate(pred, gt);
  return metrics(acc);
}

TEST(Metrics, FourPixelExample) {
  // gt  = [0, 0, 1, 1], pred = [0, 1, 1, 1]
  // IoU(0) = 1/2, IoU(1) = 2/3.
  const auto m = score({0, 1, 1, 1}, {0, 0, 1, 1}, 2);
  EXPECT_NEAR(m.per_class_iou[0], 0.5, 1e-15);
  EXPECT_NEAR(m.per_class_iou[1], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(m.miou, (0.5 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_NEAR(m.precision, (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_NEAR(m.recall, (0.5 + 1.0) / 2.0, 1e-15);
}

TEST(Metrics, PerfectPredictionScoresOne) {
  const Labels gt{0, 2, 2, 1, 0, 2};
  const auto m = score(gt, gt, 3);
  EXPECT_EQ(m.miou, 1.0);
  EXPECT_EQ(m.precision, 1.0);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_EQ(m.confusion_ratio, 0.0);
}

TEST(Metrics, AbsentClassesAreSkipped) {
  const auto m = score({0, 1}, {0, 1}, 4);
  EXPECT_EQ(m.miou, 1.0);
  EXPECT_TRUE(std::isnan(m.per_class_iou[3]));
}

TEST(Metrics, IgnoredPixelsDoNotCount) {
  const auto m = score({1, 0, 1}, {1, kIgnoreLabel, 1}, 2);
  EXPECT_EQ(m.miou, 1.0);
  ConfusionAccumulator acc(2);
  acc.accumulate(Labels{1, 0, 1}, Labels{1, kIgnoreLabel, 1});
  EXPECT_EQ(acc.pixel_count(), 2);
}

TEST(Metrics, ConfusionRatioCountsForegroundSwaps) {
  // Foreground gt pixels: 4; one predicted as another class, one as background.
  const auto m = score({1, 2, 0, 2, 0}, {1, 1, 1, 2, 0}, 3);
  EXPECT_NEAR(m.confusion_ratio, 1.0 / 4.0, 1e-15);
}

TEST(Metrics, EmptyPredictionClassHasZeroPrecision) {
  // Class 1 occurs in gt only, so its precision has an empty denominator.
  const auto m = score({0, 0}, {0, 1}, 2);
  EXPECT_EQ(m.per_class_precision[1], 0.0);
  EXPECT_EQ(m.per_class_recall[1], 0.0);
}

TEST(Metrics, BoundedInUnitInterval) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const int c = 2 + static_cast<int>(rng.below(5));
    Labels pred(50), gt(50);
    for (auto& p : pred) p = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(c)));
    for (auto& g : gt) g = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(c)));
    const auto m = score(pred, gt, c);
    for (double v : {m.miou, m.precision, m.recall, m.confusion_ratio}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Metrics, InvariantToPixelOrder) {
  Rng rng(2);
  Labels pred(64), gt(64);
  for (auto& p : pred) p = static_cast<std::int32_t>(rng.below(4));
  for (auto& g : gt) g = static_cast<std::int32_t>(rng.below(4));
  std::vector<std::size_t> perm(64);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  Labels pp(64), gp(64);
  for (std::size_t i = 0; i < 64; ++i) pp[i] = pred[perm[i]], gp[i] = gt[perm[i]];
  const auto a = score(pred, gt, 4), b = score(pp, gp, 4);
  EXPECT_EQ(a.miou, b.miou);
  EXPECT_EQ(a.precision, b.precision);
  EXPECT_EQ(a.confusion_ratio, b.confusion_ratio);
}

TEST(Metrics, MergingMatchesSingleAccumulation) {
  Rng rng(3);
  Labels pred(90), gt(90);
  for (auto& p : pred) p = static_cast<std::int32_t>(rng.below(3));
  for (auto& g : gt) g = rng.uniform() < 0.1 ? kIgnoreLabel : static_cast<std::int32_t>(rng.below(3));
  ConfusionAccumulator whole(3), a(3), b(3), c(3);
  whole.accumulate(pred, gt);
  const std::span<const std::int32_t> ps(pred), gs(gt);
  a.accumulate(ps.subspan(0, 30), gs.subspan(0, 30));
  b.accumulate(ps.subspan(30, 30), gs.subspan(30, 30));
  c.accumulate(ps.subspan(60), gs.subspan(60));
  ConfusionAccumulator left = a;
  left.merge(b);
  left.merge(c);
  ConfusionAccumulator right = b;
  right.merge(c);
  ConfusionAccumulator right2 = a;
  right2.merge(right);
  EXPECT_EQ(left.matrix(), whole.matrix());
  EXPECT_EQ(right2.matrix(), whole.matrix());
  EXPECT_EQ(left.pixel_count(), whole.pixel_count());
}

TEST(Metrics, RejectsBadInput) {
  ConfusionAccumulator acc(2);
  EXPECT_THROW(acc.accumulate(Labels{0, 1}, Labels{0}), InvalidArgument);
  EXPECT_THROW(acc.accumulate(Labels{2}, Labels{0}), InvalidArgument);
  EXPECT_THROW(metrics(acc), InvalidArgument);
  ConfusionAccumulator other(3);
  EXPECT_THROW(acc.merge(other), InvalidArgument);
}

TEST(PseudoLabels, ArgmaxOverPresentClassesWithBackgroundThreshold) {
  Matrix cam(2, 4);
  // Pixel scores for classes 3 and 7.
  const double v[] = {0.9, 0.2, 0.5, 0.3, 0.1, 0.8, 0.5, 0.4};
  std::copy(std::begin(v), std::end(v), cam.data().begin());
  const std::vector<int> labels{3, 7};
  const auto out = cam_to_pseudo_label(cam, labels, 0.45);
  EXPECT_EQ(out, (Labels{4, 8, 4, 0}));
}

TEST(PseudoLabels, ScoreEqualToThresholdIsBackground) {
  Matrix cam(1, 1);
  cam(0, 0) = 0.45;
  EXPECT_EQ(cam_to_pseudo_label(cam, std::vector<int>{0}, 0.45), (Labels{0}));
}

TEST(PseudoLabels, RejectsMismatchedChannels) {
  EXPECT_THROW(cam_to_pseudo_label(Matrix(2, 3), std::vector<int>{1}, 0.5), InvalidArgument);
  EXPECT_THROW(cam_to_pseudo_label(Matrix(0, 3), std::vector<int>{}, 0.5), InvalidArgument);
}

}  // namespace
}  // namespace ssr
