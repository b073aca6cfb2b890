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
#include <limits>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "kmeans_oracle.hpp"
#include "ssr/kmeans.hpp"

namespace ssr {
namespace {

using testing::best_two_partition_inertia;
using testing::random_points;

TEST(KMeans, MatchesExhaustiveTwoPartition) {
  for (std::uint64_t seed = 0; seed < 400; ++seed)
    EXPECT_LE(testing::kmeans_micro_gap(seed), 1e-9) << "seed " << seed;
}

TEST(KMeans, DistinctPointsWithKEqualNAreRecovered) {
  Rng rng(5);
  const Matrix pts = random_points(rng, 6, 3);
  const auto model = kmeans_fit(pts, 6, 1);
  EXPECT_EQ(model.inertia, 0.0);
  std::vector<bool> used(6, false);
  for (std::size_t c = 0; c < 6; ++c) {
    bool found = false;
    for (std::size_t i = 0; i < 6; ++i) {
      if (!used[i] && squared_distance(model.centroids.row(c), pts.row(i)) == 0.0) {
        used[i] = found = true;
        break;
      }
    }
    EXPECT_TRUE(found) << "centroid " << c;
  }
}

TEST(KMeans, SeparatedBlobsGiveCentroidsInsideEachBlob) {
  Rng rng(9);
  Matrix pts(12, 2);
  for (std::size_t i = 0; i < 12; ++i) {
    const double off = i < 6 ? -10.0 : 10.0;
    pts(i, 0) = off + rng.uniform(-1, 1);
    pts(i, 1) = rng.uniform(-1, 1);
  }
  const auto model = kmeans_fit(pts, 2, 3);
  const auto labels = model.labels;
  for (std::size_t i = 1; i < 6; ++i) EXPECT_EQ(labels[i], labels[0]);
  for (std::size_t i = 7; i < 12; ++i) EXPECT_EQ(labels[i], labels[6]);
  EXPECT_NE(labels[0], labels[6]);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_LT(std::abs(std::abs(model.centroids(c, 0)) - 10.0), 1.0);
  EXPECT_NEAR(model.inertia, best_two_partition_inertia(pts), 1e-9);
}

TEST(KMeans, DeterministicForFixedSeed) {
  Rng rng(1);
  const Matrix pts = random_points(rng, 40, 3);
  const auto a = kmeans_fit(pts, 4, 77);
  const auto b = kmeans_fit(pts, 4, 77);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.inertia, b.inertia);
}

TEST(KMeans, InertiaMatchesLabelsAndCentroidsAreMeans) {
  Rng rng(3);
  const Matrix pts = random_points(rng, 50, 4);
  const auto m = kmeans_fit(pts, 5, 0);
  EXPECT_EQ(m.labels, kmeans_assign(m, pts));
  EXPECT_NEAR(m.inertia, kmeans_inertia(pts, m.centroids, m.labels), 1e-9);
  for (std::size_t c = 0; c < 5; ++c) {
    std::vector<double> mean(4, 0.0);
    double count = 0;
    for (std::size_t i = 0; i < 50; ++i)
      if (m.labels[i] == static_cast<std::int32_t>(c)) {
        for (std::size_t j = 0; j < 4; ++j) mean[j] += pts(i, j);
        ++count;
      }
    ASSERT_GT(count, 0);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(m.centroids(c, j), mean[j] / count, 1e-12);
  }
}

TEST(KMeans, LloydNeverIncreasesInertia) {
  // Every restart runs the monotonicity check, which throws on violation.
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix pts = random_points(rng, 30, 2);
    EXPECT_NO_THROW(kmeans_fit(pts, 1 + rng.below(6), static_cast<std::uint64_t>(trial)));
  }
}

TEST(KMeans, MoreRestartsNeverHurt) {
  Rng rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    const Matrix pts = random_points(rng, 25, 2);
    KMeansOptions one;
    one.n_init = 1;
    one.hartigan_refine = false;
    const double single = kmeans_fit(pts, 3, 5, one).inertia;
    EXPECT_LE(kmeans_fit(pts, 3, 5).inertia, single + 1e-12);
  }
}

TEST(KMeans, DuplicatePointsDoNotLeaveEmptyClusters) {
  Matrix pts(5, 1);
  for (std::size_t i = 0; i < 5; ++i) pts(i, 0) = i < 4 ? 1.0 : 2.0;
  const auto m = kmeans_fit(pts, 3, 0);
  EXPECT_TRUE(all_finite(m.centroids.data()));
  EXPECT_EQ(m.inertia, 0.0);
}

TEST(KMeans, AssignBreaksTiesTowardLowestIndex) {
  Matrix centroids(3, 1);
  centroids(0, 0) = -1.0;
  centroids(1, 0) = 1.0;
  centroids(2, 0) = -1.0;
  Matrix p(1, 1);
  EXPECT_EQ(kmeans_assign(centroids, p)[0], 0);
}

TEST(KMeans, RejectsBadInput) {
  Matrix pts(3, 2);
  EXPECT_THROW(kmeans_fit(pts, 4, 0), InvalidArgument);
  EXPECT_THROW(kmeans_fit(pts, 0, 0), InvalidArgument);
  pts(1, 1) = std::nan("");
  EXPECT_THROW(kmeans_fit(pts, 2, 0), InvalidArgument);
  EXPECT_THROW(kmeans_assign(Matrix(2, 3), Matrix(2, 2)), InvalidArgument);
}

}  // namespace
}  // namespace ssr
