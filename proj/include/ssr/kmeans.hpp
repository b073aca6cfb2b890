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

// K-means with k-means++ seeding, Lloyd iterations and a Hartigan single-point
// refinement pass. Used for prototype banks, superpixel colour regions and
// cluster pseudo-labels.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "ssr/error.hpp"
#include "ssr/matrix.hpp"
#include "ssr/random.hpp"

namespace ssr {

struct KMeansOptions {
  int max_iter = 300;
  double tol = 1e-6;  // on the largest centroid displacement
  int n_init = 4;     // independent k-means++ restarts; lowest inertia wins
  bool hartigan_refine = true;
  // When C(n, K) is at most this, every K-subset of the points also seeds a
  // run. Only tiny problems qualify.
  std::size_t exhaustive_seed_limit = 64;
};

struct KMeansModel {
  Matrix centroids;  // [K, d]
  double inertia = 0.0;
  int iterations_run = 0;
  std::vector<std::int32_t> labels;  // assignment of the fitted points

  std::size_t k() const noexcept { return centroids.rows(); }
};

/// labels[i] = argmin_k ||points[i] - centroid_k||^2, ties to the lowest k.
inline std::vector<std::int32_t> kmeans_assign(const Matrix& centroids, const Matrix& points) {
  if (centroids.cols() != points.cols()) {
    throw InvalidArgument("kmeans_assign: points have dimension " +
                          std::to_string(points.cols()) + ", centroids " +
                          std::to_string(centroids.cols()));
  }
  std::vector<std::int32_t> labels(points.rows(), 0);
  for (std::size_t i = 0; i < points.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < centroids.rows(); ++k) {
      const double d = squared_distance(points.row(i), centroids.row(k));
      if (d < best) {
        best = d;
        labels[i] = static_cast<std::int32_t>(k);
      }
    }
  }
  return labels;
}

inline std::vector<std::int32_t> kmeans_assign(const KMeansModel& model, const Matrix& points) {
  return kmeans_assign(model.centroids, points);
}

inline double kmeans_inertia(const Matrix& points, const Matrix& centroids,
                             const std::vector<std::int32_t>& labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < points.rows(); ++i) {
    s += squared_distance(points.row(i), centroids.row(static_cast<std::size_t>(labels[i])));
  }
  return s;
}

namespace kmeans_detail {

inline Matrix plus_plus_init(const Matrix& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.rows();
  Matrix centroids(k, points.cols());
  std::vector<bool> chosen(n, false);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());

  auto take = [&](std::size_t c, std::size_t idx) {
    chosen[idx] = true;
    std::copy(points.row(idx).begin(), points.row(idx).end(), centroids.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(points.row(i), centroids.row(c)));
    }
  };

  take(0, static_cast<std::size_t>(rng.below(n)));
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        acc += d2[i];
        pick = i;
        if (acc > target) break;
      }
    } else {
      // Every remaining point duplicates a centre; fall back to the first unused one.
      for (std::size_t i = 0; i < n && pick == n; ++i)
        if (!chosen[i]) pick = i;
    }
    take(c, pick);
  }
  return centroids;
}

// Recomputes means; empty clusters take the point farthest from its centroid.
inline void update_centroids(const Matrix& points, Matrix& centroids,
                             std::vector<std::int32_t>& labels) {
  const std::size_t k = centroids.rows(), d = points.cols(), n = points.rows();
  while (true) {
    std::vector<std::size_t> counts(k, 0);
    for (auto l : labels) ++counts[static_cast<std::size_t>(l)];
    std::size_t empty = k;
    for (std::size_t c = 0; c < k && empty == k; ++c)
      if (counts[c] == 0) empty = c;
    if (empty == k) break;

    std::size_t far = n;
    double far_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(labels[i]);
      if (counts[c] < 2) continue;
      const double dd = squared_distance(points.row(i), centroids.row(c));
      if (dd > far_d) {
        far_d = dd;
        far = i;
      }
    }
    if (far == n) break;  // cannot happen while n >= k
    labels[far] = static_cast<std::int32_t>(empty);
    std::copy(points.row(far).begin(), points.row(far).end(), centroids.row(empty).begin());
  }

  Matrix sums(k, d);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    ++counts[c];
    auto s = sums.row(c);
    auto p = points.row(i);
    for (std::size_t j = 0; j < d; ++j) s[j] += p[j];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    for (std::size_t j = 0; j < d; ++j)
      centroids(c, j) = sums(c, j) / static_cast<double>(counts[c]);
  }
}

inline void check_monotone(double before, double after) {
  if (after > before + 1e-12 * std::max(1.0, before)) {
    throw std::logic_error("k-means inertia increased from " + std::to_string(before) +
                           " to " + std::to_string(after));
  }
}

// Moves single points between clusters while that strictly lowers inertia.
// Stable states are also Lloyd fixed points, so this only escapes local minima.
inline void hartigan(const Matrix& points, Matrix& centroids, std::vector<std::int32_t>& labels,
                     double& inertia) {
  const std::size_t k = centroids.rows(), d = points.cols(), n = points.rows();
  std::vector<double> counts(k, 0.0);
  for (auto l : labels) counts[static_cast<std::size_t>(l)] += 1.0;

  for (std::size_t sweep = 0; sweep < 100 * n; ++sweep) {
    bool moved = false;
    for (std::size_t i = 0; i < n; ++i) {
      const auto a = static_cast<std::size_t>(labels[i]);
      if (counts[a] < 2.0) continue;
      const double remove_gain =
          counts[a] / (counts[a] - 1.0) * squared_distance(points.row(i), centroids.row(a));
      std::size_t best = a;
      double best_delta = 0.0;
      for (std::size_t b = 0; b < k; ++b) {
        if (b == a) continue;
        const double add_cost =
            counts[b] / (counts[b] + 1.0) * squared_distance(points.row(i), centroids.row(b));
        const double delta = add_cost - remove_gain;
        if (delta < best_delta - 1e-12 * std::max(1.0, inertia)) {
          best_delta = delta;
          best = b;
        }
      }
      if (best == a) continue;
      auto p = points.row(i);
      for (std::size_t j = 0; j < d; ++j) {
        centroids(a, j) = (centroids(a, j) * counts[a] - p[j]) / (counts[a] - 1.0);
        centroids(best, j) = (centroids(best, j) * counts[best] + p[j]) / (counts[best] + 1.0);
      }
      counts[a] -= 1.0;
      counts[best] += 1.0;
      labels[i] = static_cast<std::int32_t>(best);
      moved = true;
    }
    if (!moved) break;
  }
  // Exact means after the incremental updates.
  update_centroids(points, centroids, labels);
  const double after = kmeans_inertia(points, centroids, labels);
  check_monotone(inertia, after);
  inertia = after;
}

inline KMeansModel lloyd(const Matrix& points, Matrix init, const KMeansOptions& opt) {
  const std::size_t k = init.rows();
  KMeansModel m;
  m.centroids = std::move(init);
  m.labels = kmeans_assign(m.centroids, points);
  double inertia = kmeans_inertia(points, m.centroids, m.labels);
  int it = 0;
  for (; it < opt.max_iter; ++it) {
    const Matrix previous = m.centroids;
    update_centroids(points, m.centroids, m.labels);
    check_monotone(inertia, kmeans_inertia(points, m.centroids, m.labels));
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c)
      shift = std::max(shift, std::sqrt(squared_distance(previous.row(c), m.centroids.row(c))));
    m.labels = kmeans_assign(m.centroids, points);
    const double next = kmeans_inertia(points, m.centroids, m.labels);
    check_monotone(inertia, next);
    inertia = next;
    if (shift < opt.tol) {
      ++it;
      break;
    }
  }
  // Centroids must be the means of the final labels.
  update_centroids(points, m.centroids, m.labels);
  inertia = kmeans_inertia(points, m.centroids, m.labels);
  if (opt.hartigan_refine) hartigan(points, m.centroids, m.labels, inertia);
  m.inertia = inertia;
  m.iterations_run = it;
  return m;
}

// True when C(n, k) <= limit.
inline bool subsets_at_most(std::size_t n, std::size_t k, std::size_t limit) {
  double c = 1.0;
  for (std::size_t i = 0; i < k; ++i) {
    c = c * static_cast<double>(n - i) / static_cast<double>(i + 1);
    if (c > static_cast<double>(limit)) return false;
  }
  return true;
}

}  // namespace kmeans_detail

/// Fits K centroids to the rows of `points`. Deterministic for a given seed.
inline KMeansModel kmeans_fit(const Matrix& points, std::size_t k, std::uint64_t seed,
                              const KMeansOptions& opt = {}) {
  if (k < 1) throw InvalidArgument("kmeans_fit: K must be >= 1");
  if (points.rows() < k) {
    throw InvalidArgument("kmeans_fit: " + std::to_string(points.rows()) +
                          " points cannot form " + std::to_string(k) + " clusters");
  }
  if (points.cols() == 0) throw InvalidArgument("kmeans_fit: zero-dimensional points");
  if (!all_finite(points.data())) throw InvalidArgument("kmeans_fit: non-finite input");

  Rng rng(seed);
  KMeansModel best;
  bool have = false;
  auto consider = [&](KMeansModel m) {
    if (!have || m.inertia < best.inertia) {
      best = std::move(m);
      have = true;
    }
  };
  for (int r = 0; r < std::max(1, opt.n_init); ++r) {
    Rng run_rng(rng.fork());
    consider(kmeans_detail::lloyd(points, kmeans_detail::plus_plus_init(points, k, run_rng), opt));
  }
  // Tiny problems: also start from every K-subset of the points.
  const std::size_t n = points.rows();
  if (kmeans_detail::subsets_at_most(n, k, opt.exhaustive_seed_limit)) {
    std::vector<std::size_t> pick(k);
    for (std::size_t i = 0; i < k; ++i) pick[i] = i;
    while (true) {
      Matrix init(k, points.cols());
      for (std::size_t c = 0; c < k; ++c)
        std::copy(points.row(pick[c]).begin(), points.row(pick[c]).end(), init.row(c).begin());
      consider(kmeans_detail::lloyd(points, std::move(init), opt));
      std::size_t i = k;
      while (i > 0 && pick[i - 1] == n - k + (i - 1)) --i;
      if (i == 0) break;
      ++pick[i - 1];
      for (std::size_t j = i; j < k; ++j) pick[j] = pick[j - 1] + 1;
    }
  }
  return best;
}

}  // namespace ssr
