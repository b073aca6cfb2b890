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
#include <cstring>
#include <filesystem>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "ssr/cmpa.hpp"
#include "ssr/fixture.hpp"
#include "test_util.hpp"

namespace ssr {
namespace {

using testing::GradReport;

Matrix make(std::size_t r, std::size_t c, std::initializer_list<double> v) {
  Matrix m(r, c);
  std::copy(v.begin(), v.end(), m.data().begin());
  return m;
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------
// Gradients

void expect_small(const GradReport& r) {
  for (const auto& [name, err] : r.worst) EXPECT_LT(err, 1e-4) << name;
}

TEST(Gradients, ProtoLoss) {
  GradReport r;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    testing::check_proto_loss(rng, r);
  }
  expect_small(r);
}

TEST(Gradients, SegLoss) {
  GradReport r;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    testing::check_seg_loss(rng, r);
  }
  expect_small(r);
}

TEST(Gradients, HeadTrainMode) {
  GradReport r;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    testing::check_head(rng, Mode::train, r);
  }
  expect_small(r);
}

TEST(Gradients, HeadEvalMode) {
  GradReport r;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    testing::check_head(rng, Mode::eval, r);
  }
  expect_small(r);
}

TEST(Gradients, MaskedAveragePool) {
  GradReport r;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    testing::check_pool(rng, r);
  }
  expect_small(r);
}

TEST(Gradients, LogTemperature) {
  GradReport r;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    testing::check_log_tau(rng, r);
  }
  expect_small(r);
}

TEST(Gradients, FullObjective) {
  GradReport r;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    testing::check_objective(rng, r);
  }
  expect_small(r);
}

// ---------------------------------------------------------------------------
// Loss identities

TEST(Losses, UniformLogitsGiveLogK) {
  for (std::size_t k = 1; k <= 8; ++k) {
    Matrix logits(3, k);
    for (auto& x : logits.data()) x = 0.7;
    const std::vector<std::int32_t> pos{0, static_cast<std::int32_t>(k - 1), 0};
    EXPECT_NEAR(proto_loss(logits, pos).loss, std::log(static_cast<double>(k)), 1e-12);
  }
}

TEST(Losses, SinglePrototypeGivesZero) {
  const auto r = proto_loss(make(2, 1, {3.0, -1.0}), std::vector<std::int32_t>{0, 0});
  EXPECT_EQ(r.loss, 0.0);
  for (double g : r.grad.data()) EXPECT_EQ(g, 0.0);
}

TEST(Losses, HandComputedCrossEntropy) {
  const auto r = proto_loss(make(1, 3, {2, 0, 0}), std::vector<std::int32_t>{0});
  EXPECT_NEAR(r.loss, std::log(1.0 + 2.0 * std::exp(-2.0)), 1e-15);
  EXPECT_NEAR(r.loss, 0.2395, 1e-4);
}

TEST(Losses, LargeMarginIsNearlyFree) {
  const auto r = proto_loss(make(1, 5, {20, 0, 0, 0, 0}), std::vector<std::int32_t>{0});
  EXPECT_LT(r.loss, 1e-3);
  EXPECT_GE(r.loss, 0.0);
}

TEST(Losses, StableForHugeLogits) {
  const auto r = proto_loss(make(1, 2, {1e4, -1e4}), std::vector<std::int32_t>{1});
  EXPECT_NEAR(r.loss, 2e4, 1e-6);
}

TEST(Losses, UniformSegLogitsGiveLogClasses) {
  for (std::size_t c : {2u, 5u, 21u}) {
    Matrix logits(c, 6);
    for (auto& x : logits.data()) x = -1.5;
    const std::vector<std::int32_t> mask{0, 1, kIgnoreLabel, 1, 0, 0};
    EXPECT_NEAR(seg_loss(logits, mask).loss, std::log(static_cast<double>(c)), 1e-12);
  }
}

TEST(Losses, SegLossIgnoresEverythingGivesZero) {
  const auto r = seg_loss(Matrix(3, 2), std::vector<std::int32_t>{kIgnoreLabel, kIgnoreLabel});
  EXPECT_EQ(r.loss, 0.0);
}

TEST(Losses, RejectsOutOfRangeLabels) {
  EXPECT_THROW(seg_loss(Matrix(3, 1), std::vector<std::int32_t>{3}), InvalidArgument);
  EXPECT_THROW(proto_loss(Matrix(1, 3), std::vector<std::int32_t>{3}), InvalidArgument);
  EXPECT_THROW(proto_loss(Matrix(2, 3), std::vector<std::int32_t>{0}), InvalidArgument);
}

TEST(Losses, TotalCombinesWithGamma) {
  EXPECT_EQ(total_loss(1.0, 2.0, 0.1), 1.2);
  EXPECT_EQ(total_loss(0.5, 3.0, 0.0), 0.5);
}

// ---------------------------------------------------------------------------
// Prototype logits, pseudo-labels and pooling

TEST(Prototypes, LogitsDivideCosineByTemperature) {
  const Matrix l = prototype_logits(make(1, 2, {1, 0}), make(1, 2, {1, 0}), 0.05);
  EXPECT_NEAR(l(0, 0), 20.0, 1e-12);
  EXPECT_THROW(prototype_logits(make(1, 2, {1, 0}), make(1, 2, {1, 0}), 0.0), InvalidArgument);
}

TEST(Prototypes, PseudoLabelsTakeNearestWithLowestIndexOnTies) {
  const Matrix protos = make(3, 2, {1, 0, 0, 1, 0, 1});
  const auto l = pseudo_labels(make(3, 2, {0.9, 0.1, 0.1, 0.9, std::sqrt(0.5), std::sqrt(0.5)}), protos);
  EXPECT_EQ(l, (std::vector<std::int32_t>{0, 1, 0}));
}

TEST(Prototypes, PseudoLabelsIgnorePositiveRescaling) {
  Rng rng(9);
  const Matrix protos = l2_normalize_rows(testing::random_matrix(rng, 4, 6));
  const Matrix f = testing::random_matrix(rng, 10, 6);
  Matrix scaled = f;
  for (std::size_t i = 0; i < f.rows(); ++i)
    for (auto& x : scaled.row(i)) x *= 0.1 + static_cast<double>(i);
  EXPECT_EQ(pseudo_labels(f, protos), pseudo_labels(scaled, protos));
}

TEST(Pooling, WeightsRowsByCamAndNormalises) {
  const auto f = masked_average_pool(std::vector<double>{1.0, 0.0, 3.0},
                                     make(3, 2, {1, 0, 5, 5, 0, 1}));
  // (1*[1,0] + 3*[0,1]) / 4 normalised.
  EXPECT_NEAR(f[0], 1.0 / std::sqrt(10.0), 1e-15);
  EXPECT_NEAR(f[1], 3.0 / std::sqrt(10.0), 1e-15);
}

TEST(Pooling, ZeroCamGivesZeroVector) {
  const auto f = masked_average_pool(std::vector<double>{0.0, 0.0}, make(2, 2, {1, 2, 3, 4}));
  EXPECT_EQ(f[0], 0.0);
  EXPECT_EQ(f[1], 0.0);
}

// ---------------------------------------------------------------------------
// Projection heads

ProjectionHead identity_head(std::size_t d) {
  ProjectionHead h;
  for (int l = 0; l < 2; ++l) {
    DenseLayer layer;
    layer.weight = Matrix(d, d);
    for (std::size_t i = 0; i < d; ++i) layer.weight(i, i) = 1.0;
    layer.bias.assign(d, 0.0);
    if (l == 0) layer.norm = BatchNorm{std::vector<double>(d, 1.0), std::vector<double>(d, 0.0),
                                       std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)};
    h.layers.push_back(std::move(layer));
  }
  return h;
}

TEST(Heads, IdentityHeadNormalisesPositiveInput) {
  const Matrix x = make(2, 3, {1, 2, 2, 3, 0, 4});
  const Matrix o = project(identity_head(3), x, Mode::eval);
  EXPECT_NEAR(o(0, 0), 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(o(0, 2), 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(o(1, 0), 0.6, 1e-12);
  EXPECT_NEAR(o(1, 1), 0.0, 1e-12);
}

TEST(Heads, OutputsHaveUnitNorm) {
  Rng rng(10);
  const auto head = testing::random_head(rng, 12);
  const Matrix o = project(head, testing::random_matrix(rng, 7, 12), Mode::train);
  for (std::size_t i = 0; i < o.rows(); ++i) EXPECT_NEAR(std::sqrt(dot(o.row(i), o.row(i))), 1.0, 1e-12);
}

TEST(Heads, DuplicateRowsProjectIdentically) {
  Rng rng(11);
  const auto head = testing::random_head(rng, 8);
  Matrix x = testing::random_matrix(rng, 5, 8);
  std::copy(x.row(1).begin(), x.row(1).end(), x.row(3).begin());
  for (Mode mode : {Mode::train, Mode::eval}) {
    const Matrix o = project(head, x, mode);
    EXPECT_TRUE(same_bits(o.row(1), o.row(3)));
  }
}

TEST(Heads, RowPermutationPermutesOutputs) {
  Rng rng(12);
  const auto head = testing::random_head(rng, 10);
  const Matrix x = testing::random_matrix(rng, 6, 10);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Matrix xp(6, 10);
  for (std::size_t i = 0; i < 6; ++i) std::copy(x.row(perm[i]).begin(), x.row(perm[i]).end(), xp.row(i).begin());
  for (Mode mode : {Mode::train, Mode::eval}) {
    const Matrix o = project(head, x, mode), op = project(head, xp, mode);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < o.cols(); ++j) EXPECT_NEAR(op(i, j), o(perm[i], j), 1e-12);
  }
}

TEST(Heads, TrainModeNeedsTwoRows) {
  Rng rng(13);
  const auto head = testing::random_head(rng, 4);
  EXPECT_THROW(project(head, Matrix(1, 4), Mode::train), InvalidArgument);
  EXPECT_NO_THROW(project(head, Matrix(1, 4), Mode::eval));
  EXPECT_THROW(project(head, Matrix(2, 5), Mode::eval), InvalidArgument);
}

TEST(Heads, RunningStatsUseMomentumAndUnbiasedVariance) {
  ProjectionHead head = identity_head(1);
  const auto fwd = project_forward(head, make(2, 1, {1.0, 3.0}), Mode::train);
  update_running_stats(head, fwd);
  const auto& bn = *head.layers[0].norm;
  EXPECT_NEAR(bn.running_mean[0], 0.1 * 2.0, 1e-15);
  EXPECT_NEAR(bn.running_var[0], 0.9 * 1.0 + 0.1 * 2.0, 1e-15);
}

// ---------------------------------------------------------------------------
// Prototype banks

TEST(Banks, HungarianMatchesBruteForce) {
  Rng rng(14);
  for (int t = 0; t < 200; ++t) {
    const auto n = static_cast<std::size_t>(1 + rng.below(6));
    const Matrix s = testing::random_matrix(rng, n, n);
    const auto match = hungarian_max(s);
    double got = 0.0;
    for (std::size_t i = 0; i < n; ++i) got += s(i, match[i]);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = -1e300;
    do {
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) v += s(i, perm[i]);
      best = std::max(best, v);
    } while (std::next_permutation(perm.begin(), perm.end()));
    EXPECT_NEAR(got, best, 1e-12);
    auto sorted = match;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(sorted[i], i);
  }
}

TEST(Banks, SinglePrototypeIsTheNormalisedMean) {
  const Matrix img = make(2, 2, {1, 0, 0, 1});
  const Matrix txt = make(2, 2, {2, 0, 2, 2});
  const auto bank = refresh_prototypes(img, txt, std::vector<int>{0, 1}, 1, 0);
  EXPECT_NEAR(bank.image(0, 0), std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(bank.image(0, 1), std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(bank.text(0, 0), 2.0 / std::sqrt(5.0), 1e-12);
}

TEST(Banks, SeparatedClassesAlignTextWithImage) {
  // Image features near e0 / e1 by class, text features near e2 / e3.
  Rng rng(15);
  const std::size_t p = 20;
  Matrix img(p, 4), txt(p, 4);
  std::vector<int> cls(p);
  for (std::size_t i = 0; i < p; ++i) {
    cls[i] = static_cast<int>(i % 2);
    for (std::size_t j = 0; j < 4; ++j) {
      img(i, j) = 0.02 * rng.normal();
      txt(i, j) = 0.02 * rng.normal();
    }
    img(i, static_cast<std::size_t>(cls[i])) += 1.0;
    txt(i, 2 + static_cast<std::size_t>(cls[i])) += 1.0;
  }
  const auto bank = refresh_prototypes(img, txt, cls, 2, 3);
  EXPECT_TRUE(bank.matched_by_vote);
  for (std::size_t k = 0; k < 2; ++k) {
    const std::size_t c = bank.image(k, 0) > bank.image(k, 1) ? 0 : 1;
    EXPECT_GT(bank.image(k, c), 0.99);
    EXPECT_GT(bank.text(k, 2 + c), 0.99);
  }
}

TEST(Banks, RejectsTooFewPairs) {
  EXPECT_THROW(refresh_prototypes(Matrix(1, 2), Matrix(1, 2), std::vector<int>{0}, 2, 0),
               InvalidArgument);
}

// ---------------------------------------------------------------------------
// Optimiser and training

TEST(Optimizer, ZeroGradientOnlyDecaysWeights) {
  AlignmentConfig cfg;
  cfg.lr = 1e-2;
  cfg.weight_decay = 0.5;
  AlignmentState s = init_alignment(8, 2, cfg);
  for (auto& x : s.probe.weight.data()) x = 1.0;
  AlignmentState before = s;
  Gradients g;
  g.isa = HeadGrad::zeros_like(s.isa);
  g.tsa = HeadGrad::zeros_like(s.tsa);
  g.probe_weight = Matrix(s.probe.weight.rows(), s.probe.weight.cols());
  g.probe_bias.assign(s.probe.bias.size(), 0.0);
  adamw_update(s, g, cfg);
  auto after_slots = parameter_slots(s);
  auto before_slots = parameter_slots(before);
  for (std::size_t k = 0; k < after_slots.size(); ++k) {
    const double factor = after_slots[k].decay ? 1.0 - cfg.lr * cfg.weight_decay : 1.0;
    for (std::size_t i = 0; i < after_slots[k].values.size(); ++i)
      EXPECT_EQ(after_slots[k].values[i], before_slots[k].values[i] * factor) << after_slots[k].name;
  }
  EXPECT_EQ(s.log_tau, before.log_tau);
}

TEST(Optimizer, FirstStepMovesEachWeightByLearningRate) {
  AlignmentConfig cfg;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.0;
  AlignmentState s = init_alignment(8, 2, cfg);
  const double before = s.log_tau;
  Gradients g;
  g.isa = HeadGrad::zeros_like(s.isa);
  g.tsa = HeadGrad::zeros_like(s.tsa);
  g.probe_weight = Matrix(s.probe.weight.rows(), s.probe.weight.cols());
  g.probe_bias.assign(s.probe.bias.size(), 0.0);
  g.log_tau = 0.37;
  adamw_update(s, g, cfg);
  // Bias-corrected m/sqrt(v) is sign(g) on the first step.
  EXPECT_NEAR(s.log_tau, before - 1e-3, 1e-10);
}

std::vector<FeatureBundle> small_dataset(const std::string& tag) {
  FixtureConfig fc;
  fc.num_images = 6;
  fc.image_size = 48;
  fc.num_classes = 3;
  fc.feat_dim = 32;
  const auto m = write_fixture(fc, testing::scratch_dir(tag));
  return load_all_bundles(m);
}

TEST(Training, DeterministicForASeed) {
  const auto data = small_dataset("cmpa_det");
  AlignmentConfig cfg;
  cfg.lr = 1e-3;
  cfg.batch_images = 3;
  cfg.refresh_interval = 7;
  auto a = train_align(data, 3, cfg, 15);
  auto b = train_align(data, 3, cfg, 15);
  auto pa = parameter_slots(a), pb = parameter_slots(b);
  for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_TRUE(same_bits(pa[k].values, pb[k].values)) << pa[k].name;
  EXPECT_TRUE(same_bits(a.bank.image.data(), b.bank.image.data()));
  EXPECT_EQ(a.iteration, 15);
  EXPECT_EQ(a.bank.last_refresh_iter, 14);
}

TEST(Training, ReducesPrototypeLoss) {
  const auto data = small_dataset("cmpa_loss");
  AlignmentConfig cfg;
  cfg.lr = 1e-3;
  cfg.batch_images = 3;
  TrainHistory h;
  train_align(data, 3, cfg, 40, &h);
  EXPECT_LT(h.final_eval.proto, h.initial_eval.proto);
  EXPECT_EQ(h.steps.size(), 40u);
}

TEST(Training, NonFiniteLossRaisesNumericErrorWithNorms) {
  const auto data = small_dataset("cmpa_nan");
  AlignmentConfig cfg;
  AlignmentState s = init_alignment(32, 3, cfg);
  refresh_bank(s, data, 3);
  s.log_tau = std::numeric_limits<double>::quiet_NaN();
  const FeatureBundle* batch[] = {&data[0], &data[1]};
  try {
    train_step(s, batch, data, cfg, 3);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("isa.0.weight="), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripsEveryTensor) {
  const auto data = small_dataset("cmpa_ckpt");
  AlignmentConfig cfg;
  cfg.lr = 1e-3;
  cfg.batch_images = 2;
  auto s = train_align(data, 3, cfg, 5);
  const auto dir = testing::scratch_dir("cmpa_ckpt_out");
  save_checkpoint(s, cfg, dir);
  auto r = load_checkpoint(dir);
  auto ps = parameter_slots(s), pr = parameter_slots(r);
  ASSERT_EQ(ps.size(), pr.size());
  for (std::size_t k = 0; k < ps.size(); ++k) {
    EXPECT_EQ(ps[k].name, pr[k].name);
    EXPECT_TRUE(same_bits(ps[k].values, pr[k].values)) << ps[k].name;
  }
  EXPECT_TRUE(same_bits(s.bank.text.data(), r.bank.text.data()));
  EXPECT_EQ(r.iteration, s.iteration);
  EXPECT_EQ(r.isa.layers[0].norm->running_var, s.isa.layers[0].norm->running_var);
  EXPECT_THROW(load_checkpoint(dir / "missing"), IoError);
}

}  // namespace
}  // namespace ssr
