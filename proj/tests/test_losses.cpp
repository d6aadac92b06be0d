// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "rass/errors.hpp"
#include "rass/losses.hpp"

using namespace rass;
using namespace rass::losses;

namespace {

torch::TensorOptions f64() { return torch::TensorOptions().dtype(torch::kDouble); }

}  // namespace

TEST(RegionLoss, UniformAttentionQuarterMask) {
  auto A = torch::full({4, 4}, 0.5, f64());
  auto M = torch::zeros({4, 4}, f64());
  M.index_put_({torch::indexing::Slice(0, 2), torch::indexing::Slice(0, 2)}, 1.0);
  EXPECT_NEAR(region_loss(A, M, {}).item<double>(), 0.75, 1e-6);
}

TEST(RegionLoss, ContainmentAndDisjoint) {
  auto M = torch::zeros({6, 6}, f64());
  M.index_put_({torch::indexing::Slice(1, 4), torch::indexing::Slice(2, 5)}, 1.0);
  auto inside = M * torch::rand({6, 6}, f64());
  auto outside = (1 - M) * torch::rand({6, 6}, f64());
  EXPECT_NEAR(region_loss(inside, M, {}).item<double>(), 0.0, 1e-7);
  EXPECT_NEAR(region_loss(outside, M, {}).item<double>(), 1.0, 1e-12);
  // Vanished attention scores the maximum.
  EXPECT_NEAR(region_loss(torch::zeros({6, 6}, f64()), M, {}).item<double>(), 1.0, 1e-12);
}

TEST(RegionLoss, SupersetMaskNeverIncreasesLoss) {
  torch::manual_seed(3);
  for (int i = 0; i < 50; ++i) {
    auto A = torch::rand({8, 8}, f64());
    auto M = (torch::rand({8, 8}, f64()) > 0.6).to(torch::kDouble);
    auto bigger = torch::maximum(M, (torch::rand({8, 8}, f64()) > 0.7).to(torch::kDouble));
    const double a = region_loss(A, M, {}).item<double>(), b = region_loss(A, bigger, {}).item<double>();
    EXPECT_LE(b, a + 1e-15);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(RegionLoss, ShapeMismatchThrows) {
  EXPECT_THROW(region_loss(torch::rand({4, 4}), torch::rand({4, 5}), {}), ValidationError);
}

TEST(PixelLoss, HalfIsLogTwo) {
  auto A = torch::full({5, 7}, 0.5, f64());
  auto M = (torch::rand({5, 7}, f64()) > 0.5).to(torch::kDouble);
  EXPECT_NEAR(pixel_loss(A, M, {}).item<double>(), std::log(2.0), 1e-6);
}

TEST(PixelLoss, PerfectPredictionIsNearZero) {
  auto M = (torch::rand({8, 8}, f64()) > 0.5).to(torch::kDouble);
  const double v = pixel_loss(M.clone(), M, {}).item<double>();
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, -std::log(1.0 - 1e-6) + 1e-9);
}

TEST(PixelLoss, MatchesDirectFormula) {
  torch::manual_seed(1);
  auto A = torch::rand({6, 6}, f64());
  auto M = (torch::rand({6, 6}, f64()) > 0.5).to(torch::kDouble);
  auto a = A.clamp(1e-6, 1 - 1e-6);
  const double expected = -(M * a.log() + (1 - M) * (1 - a).log()).mean().item<double>();
  EXPECT_NEAR(pixel_loss(A, M, {}).item<double>(), expected, 1e-12);
}

TEST(DiceLoss, HandValues) {
  auto g = torch::zeros({4, 4}, f64());
  g.view(-1).narrow(0, 0, 8).fill_(1.0);
  EXPECT_NEAR(dice_loss(torch::zeros({4, 4}, f64()), g).item<double>(), 8.0 / 9.0, 1e-6);
  EXPECT_NEAR(dice_loss(g.clone(), g).item<double>(), 0.0, 1e-12);
}

TEST(RestorationLoss, ZeroAtIdentityAndConstantOffset) {
  PerceptualNet net;
  LossConfig cfg;
  auto x = torch::rand({3, 16, 16}, f64()) * 0.8;
  EXPECT_NEAR(restoration_loss(x, x, cfg, net).item<double>(), 0.0, 1e-12);
  auto terms = restoration_terms(x + 0.1, x, cfg, net);
  EXPECT_NEAR(terms.mse.item<double>(), 0.01, 1e-12);
  EXPECT_GE(terms.total.item<double>(), cfg.lambda_mse * 0.01);
}

TEST(RestorationLoss, PerceptualNetIsSeedDeterministic) {
  PerceptualNet a(11), b(11), c(12);
  auto x = torch::rand({3, 16, 16}), y = torch::rand({3, 16, 16});
  EXPECT_EQ(a.distance(x, y).item<double>(), b.distance(x, y).item<double>());
  EXPECT_NE(a.distance(x, y).item<double>(), c.distance(x, y).item<double>());
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks (float64, h = 1e-4).

class GradCheck : public ::testing::Test {
 protected:
  void SetUp() override { torch::manual_seed(20); }
};

TEST_F(GradCheck, RegionLoss) {
  for (int i = 0; i < 20; ++i) {
    auto A = (torch::rand({5, 5}, f64()) * 0.9 + 0.05).requires_grad_(true);
    auto M = (torch::rand({5, 5}, f64()) > 0.5).to(torch::kDouble);
    EXPECT_LT(oracle::max_fd_error([&](const torch::Tensor& a) { return region_loss(a, M, {}); }, A), 1e-4);
  }
}

TEST_F(GradCheck, PixelLoss) {
  for (int i = 0; i < 20; ++i) {
    auto A = (torch::rand({5, 5}, f64()) * 0.9 + 0.05).requires_grad_(true);
    auto M = (torch::rand({5, 5}, f64()) > 0.5).to(torch::kDouble);
    EXPECT_LT(oracle::max_fd_error([&](const torch::Tensor& a) { return pixel_loss(a, M, {}); }, A), 1e-4);
  }
}

TEST_F(GradCheck, DiceLoss) {
  for (int i = 0; i < 20; ++i) {
    auto p = torch::rand({5, 5}, f64()).requires_grad_(true);
    auto g = (torch::rand({5, 5}, f64()) > 0.5).to(torch::kDouble);
    EXPECT_LT(oracle::max_fd_error([&](const torch::Tensor& q) { return dice_loss(q, g); }, p), 1e-4);
  }
}

TEST_F(GradCheck, RestorationLoss) {
  PerceptualNet net;
  for (int i = 0; i < 20; ++i) {
    auto x = torch::rand({3, 8, 8}, f64()).requires_grad_(true);
    auto y = torch::rand({3, 8, 8}, f64());
    EXPECT_LT(oracle::max_fd_error([&](const torch::Tensor& a) { return restoration_loss(a, y, {}, net); }, x), 1e-4);
  }
}

TEST_F(GradCheck, SegmentationLoss) {
  for (int i = 0; i < 20; ++i) {
    auto cls = torch::randn({2, 4}, f64()).requires_grad_(true);
    auto masks = torch::randn({2, 4, 4}, f64());
    SegTarget gt{{static_cast<int64_t>(i % 3)}, (torch::rand({1, 4, 4}, f64()) > 0.5).to(torch::kDouble)};
    EXPECT_LT(oracle::max_fd_error(
                  [&](const torch::Tensor& c) { return segmentation_loss({c, masks}, gt, {}); }, cls),
              1e-4);
    auto ml = masks.clone().requires_grad_(true);
    EXPECT_LT(oracle::max_fd_error(
                  [&](const torch::Tensor& m) { return segmentation_loss({cls.detach(), m}, gt, {}); }, ml),
              1e-4);
  }
}

// ---------------------------------------------------------------------------
// Semantic-constraint loss

namespace {

backbone::AttentionBundle random_bundle(int64_t tokens, std::vector<int64_t> resolutions) {
  backbone::AttentionBundle b;
  for (std::size_t l = 0; l < resolutions.size(); ++l) {
    const auto r = resolutions[l];
    auto raw = torch::softmax(torch::randn({tokens, r, r}), 0);
    b.layers.push_back({"layer" + std::to_string(l), r, raw, raw / raw.amax({1, 2}, true)});
  }
  return b;
}

}  // namespace

TEST(SclLoss, NoPairsIsZero) {
  auto b = random_bundle(3, {8});
  EXPECT_EQ(scl_loss(b, {}, {}).item<double>(), 0.0);
}

TEST(SclLoss, SinglePairSingleLayerCollapses) {
  torch::manual_seed(5);
  LossConfig cfg;
  auto b = random_bundle(2, {8});
  auto mask = (torch::rand({8, 8}) > 0.5).to(torch::kFloat);
  const double expected = cfg.lambda_region * region_loss(b.layers[0].maps[1], mask, cfg).item<double>() +
                          cfg.lambda_pixel * pixel_loss(b.layers[0].maps[1], mask, cfg).item<double>();
  EXPECT_NEAR(scl_loss(b, {{"t", 1, mask}}, cfg).item<double>(), expected, 1e-9);
}

TEST(SclLoss, TwoIdenticalLayersEqualOne) {
  torch::manual_seed(6);
  auto one = random_bundle(3, {8});
  auto two = one;
  two.layers.push_back(one.layers[0]);
  auto mask = (torch::rand({8, 8}) > 0.5).to(torch::kFloat);
  std::vector<MatchedPair> pairs{{"a", 0, mask}, {"b", 2, 1 - mask}};
  EXPECT_NEAR(scl_loss(one, pairs, {}).item<double>(), scl_loss(two, pairs, {}).item<double>(), 1e-12);
}

TEST(SclLoss, MasksAreResampledPerLayer) {
  torch::manual_seed(7);
  auto b = random_bundle(2, {4, 8, 16});
  auto mask = (torch::rand({64, 64}) > 0.5).to(torch::kFloat);
  const auto v = scl_loss(b, {{"a", 0, mask}}, {}).item<double>();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GT(v, 0.0);
}

TEST(SclLoss, ScrTotalIsAdditive) {
  torch::manual_seed(8);
  PerceptualNet net;
  LossConfig cfg;
  auto b = random_bundle(2, {8, 4});
  auto x = torch::rand({3, 16, 16}), y = torch::rand({3, 16, 16});
  auto mask = (torch::rand({16, 16}) > 0.5).to(torch::kFloat);
  std::vector<MatchedPair> pairs{{"a", 1, mask}};
  const double total = scr_total_loss(x, y, b, pairs, cfg, net).item<double>();
  EXPECT_NEAR(total, restoration_loss(x, y, cfg, net).item<double>() + scl_loss(b, pairs, cfg).item<double>(), 1e-6);
  EXPECT_NEAR(scr_total_loss(x, y, b, {}, cfg, net).item<double>(), restoration_loss(x, y, cfg, net).item<double>(),
              1e-7);
  EXPECT_NEAR(scr_total_loss(x, x, b, {}, cfg, net).item<double>(), 0.0, 1e-9);
}

TEST(SclLoss, UnmatchedTagLeavesLossBitIdentical) {
  torch::manual_seed(9);
  for (int i = 0; i < 50; ++i) {
    auto b = random_bundle(3, {8, 4});
    auto mask = (torch::rand({32, 32}) > 0.5).to(torch::kFloat);
    std::vector<MatchedPair> pairs{{"a", 0, mask}, {"c", 2, 1 - mask}};
    const auto before = scl_loss(b, pairs, {});
    // The same image with one extra, mask-less tag: a new token row that
    // produces no pair.
    auto with_extra = b;
    for (auto& l : with_extra.layers) {
      l.maps = torch::cat({l.maps, torch::rand({1, l.maps.size(1), l.maps.size(2)})});
      l.raw = torch::cat({l.raw, torch::rand({1, l.raw.size(1), l.raw.size(2)})});
    }
    const auto after = scl_loss(with_extra, pairs, {});
    EXPECT_TRUE(torch::equal(before, after));
  }
}

TEST(SclLoss, BatchedMatchesPerImage) {
  torch::manual_seed(10);
  const int64_t B = 3, T = 4, H = 16;
  std::vector<backbone::AttentionLayer> layers;
  for (int64_t r : {8, 4}) {
    auto raw = torch::softmax(torch::randn({B, T, r, r}), 1);
    layers.push_back({"l" + std::to_string(r), r, raw, raw / raw.amax({2, 3}, true)});
  }
  auto masks = (torch::rand({B, T, H, H}) > 0.5).to(torch::kFloat);
  auto matched = torch::tensor({1, 0, 1, 0, 0, 0, 0, 0, 1, 1, 1, 0}, torch::kBool).view({B, T});
  const double batched = scl_loss_batched(layers, masks, matched, {}).item<double>();
  double sum = 0.0;
  int n = 0;
  for (int64_t b = 0; b < B; ++b) {
    std::vector<MatchedPair> pairs;
    for (int64_t t = 0; t < T; ++t) {
      if (matched[b][t].item<bool>()) pairs.push_back({"x", t, masks[b][t]});
    }
    if (pairs.empty()) continue;
    sum += scl_loss(backbone::slice_attention(layers, b, T), pairs, {}).item<double>();
    ++n;
  }
  EXPECT_NEAR(batched, sum / n, 1e-9);
}

// ---------------------------------------------------------------------------
// Matching

TEST(Hungarian, EmptyTargetGivesEmptyAssignment) {
  SegPrediction p{torch::randn({3, 4}), torch::randn({3, 4, 4})};
  SegTarget g{{}, torch::zeros({0, 4, 4})};
  EXPECT_TRUE(hungarian_match(p, g, {}).empty());
}

TEST(Hungarian, TooManyTargetsThrows) {
  SegPrediction p{torch::randn({2, 4}), torch::randn({2, 4, 4})};
  SegTarget g{{0, 1, 2}, torch::ones({3, 4, 4})};
  EXPECT_THROW(hungarian_match(p, g, {}), ValidationError);
}

TEST(Hungarian, DiagonalDominantIsIdentity) {
  std::vector<std::vector<double>> cost = {{0.0, 5.0, 5.0}, {5.0, 0.0, 5.0}, {5.0, 5.0, 0.0}};
  EXPECT_EQ(linear_assignment(cost), (std::vector<int64_t>{0, 1, 2}));
}

TEST(Hungarian, MatchesBruteForceOnRandomPredictions) {
  torch::manual_seed(12);
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t Q = 1 + static_cast<int64_t>(rng() % 6);
    const int64_t G = 1 + static_cast<int64_t>(rng() % Q);
    SegPrediction p{torch::randn({Q, 5}), torch::randn({Q, 6, 6}) * 2};
    SegTarget g;
    for (int64_t i = 0; i < G; ++i) g.classes.push_back(static_cast<int64_t>(rng() % 4));
    g.masks = (torch::rand({G, 6, 6}) > 0.5).to(torch::kFloat);
    const auto cost = matching_cost(p, g, {});
    const auto assignment = hungarian_match(p, g, {});
    ASSERT_EQ(static_cast<int64_t>(assignment.size()), G);
    double got = 0.0;
    for (const auto& [q, gi] : assignment) got += cost[gi][q];
    EXPECT_EQ(got, oracle::brute_force_assignment(cost)) << "trial " << trial;
  }
}

TEST(Hungarian, LinearAssignmentMatchesBruteForce) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int cols = 1 + static_cast<int>(rng() % 6);
    const int rows = 1 + static_cast<int>(rng() % cols);
    std::vector<std::vector<double>> cost(rows, std::vector<double>(cols));
    for (auto& r : cost) {
      for (auto& v : r) v = u(rng);
    }
    const auto a = linear_assignment(cost);
    double got = 0.0;
    for (int r = 0; r < rows; ++r) got += cost[r][a[r]];
    EXPECT_EQ(got, oracle::brute_force_assignment(cost));
  }
}

TEST(Hungarian, TiesResolveToLowestIndices) {
  std::vector<std::vector<double>> cost(2, std::vector<double>(3, 1.0));
  EXPECT_EQ(linear_assignment(cost), (std::vector<int64_t>{0, 1}));
}

TEST(Hungarian, CostMatchesDefinition) {
  torch::manual_seed(14);
  LossConfig cfg;
  SegPrediction p{torch::randn({3, 4}), torch::randn({3, 5, 5})};
  SegTarget g{{2}, (torch::rand({1, 5, 5}) > 0.5).to(torch::kFloat)};
  const auto cost = matching_cost(p, g, cfg);
  for (int64_t q = 0; q < 3; ++q) {
    auto prob = torch::softmax(p.class_logits[q].to(torch::kDouble), 0)[2].item<double>();
    auto s = torch::sigmoid(p.mask_logits[q].to(torch::kDouble));
    auto m = g.masks[0].to(torch::kDouble);
    const double bce = torch::binary_cross_entropy(s, m).item<double>();
    const double dice = 1.0 - (2 * (s * m).sum().item<double>() + 1) / (s.sum().item<double>() + m.sum().item<double>() + 1);
    EXPECT_NEAR(cost[0][q], -cfg.lambda_cls * prob + cfg.lambda_ce * bce + cfg.lambda_dice * dice, 1e-9);
  }
}

// ---------------------------------------------------------------------------
// Segmentation loss

TEST(SegmentationLoss, SaturatedPerfectPredictionIsSmall) {
  const int64_t C = 3;
  auto masks = torch::zeros({2, 8, 8});
  masks[0].narrow(0, 0, 4).fill_(1);
  masks[1].narrow(0, 4, 4).fill_(1);
  SegTarget g{{0, 2}, masks};
  auto cls = torch::full({4, C + 1}, -30.0);
  cls[0][0] = 30;
  cls[1][2] = 30;
  cls[2][C] = 30;
  cls[3][C] = 30;
  auto ml = (masks * 2 - 1) * 30;
  auto mask_logits = torch::cat({ml, torch::full({2, 8, 8}, -30.0)});
  EXPECT_LT(segmentation_loss({cls, mask_logits}, g, {}).item<double>(), 0.01);
}

TEST(SegmentationLoss, EmptyTargetLeavesOnlyNoObjectTerm) {
  torch::manual_seed(15);
  LossConfig cfg;
  SegPrediction p{torch::randn({3, 4}), torch::randn({3, 4, 4})};
  SegTarget g{{}, torch::zeros({0, 4, 4})};
  const auto target = torch::full({3}, 3, torch::kInt64);
  const double expected =
      cfg.lambda_cls_unmatched *
        torch::nn::functional::cross_entropy(
            p.class_logits, target, torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kSum))
            .item<double>();
  EXPECT_NEAR(segmentation_loss(p, g, cfg).item<double>(), expected, 1e-6);
}

TEST(SegmentationLoss, NonNegativeAndFinite) {
  torch::manual_seed(16);
  for (int i = 0; i < 20; ++i) {
    SegPrediction p{torch::randn({4, 5}) * 5, torch::randn({4, 6, 6}) * 5};
    SegTarget g{{1, 3}, (torch::rand({2, 6, 6}) > 0.5).to(torch::kFloat)};
    const double v = segmentation_loss(p, g, {}).item<double>();
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
  }
}

TEST(LossConfig, ValidationNamesField) {
  LossConfig cfg;
  cfg.lambda_region = -1;
  try {
    cfg.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "loss.lambda_region");
  }
  cfg = {};
  cfg.bce_clamp_eps = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
