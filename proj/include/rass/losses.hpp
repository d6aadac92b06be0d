// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rass/backbone.hpp"

namespace rass::losses {

struct LossConfig {
  double lambda_mse = 1.0;
  double lambda_lpips = 2.0;
  double lambda_region = 1e-3;
  double lambda_pixel = 5e-5;
  double lambda_ce = 5.0;
  double lambda_dice = 5.0;
  double lambda_cls = 2.0;
  double lambda_cls_unmatched = 0.1;
  double bce_clamp_eps = 1e-6;
  double region_denominator_eps = 1e-8;
  std::uint64_t perceptual_seed = 0x5eed;

  /// Throws ConfigError naming the offending `loss.*` field.
  void validate() const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

/// Frozen random-feature perceptual distance.
///
/// Three 3×3 conv stages (stride 1, 2, 2) with GELU activations. Weights are
/// drawn from a std::mt19937_64 seeded by the constructor, so the distance is
/// identical across runs and independent of the torch RNG. Features are unit
/// normalized over channels before the squared difference, as in LPIPS.
class PerceptualNet {
 public:
  explicit PerceptualNet(std::uint64_t seed = 0x5eed);

  std::vector<torch::Tensor> features(const torch::Tensor& x) const;
  /// Mean over layers of the mean squared difference of normalized features.
  /// Accepts 3×H×W or N×3×H×W; returns a scalar.
  torch::Tensor distance(const torch::Tensor& a, const torch::Tensor& b) const;

 private:
  std::vector<torch::Tensor> weights_;
  std::vector<torch::Tensor> biases_;
};

struct RestorationTerms {
  torch::Tensor mse;
  torch::Tensor perceptual;
  torch::Tensor total;
};

RestorationTerms restoration_terms(const torch::Tensor& pred, const torch::Tensor& target, const LossConfig& cfg,
                                   const PerceptualNet& net);
torch::Tensor restoration_loss(const torch::Tensor& pred, const torch::Tensor& target, const LossConfig& cfg,
                               const PerceptualNet& net);

/// 1 − ΣA·M / (ΣA + eps) over the trailing two dimensions. Leading
/// dimensions are kept, so a P×H×W stack yields P values.
torch::Tensor region_loss(const torch::Tensor& A, const torch::Tensor& M, const LossConfig& cfg);
/// Mean binary cross-entropy of A (clamped) against M over the trailing two
/// dimensions.
torch::Tensor pixel_loss(const torch::Tensor& A, const torch::Tensor& M, const LossConfig& cfg);

/// A tag token with a ground-truth mask to align its attention maps with.
struct MatchedPair {
  std::string tag;
  int64_t token = 0;   // row in the attention bundle
  torch::Tensor mask;  // H × W binary, float
};

/// Nearest-neighbour (pixel-centre) resample of a binary mask, H×W or
/// N×H×W, to h×w.
torch::Tensor resample_mask(const torch::Tensor& mask, int64_t h, int64_t w);

/// Semantic-constraint loss for one image: mean over layers of the mean over
/// pairs of λ_region·region + λ_pixel·pixel. Zero (with a warning) when no
/// pairs are given.
torch::Tensor scl_loss(const backbone::AttentionBundle& bundle, const std::vector<MatchedPair>& pairs,
                       const LossConfig& cfg);

/// Batched form used in training. `masks` is B×T×H×W (token-aligned, full
/// resolution) and `matched` B×T marks tokens with a mask. Each image is
/// averaged over its matched tokens, images without any are skipped, and the
/// result is averaged over images and layers.
torch::Tensor scl_loss_batched(const std::vector<backbone::AttentionLayer>& layers, const torch::Tensor& masks,
                               const torch::Tensor& matched, const LossConfig& cfg);

torch::Tensor scr_total_loss(const torch::Tensor& pred, const torch::Tensor& target,
                             const backbone::AttentionBundle& bundle, const std::vector<MatchedPair>& pairs,
                             const LossConfig& cfg, const PerceptualNet& net);

/// Soft Dice loss with smoothing `s`, over the trailing two dimensions.
torch::Tensor dice_loss(const torch::Tensor& p, const torch::Tensor& g, double smooth = 1.0);

/// Per-image output of the mask-classification head.
struct SegPrediction {
  torch::Tensor class_logits;  // N_q × (C+1), last index = no-object
  torch::Tensor mask_logits;   // N_q × H_s × W_s
};

/// Ground-truth segments of one image.
struct SegTarget {
  std::vector<int64_t> classes;
  torch::Tensor masks;  // G × H_s × W_s binary, float
};

/// Minimum-cost assignment of rows to distinct columns (rows ≤ cols).
/// Returns the column of each row. Ties resolve to the first minimum found
/// scanning rows then columns in increasing order.
std::vector<int64_t> linear_assignment(const std::vector<std::vector<double>>& cost);

/// Matching cost between every ground-truth segment (rows) and query (cols).
std::vector<std::vector<double>> matching_cost(const SegPrediction& pred, const SegTarget& gt, const LossConfig& cfg);

/// (query, gt) pairs, ordered by gt index.
std::vector<std::pair<int64_t, int64_t>> hungarian_match(const SegPrediction& pred, const SegTarget& gt,
                                                         const LossConfig& cfg);

struct SegLossTerms {
  torch::Tensor total;
  std::vector<std::pair<int64_t, int64_t>> assignment;
};

SegLossTerms segmentation_terms(const SegPrediction& pred, const SegTarget& gt, const LossConfig& cfg);
torch::Tensor segmentation_loss(const SegPrediction& pred, const SegTarget& gt, const LossConfig& cfg);

}  // namespace rass::losses
