// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

namespace rass::degrade {

enum class StageKind { Blur, Resize, Noise, Jpeg };
enum class Interp { Nearest, Bilinear, Bicubic };

/// Parameters of one degradation stage; only the fields of `kind` are used.
///
/// Intermediate resizes scale the current image by `scale`. The closing
/// stage (`final_resize`) instead maps to the target size, HQ size divided
/// by the dataset scale, and stores that ratio in `scale`.
struct StageParams {
  StageKind kind = StageKind::Blur;
  double sigma = 0.0;  // blur kernel σ (pixels) or noise σ (intensity units)
  double scale = 1.0;
  Interp interp = Interp::Bilinear;
  int quality = 95;
  bool final_resize = false;

  bool operator==(const StageParams&) const = default;
};

struct DegradationRecipe {
  std::vector<StageParams> stages;
  std::uint64_t seed = 0;  // drives the noise stages

  bool operator==(const DegradationRecipe&) const = default;
};

void to_json(nlohmann::json& j, const StageParams& s);
void from_json(const nlohmann::json& j, StageParams& s);
void to_json(nlohmann::json& j, const DegradationRecipe& r);
void from_json(const nlohmann::json& j, DegradationRecipe& r);

struct Range {
  double min = 0.0;
  double max = 0.0;
};

/// Sampling ranges for each stage. Defaults follow a second-order pipeline:
/// two rounds of blur → resize → noise → JPEG, then a final resize.
struct DegradeConfig {
  Range blur_sigma{0.2, 3.0};
  Range resize_scale{0.5, 1.5};
  Range noise_sigma{1.0 / 255.0, 25.0 / 255.0};
  Range jpeg_quality{30, 95};
  int rounds = 2;
  int scale = 2;  // HQ size / LQ size

  void validate() const;
};

void to_json(nlohmann::json& j, const DegradeConfig& c);
void from_json(const nlohmann::json& j, DegradeConfig& c);

/// Draws a recipe of `rounds * 4 + 1` stages. Consumes `rng` deterministically.
DegradationRecipe sample_recipe(const DegradeConfig& config, std::mt19937_64& rng);

/// A recipe with every stage fixed to the given values, for fixtures.
DegradationRecipe fixed_recipe(int rounds, double blur_sigma, double resize_scale, double noise_sigma,
                               int jpeg_quality, int scale, std::uint64_t seed = 0);

/// Replays a recipe on a 3×H×W float image in [0,1]. The result is
/// 3×(H/scale)×(W/scale), clipped to [0,1] and quantized to 8-bit levels
/// (LQ images are stored as 8-bit files). Pure: the same inputs produce the
/// same bytes.
torch::Tensor apply_recipe(const torch::Tensor& hq, const DegradationRecipe& recipe);

/// Bicubic resize of a 3×H×W (or N×3×H×W) image to `out_h`×`out_w`,
/// clamped to [0,1]. The shared LQ → HQ-grid resampler for every model input.
torch::Tensor upsample_bicubic(const torch::Tensor& image, int64_t out_h, int64_t out_w);

}  // namespace rass::degrade
