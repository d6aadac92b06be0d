// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rass/backbone.hpp"
#include "rass/losses.hpp"
#include "rass/trainer.hpp"

namespace rass::evalkit {

inline constexpr int64_t kIgnore = 255;

// ---------------------------------------------------------------------------
// Segmentation metrics

/// Dataset-wide C×C confusion counts, rows = ground truth, cols = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int64_t num_classes);

  /// Accumulates one or more label maps. Pixels whose ground truth is
  /// `ignore` are skipped; predictions outside [0, C) count as misses.
  void add(const torch::Tensor& pred, const torch::Tensor& gt, int64_t ignore = kIgnore);

  int64_t num_classes() const { return counts_.size(0); }
  const torch::Tensor& counts() const { return counts_; }
  /// IoU per class; NaN where the union is empty.
  std::vector<double> per_class_iou() const;
  /// Mean over classes with a non-empty union (0 if there are none).
  double miou() const;

 private:
  torch::Tensor counts_;  // int64
  torch::Tensor missed_;  // per gt class, pixels predicted outside [0, C)
};

struct MiouResult {
  std::vector<double> per_class_iou;  // NaN for classes with zero union
  double miou = 0.0;
};

MiouResult miou(const torch::Tensor& pred, const torch::Tensor& gt, int64_t num_classes, int64_t ignore = kIgnore);

// ---------------------------------------------------------------------------
// Image fidelity

/// 10·log10(1/MSE) for images in [0,1]; 100 dB when MSE < 1e-10.
double psnr(const torch::Tensor& a, const torch::Tensor& b);
/// Mean SSIM over a 7×7 uniform window (valid positions only), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, averaged over channels. Inputs C×H×W.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

// ---------------------------------------------------------------------------
// Attention

/// Fraction of attention mass inside the inherited masks: mean over layers
/// and pairs of ΣA·M/ΣA, i.e. 1 − mean region loss. 0 with no pairs.
double attention_overlap(const backbone::AttentionBundle& bundle, const std::vector<losses::MatchedPair>& pairs,
                         const losses::LossConfig& cfg = {});

/// Mean attention overlap of the restoration model over the records of a
/// split that have at least one inherited mask. Conditions on each record's
/// tags; the inputs are the LQ images.
double mean_attention_overlap(trainer::ScrModel& model, const trainer::PreparedSplit& split, int64_t chunk = 16);

/// Writes one grayscale heatmap per (tag, layer) as `{id}_{tag}_{layer}.png`
/// and one layer-merged map per tag as `{id}_{tag}_merged.png`. Every map is
/// min-max rescaled to [0, 255]; the merged map is the mean of the per-layer
/// maps bilinearly resized to the finest layer, rescaled again. Returns the
/// written paths.
std::vector<std::filesystem::path> render_attention(const backbone::AttentionBundle& bundle, const std::string& id,
                                                    const std::filesystem::path& out_dir);

/// Layer-merged map of token `t` before the 8-bit conversion, in [0, 1].
torch::Tensor merged_attention(const backbone::AttentionBundle& bundle, int64_t t);

// ---------------------------------------------------------------------------
// Timing

/// Images per second of `run_one(i)` over i = 0..n−1 after `warmup` untimed
/// calls (on the first items, cycling if n is smaller).
double measure_fps(const std::function<void(int64_t)>& run_one, int64_t n, int warmup = 5);

// ---------------------------------------------------------------------------
// Protocols

enum class Protocol { DT, R2S, FT };

std::string to_string(Protocol p);
/// Throws ConfigError on anything but DT, R2S or FT.
Protocol protocol_from_string(const std::string& s);

struct EvalOptions {
  bool timing = false;
  int warmup = 5;
  /// Tags the restorer conditions on in R2S.
  trainer::TagMode restore_tags = trainer::TagMode::GroundTruth;
  int64_t chunk = 16;
};

void to_json(nlohmann::json& j, const EvalOptions& o);
void from_json(const nlohmann::json& j, EvalOptions& o);

/// Models taking part in an evaluation. `identity_restorer` stands for the
/// bicubic resample that every input already went through.
struct EvalModels {
  trainer::RasModel* segmenter = nullptr;
  std::string segmenter_name = "segmenter";
  trainer::ScrModel* restorer = nullptr;
  bool identity_restorer = false;
};

struct EvalReport {
  Protocol protocol = Protocol::DT;
  std::vector<std::string> class_names;
  std::vector<double> per_class_iou;
  double miou = 0.0;
  std::optional<double> psnr;
  std::optional<double> ssim;
  std::optional<double> fps;
  int64_t images = 0;
  std::vector<std::string> notes;

  nlohmann::json to_json() const;
  /// Human-readable table, one class per row.
  std::string to_table() const;
};

/// DT: clean-trained segmenter on LQ inputs. R2S: restore, then segment the
/// restored pixels from scratch. FT: LQ-trained segmenter on LQ inputs.
/// Missing or unsuitable models raise ConfigError naming the field
/// (`eval.segmenter`, `eval.restorer`).
EvalReport run_protocol(Protocol protocol, EvalModels& models, const trainer::PreparedSplit& split,
                        const EvalOptions& options = {});

}  // namespace rass::evalkit
