// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rass/backbone.hpp"
#include "rass/datakit.hpp"
#include "rass/lora.hpp"
#include "rass/losses.hpp"
#include "rass/tagmap.hpp"

namespace rass::trainer {

enum class Stage { AE, SCR, RAS };

std::string to_string(Stage s);

/// Which feature groups feed the segmentation head.
struct FeatureTaps {
  bool unet = true;
  bool vae_encoder = true;
  bool vae_decoder = false;

  bool operator==(const FeatureTaps&) const = default;
};

void to_json(nlohmann::json& j, const FeatureTaps& t);
void from_json(const nlohmann::json& j, FeatureTaps& t);

/// Condition fed to the denoiser: the record's tags or the single <null> tag.
enum class TagMode { GroundTruth, Null };

struct TrainConfig {
  Stage stage = Stage::SCR;
  int steps = 2000;
  int batch_size = 8;
  double lr = 5e-5;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  int log_every = 100;

  // AE stage: autoencoder reconstruction, then the latent denoiser base.
  int denoiser_steps = 2000;
  double denoiser_lr = 1e-3;
  double noise_max = 1.0;       // noise σ drawn in [0, noise_max]·std(z)
  double tag_dropout = 0.1;     // probability of conditioning on <null>
  double min_psnr = 20.0;       // below this the stage fails
  double target_psnr = 25.0;    // below this the stage warns

  // RAS stage.
  FeatureTaps taps;
  int num_queries = 10;
  int head_dim = 32;
  int seg_resolution = 32;
  bool train_on_hq = false;     // segmenter trained on clean images (SQ role)

  TagMode train_tags = TagMode::GroundTruth;
  TagMode infer_tags = TagMode::Null;

  /// Defaults for a stage, e.g. the RAS learning rate and weight decay.
  static TrainConfig defaults(Stage stage);
  /// Throws ConfigError naming the offending `train.<stage>.*` field.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing fields keep the defaults of the stage named in `stage`.
void from_json(const nlohmann::json& j, TrainConfig& c);

// ---------------------------------------------------------------------------
// Data

/// A split turned into tensors, ready for batching.
struct PreparedSplit {
  std::vector<std::string> ids;
  torch::Tensor hq;          // N × 3 × H × W
  torch::Tensor lq_up;       // N × 3 × H × W, LQ bicubic-resampled onto the HQ grid
  torch::Tensor labels;      // N × H × W, int64 (255 = ignore)
  std::vector<std::vector<datakit::TagEntry>> tags;
  std::vector<std::vector<std::string>> tag_texts;
  torch::Tensor pair_class;  // N × T_max, int64 class id whose mask token t inherits, −1 if none
  std::vector<std::string> class_names;

  int64_t size() const { return static_cast<int64_t>(ids.size()); }
  int64_t num_classes() const { return static_cast<int64_t>(class_names.size()); }
  /// Token-aligned binary masks, B × T_max × H × W, for the given records.
  /// Only the first `tokens` columns are returned.
  torch::Tensor pair_masks(const torch::Tensor& index, int64_t tokens) const;
  /// B × tokens bool: token t of record b inherits a mask.
  torch::Tensor matched(const torch::Tensor& index, int64_t tokens) const;
  /// Tags that inherited a mask, per record.
  std::vector<losses::MatchedPair> pairs(int64_t i) const;
};

PreparedSplit prepare_split(const std::vector<datakit::ImagePair>& records,
                            const std::vector<std::string>& class_names, const tagmap::MappingTable& table);

/// Default mapping for a dataset: every OPEN tag of the manifest against the
/// class names under trigram similarity.
tagmap::MappingTable default_mapping(const datakit::DatasetManifest& manifest, double threshold = 0.5);

/// Sorted distinct tag texts of a set of records.
std::vector<std::string> collect_vocab(const std::vector<datakit::ImagePair>& records);

/// Ground-truth segments at `resolution`, one per class present.
losses::SegTarget seg_target(const torch::Tensor& labels, int64_t num_classes, int64_t resolution);

/// Frozen-encoder outputs for a stack of images.
struct EncodedSplit {
  torch::Tensor z;                   // N × C × h × w
  std::vector<torch::Tensor> feats;  // coarse → fine, each N × ...
};

EncodedSplit encode_split(backbone::Backbone& model, const torch::Tensor& images, bool keep_feats = true,
                          int64_t chunk = 32);

// ---------------------------------------------------------------------------
// Segmentation head

struct SegHeadConfig {
  int64_t num_classes = 6;
  int64_t num_queries = 10;
  int64_t dim = 32;
  int64_t resolution = 32;
  int64_t decoder_layers = 2;
  int64_t memory_size = 8;
  int64_t context_blocks = 4;  // residual dilated blocks on the pixel plane
};

struct SegOutput {
  torch::Tensor class_logits;  // B × N_q × (C+1)
  torch::Tensor mask_logits;   // B × N_q × H_s × W_s

  losses::SegPrediction at(int64_t b) const { return {class_logits[b], mask_logits[b]}; }
};

/// Query-based mask-classification head.
///
/// Every enabled feature map is projected to `dim` channels, resized to
/// `resolution`, summed and refined by residual dilated depthwise blocks
/// into a pixel embedding plane. Learned queries
/// attend to a pooled copy of the plane; each query yields class logits and a
/// mask as the dot product of its embedding with the plane.
class SegHeadImpl : public torch::nn::Module {
 public:
  SegHeadImpl(const SegHeadConfig& cfg, const backbone::BackboneConfig& bcfg, const FeatureTaps& taps);

  SegOutput forward(const backbone::FeatureBundle& feats);

  const SegHeadConfig& config() const { return cfg_; }
  const FeatureTaps& taps() const { return taps_; }

 private:
  SegHeadConfig cfg_;
  FeatureTaps taps_;
  torch::nn::ModuleList enc_proj{nullptr}, unet_proj{nullptr}, dec_proj{nullptr};
  torch::nn::Conv2d refine{nullptr};
  torch::nn::ModuleList context{nullptr};
  torch::Tensor queries;
  torch::nn::ModuleList q_norm1{nullptr}, q_attn_q{nullptr}, q_attn_kv{nullptr}, q_norm2{nullptr}, q_mlp1{nullptr},
      q_mlp2{nullptr};
  torch::nn::LayerNorm out_norm{nullptr};
  torch::nn::Linear class_head{nullptr}, mask_embed1{nullptr}, mask_embed2{nullptr};
};
TORCH_MODULE(SegHead);

/// Label map from head outputs: per pixel the class c maximizing
/// Σ_q softmax(class_logits_q)[c]·σ(mask_logits_q), scores resampled
/// bilinearly to out_h×out_w first; ties go to the lowest class id.
torch::Tensor resolve_labels(const losses::SegPrediction& pred, int64_t out_h, int64_t out_w);

// ---------------------------------------------------------------------------
// Training stages

struct StepRecord {
  int64_t step = 0;
  std::string phase;                     // e.g. "autoencoder", "denoiser", "scr", "ras"
  std::map<std::string, double> values;  // loss components
  double lr = 0.0;

  nlohmann::json to_json() const;
};

/// Receives every step record; used for JSONL logs and progress output.
using StepSink = std::function<void(const StepRecord&)>;

struct AeResult {
  backbone::Backbone model{nullptr};
  std::vector<StepRecord> log;
  double val_psnr = 0.0;
};

/// Trains E/D on HQ reconstruction, then the denoiser base and tag table on
/// latent denoising; returns the backbone with every weight frozen.
AeResult pretrain_autoencoder(const PreparedSplit& train, const PreparedSplit& val,
                              backbone::BackboneConfig bcfg, const TrainConfig& cfg, const StepSink& sink = {});

/// Backbone plus live (unmerged) restoration adapters.
struct ScrModel {
  backbone::Backbone backbone{nullptr};
  lora::AdapterSet adapters;
};

struct ScrResult {
  ScrModel model;
  std::vector<StepRecord> log;
};

struct NanGuard {
  /// Written with the last finite adapters when a step produces NaN/Inf.
  std::filesystem::path checkpoint;
};

ScrResult train_scr(backbone::Backbone& base, const PreparedSplit& train, const TrainConfig& cfg,
                    const losses::LossConfig& loss_cfg, const lora::InjectSpec& spec, const StepSink& sink = {},
                    const NanGuard& guard = {});

/// Restores a stack of LQ images (on the HQ grid) conditioned on `tags`.
torch::Tensor restore_images(ScrModel& model, const torch::Tensor& lq_up,
                             const std::vector<std::vector<std::string>>& tags, int64_t chunk = 32);

/// Segmentation model on the backbone: merged base + SEG adapters + head.
///
/// `role` records how it was trained: "rass" (restoration-adapted, LQ
/// inputs), "ft" (fine-tuned on LQ from the plain base) or "sq" (trained on
/// clean images).
struct RasModel {
  backbone::Backbone backbone{nullptr};
  std::map<std::string, torch::Tensor> base_weights;  // φ before any merge
  std::optional<lora::AdapterSet> scr;
  lora::AdapterSet seg;
  SegHead head{nullptr};
  std::vector<std::string> class_names;
  std::string role = "rass";
  TagMode infer_tags = TagMode::Null;

  /// Trainable parameters (SEG adapters and head) over all parameters.
  int64_t trainable_parameters() const;
  int64_t total_parameters() const;
};

struct RasResult {
  RasModel model;
  std::vector<StepRecord> log;
};

/// Builds the stage-2 model (SCR adapters merged if given, fresh SEG
/// adapters, head) and trains it on the segmentation loss. The decoder runs
/// only when the vae_decoder tap is enabled.
RasResult train_ras(backbone::Backbone& base, const std::optional<lora::AdapterSet>& scr, const PreparedSplit& train,
                    const TrainConfig& cfg, const losses::LossConfig& loss_cfg, const lora::InjectSpec& seg_spec,
                    const std::string& role, const StepSink& sink = {}, const NanGuard& guard = {});

/// Head outputs for a stack of images on the HQ grid.
SegOutput segment_logits(RasModel& model, const torch::Tensor& images,
                         const std::vector<std::vector<std::string>>& tags);

/// Label maps (N × H × W, int64) for a stack of images on the HQ grid. Tags
/// are only used when the model conditions on ground-truth tags.
torch::Tensor predict_segmentation(RasModel& model, const torch::Tensor& images,
                                   const std::vector<std::vector<std::string>>& tags = {}, int64_t chunk = 32);

// ---------------------------------------------------------------------------
// Checkpoints

void save_scr(const ScrModel& model, const std::filesystem::path& path, const nlohmann::json& extra = {});
ScrModel load_scr(const std::filesystem::path& path);

void save_ras(const RasModel& model, const std::filesystem::path& path, const nlohmann::json& extra = {});
RasModel load_ras(const std::filesystem::path& path);

/// Appends JSON step records to a file, one per line.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path);
  void write(const StepRecord& r);

 private:
  std::filesystem::path path_;
};

}  // namespace rass::trainer
