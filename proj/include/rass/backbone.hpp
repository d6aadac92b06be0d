// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rass/archive.hpp"
#include "rass/lora.hpp"

namespace rass::backbone {

inline const std::string kNullTag = "<null>";
inline const std::string kUnkTag = "<unk>";

struct BackboneConfig {
  int latent_channels = 4;
  int latent_downsample = 4;
  std::vector<int> ae_widths = {16, 32, 64};  // one per autoencoder resolution level
  std::vector<int> denoiser_widths = {32, 64, 128};
  std::vector<int> attention_levels = {0, 1, 2};  // denoiser levels carrying cross-attention
  int attention_heads = 1;
  int embed_dim = 64;
  std::vector<std::string> vocab;  // reserved <null>/<unk> rows are added implicitly
  int timestep = 1;

  /// Throws ConfigError naming the offending `backbone.*` field.
  void validate() const;
  int ae_levels() const;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

/// Text condition for one image: one embedding row per tag, in input order.
struct TagEmbedding {
  torch::Tensor tokens;             // T × embed_dim
  std::vector<std::string> tags;    // row order
  std::vector<bool> unknown;        // row mapped to <unk>

  int64_t size() const { return tokens.size(0); }
  /// First row holding `tag`, or -1.
  int64_t row_of(const std::string& tag) const;
};

/// Padded condition for a batch; `valid[b, t]` marks real tokens.
struct TokenBatch {
  torch::Tensor tokens;  // B × T_max × embed_dim
  torch::Tensor valid;   // B × T_max (bool)
  std::vector<int64_t> counts;
};

/// Cross-attention maps of one layer for a batch.
///
/// `raw` is the softmax over tokens (sums to 1 over valid tokens at every
/// location); `maps` rescales each token map by its spatial maximum so that
/// it spans [0, 1].
struct AttentionLayer {
  std::string layer_id;
  int64_t resolution = 0;
  torch::Tensor raw;   // B × T_max × H × W
  torch::Tensor maps;  // B × T_max × H × W
};

/// Per-image view of the attention layers: maps are T × H_l × W_l.
struct AttentionBundle {
  struct Layer {
    std::string layer_id;
    int64_t resolution = 0;
    torch::Tensor raw;
    torch::Tensor maps;
  };
  std::vector<Layer> layers;
  std::vector<std::string> tags;

  int64_t token_count() const { return layers.empty() ? 0 : layers.front().maps.size(0); }
};

/// Slices sample `b` (with `count` valid tokens) out of batched attention.
AttentionBundle slice_attention(const std::vector<AttentionLayer>& layers, int64_t b, int64_t count,
                                std::vector<std::string> tags = {});

/// Multi-scale features, each list ordered coarse → fine.
struct FeatureBundle {
  std::vector<torch::Tensor> encoder_feats;
  std::vector<torch::Tensor> denoiser_feats;
  std::vector<torch::Tensor> decoder_feats;
};

// ---------------------------------------------------------------------------
// Modules

class ResBlockImpl : public torch::nn::Module {
 public:
  explicit ResBlockImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(ResBlock);

struct EncoderOutput {
  torch::Tensor z;
  std::vector<torch::Tensor> feats;  // outputs of each downsampling stage, coarse → fine
};

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const BackboneConfig& cfg);
  EncoderOutput forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::ModuleList blocks, downs;
};
TORCH_MODULE(Encoder);

struct DecoderOutput {
  torch::Tensor image;
  std::vector<torch::Tensor> feats;  // coarse → fine
};

class DecoderImpl : public torch::nn::Module {
 public:
  explicit DecoderImpl(const BackboneConfig& cfg);
  DecoderOutput forward(const torch::Tensor& z);

  /// Number of forward calls so far; lets tests assert the decoder is skipped.
  int64_t calls() const { return calls_.load(); }

 private:
  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::ModuleList blocks, ups;
  std::atomic<int64_t> calls_{0};
};
TORCH_MODULE(Decoder);

class TagEmbedderImpl : public torch::nn::Module {
 public:
  explicit TagEmbedderImpl(const BackboneConfig& cfg);
  TagEmbedding embed(const std::vector<std::string>& tags);
  int64_t index_of(const std::string& tag) const;  // <unk> row for unknown tags
  bool known(const std::string& tag) const;

  torch::nn::Embedding table{nullptr};

 private:
  std::vector<std::string> vocab_;
};
TORCH_MODULE(TagEmbedder);

/// Depthwise 3×3 spatial mixing followed by a pointwise MLP; NHWC in/out.
class MixBlockImpl : public torch::nn::Module {
 public:
  explicit MixBlockImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d dw{nullptr};
  torch::nn::LayerNorm norm{nullptr};
  lora::LoraLinear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(MixBlock);

class CrossAttentionImpl : public torch::nn::Module {
 public:
  CrossAttentionImpl(int64_t channels, int64_t embed_dim, int64_t heads);
  /// x: B×H×W×C. Returns the updated features and the head-averaged
  /// softmax over tokens, B×T×H×W.
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x, const TokenBatch& cond);

 private:
  int64_t heads_;
  torch::nn::LayerNorm norm{nullptr};
  lora::LoraLinear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};
};
TORCH_MODULE(CrossAttention);

struct DenoiseOutput {
  torch::Tensor eps;                        // same shape as z
  std::vector<torch::Tensor> feats;         // coarse → fine, NCHW
  std::vector<AttentionLayer> attention;    // down levels then up levels
};

/// Three-level U-shaped latent denoiser with cross-attention at every
/// configured level. All learned 2-D weights are LoraLinear layers.
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(const BackboneConfig& cfg);
  DenoiseOutput forward(const torch::Tensor& z, const TokenBatch& cond);

 private:
  std::vector<int> widths_;
  std::set<int> attention_levels_;
  torch::nn::Conv2d conv_in{nullptr};
  torch::nn::ModuleList down_blocks, up_blocks, downsamplers, upsamplers, fusers;
  torch::nn::ModuleDict attns;
  torch::nn::LayerNorm out_norm{nullptr};
  lora::LoraLinear out{nullptr};
};
TORCH_MODULE(Denoiser);

struct RestoreOutput {
  torch::Tensor image;
  torch::Tensor z_hq;
  FeatureBundle features;
  std::vector<AttentionLayer> attention;
};

/// E_φ, D_φ, T_φ and the latent denoiser under one config.
class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(BackboneConfig cfg);

  const BackboneConfig& config() const { return cfg_; }

  /// x: 3×H×W or N×3×H×W in [0,1] with H, W divisible by latent_downsample.
  EncoderOutput encode(const torch::Tensor& x);
  /// z: C×h×w or N×C×h×w. Output is squashed into [0,1].
  DecoderOutput decode(const torch::Tensor& z);
  TagEmbedding embed_tags(const std::vector<std::string>& tags);
  TokenBatch embed_batch(const std::vector<std::vector<std::string>>& tags);
  /// Single-image noise prediction ε̂ = ε(z_L, c).
  DenoiseOutput denoise_step(const torch::Tensor& z_lq, const TagEmbedding& cond);
  DenoiseOutput denoise(const torch::Tensor& z_lq, const TokenBatch& cond);
  /// One-step residual restoration: decode(encode(x).z − ε̂). Input is the LQ
  /// image already resampled onto the HQ grid.
  RestoreOutput restore(const torch::Tensor& x_lq, const TokenBatch& cond, bool with_decoder_feats = false);

  Encoder encoder{nullptr};
  Decoder decoder{nullptr};
  TagEmbedder tag_embedder{nullptr};
  Denoiser denoiser{nullptr};

 private:
  BackboneConfig cfg_;
};
TORCH_MODULE(Backbone);

/// Named base weights (φ) of a module, detached clones.
std::map<std::string, torch::Tensor> named_weights(torch::nn::Module& module);
/// Copies tensors into matching parameters; every parameter must be present.
void load_weights(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& weights,
                  const std::string& prefix = "");

/// Independent copy with identical weights and frozen flags; adapters are
/// not carried over.
Backbone clone_backbone(Backbone& model);

/// Backbone checkpoint: config header, frozen-flag list and φ.
void save_backbone(Backbone& model, const std::filesystem::path& path, nlohmann::json extra_meta = {});
Backbone load_backbone(const std::filesystem::path& path);
Backbone backbone_from_archive(const Archive& ar, const std::string& prefix = "");

}  // namespace rass::backbone
