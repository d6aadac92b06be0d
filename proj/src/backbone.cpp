// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "rass/backbone.hpp"

#include <cmath>

#include "rass/errors.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace rass::backbone {

// ---------------------------------------------------------------------------
// Config

int BackboneConfig::ae_levels() const {
  int levels = 1;
  for (int d = latent_downsample; d > 1; d /= 2) ++levels;
  return levels;
}

void BackboneConfig::validate() const {
  if (latent_channels < 1) throw ConfigError("backbone.latent_channels", "must be positive");
  if (latent_downsample < 1 || (latent_downsample & (latent_downsample - 1)) != 0) {
    throw ConfigError("backbone.latent_downsample", "must be a power of two");
  }
  if (static_cast<int>(ae_widths.size()) != ae_levels()) {
    throw ConfigError("backbone.ae_widths", "needs one width per level (" + std::to_string(ae_levels()) + ")");
  }
  if (denoiser_widths.empty()) throw ConfigError("backbone.denoiser_widths", "at least one level required");
  for (int w : denoiser_widths) {
    if (w < 1) throw ConfigError("backbone.denoiser_widths", "widths must be positive");
  }
  for (int level : attention_levels) {
    if (level < 0 || level >= static_cast<int>(denoiser_widths.size())) {
      throw ConfigError("backbone.attention_levels",
                        "level " + std::to_string(level) + " is not a denoiser level");
    }
    if (attention_heads < 1 || denoiser_widths[level] % attention_heads != 0) {
      throw ConfigError("backbone.attention_heads", "must divide every attention level width");
    }
  }
  if (embed_dim < 1) throw ConfigError("backbone.embed_dim", "must be positive");
  if (timestep != 1) throw ConfigError("backbone.timestep", "the restoration model is one-step; timestep must be 1");
}

void to_json(json& j, const BackboneConfig& c) {
  j = json{{"latent_channels", c.latent_channels},
           {"latent_downsample", c.latent_downsample},
           {"ae_widths", c.ae_widths},
           {"denoiser_widths", c.denoiser_widths},
           {"attention_levels", c.attention_levels},
           {"attention_heads", c.attention_heads},
           {"embed_dim", c.embed_dim},
           {"vocab", c.vocab},
           {"timestep", c.timestep}};
}

void from_json(const json& j, BackboneConfig& c) {
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.latent_downsample = j.value("latent_downsample", c.latent_downsample);
  c.ae_widths = j.value("ae_widths", c.ae_widths);
  c.denoiser_widths = j.value("denoiser_widths", c.denoiser_widths);
  c.attention_levels = j.value("attention_levels", c.attention_levels);
  c.attention_heads = j.value("attention_heads", c.attention_heads);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.vocab = j.value("vocab", c.vocab);
  c.timestep = j.value("timestep", c.timestep);
}

int64_t TagEmbedding::row_of(const std::string& tag) const {
  for (std::size_t i = 0; i < tags.size(); ++i) {
    if (tags[i] == tag) return static_cast<int64_t>(i);
  }
  return -1;
}

AttentionBundle slice_attention(const std::vector<AttentionLayer>& layers, int64_t b, int64_t count,
                                std::vector<std::string> tags) {
  AttentionBundle out;
  out.tags = std::move(tags);
  for (const auto& l : layers) {
    out.layers.push_back({l.layer_id, l.resolution, l.raw[b].narrow(0, 0, count), l.maps[b].narrow(0, 0, count)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Autoencoder

ResBlockImpl::ResBlockImpl(int64_t channels) {
  conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
  conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
  return x + conv2(F::silu(conv1(F::silu(x))));
}

EncoderImpl::EncoderImpl(const BackboneConfig& cfg) {
  const auto& w = cfg.ae_widths;
  conv_in = register_module("conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, w[0], 3).padding(1)));
  blocks = register_module("blocks", torch::nn::ModuleList());
  downs = register_module("downs", torch::nn::ModuleList());
  blocks->push_back(ResBlock(w[0]));
  for (std::size_t l = 1; l < w.size(); ++l) {
    downs->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(w[l - 1], w[l], 3).stride(2).padding(1)));
    blocks->push_back(ResBlock(w[l]));
  }
  conv_out = register_module(
      "conv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(w.back(), cfg.latent_channels, 3).padding(1)));
}

EncoderOutput EncoderImpl::forward(const torch::Tensor& x) {
  EncoderOutput out;
  auto h = blocks[0]->as<ResBlock>()->forward(conv_in(x));
  for (std::size_t l = 0; l < downs->size(); ++l) {
    h = downs[l]->as<torch::nn::Conv2d>()->forward(h);
    h = blocks[l + 1]->as<ResBlock>()->forward(h);
    out.feats.insert(out.feats.begin(), h);
  }
  out.z = conv_out(F::silu(h));
  return out;
}

DecoderImpl::DecoderImpl(const BackboneConfig& cfg) {
  const auto& w = cfg.ae_widths;
  const int last = static_cast<int>(w.size()) - 1;
  conv_in = register_module(
      "conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.latent_channels, w[last], 3).padding(1)));
  blocks = register_module("blocks", torch::nn::ModuleList());
  ups = register_module("ups", torch::nn::ModuleList());
  blocks->push_back(ResBlock(w[last]));
  for (int l = last - 1; l >= 0; --l) {
    ups->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(w[l + 1], w[l], 3).padding(1)));
    blocks->push_back(ResBlock(w[l]));
  }
  conv_out = register_module("conv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(w[0], 3, 3).padding(1)));
}

DecoderOutput DecoderImpl::forward(const torch::Tensor& z) {
  calls_.fetch_add(1);
  DecoderOutput out;
  auto h = blocks[0]->as<ResBlock>()->forward(conv_in(z));
  out.feats.push_back(h);
  for (std::size_t l = 0; l < ups->size(); ++l) {
    h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
    h = ups[l]->as<torch::nn::Conv2d>()->forward(h);
    h = blocks[l + 1]->as<ResBlock>()->forward(h);
    out.feats.push_back(h);
  }
  out.image = torch::sigmoid(conv_out(F::silu(h)));
  return out;
}

// ---------------------------------------------------------------------------
// Tag embedder

TagEmbedderImpl::TagEmbedderImpl(const BackboneConfig& cfg) {
  vocab_ = {kNullTag, kUnkTag};
  for (const auto& v : cfg.vocab) {
    if (std::find(vocab_.begin(), vocab_.end(), v) == vocab_.end()) vocab_.push_back(v);
  }
  table = register_module("table", torch::nn::Embedding(static_cast<int64_t>(vocab_.size()), cfg.embed_dim));
}

bool TagEmbedderImpl::known(const std::string& tag) const {
  return std::find(vocab_.begin(), vocab_.end(), tag) != vocab_.end();
}

int64_t TagEmbedderImpl::index_of(const std::string& tag) const {
  auto it = std::find(vocab_.begin(), vocab_.end(), tag);
  return it == vocab_.end() ? 1 : static_cast<int64_t>(it - vocab_.begin());
}

TagEmbedding TagEmbedderImpl::embed(const std::vector<std::string>& tags) {
  if (tags.empty()) throw ValidationError("at least one tag is required (use " + kNullTag + " for none)");
  std::vector<int64_t> idx;
  TagEmbedding out;
  for (const auto& t : tags) {
    idx.push_back(index_of(t));
    out.tags.push_back(t);
    out.unknown.push_back(!known(t));
  }
  out.tokens = table(torch::tensor(idx, torch::kInt64));
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser

MixBlockImpl::MixBlockImpl(int64_t channels) {
  dw = register_module("dw", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1).groups(channels)));
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
  fc1 = register_module("fc1", lora::LoraLinear(channels, 2 * channels));
  fc2 = register_module("fc2", lora::LoraLinear(2 * channels, channels));
}

torch::Tensor MixBlockImpl::forward(const torch::Tensor& x) {
  auto h = dw(x.permute({0, 3, 1, 2})).permute({0, 2, 3, 1});
  h = fc2(F::gelu(fc1(norm(h))));
  return x + h;
}

CrossAttentionImpl::CrossAttentionImpl(int64_t channels, int64_t embed_dim, int64_t heads) : heads_(heads) {
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
  to_q = register_module("to_q", lora::LoraLinear(channels, channels, false));
  to_k = register_module("to_k", lora::LoraLinear(embed_dim, channels, false));
  to_v = register_module("to_v", lora::LoraLinear(embed_dim, channels, false));
  to_out = register_module("to_out", lora::LoraLinear(channels, channels));
}

std::pair<torch::Tensor, torch::Tensor> CrossAttentionImpl::forward(const torch::Tensor& x, const TokenBatch& cond) {
  const auto B = x.size(0), H = x.size(1), W = x.size(2), C = x.size(3);
  const auto T = cond.tokens.size(1);
  const auto dh = C / heads_;
  auto q = to_q(norm(x)).reshape({B, H * W, heads_, dh}).transpose(1, 2);
  auto k = to_k(cond.tokens).reshape({B, T, heads_, dh}).transpose(1, 2);
  auto v = to_v(cond.tokens).reshape({B, T, heads_, dh}).transpose(1, 2);
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
  scores = scores.masked_fill(cond.valid.logical_not().view({B, 1, 1, T}), -std::numeric_limits<float>::infinity());
  auto probs = torch::softmax(scores, -1);  // B × heads × HW × T
  auto attended = torch::matmul(probs, v).transpose(1, 2).reshape({B, H, W, C});
  auto maps = probs.mean(1).transpose(1, 2).reshape({B, T, H, W});
  return {x + to_out(attended), maps};
}

DenoiserImpl::DenoiserImpl(const BackboneConfig& cfg)
    : widths_(cfg.denoiser_widths), attention_levels_(cfg.attention_levels.begin(), cfg.attention_levels.end()) {
  const int L = static_cast<int>(widths_.size());
  conv_in = register_module(
      "conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.latent_channels, widths_[0], 3).padding(1)));
  down_blocks = register_module("down_blocks", torch::nn::ModuleList());
  up_blocks = register_module("up_blocks", torch::nn::ModuleList());
  downsamplers = register_module("downsamplers", torch::nn::ModuleList());
  upsamplers = register_module("upsamplers", torch::nn::ModuleList());
  fusers = register_module("fusers", torch::nn::ModuleList());
  attns = register_module("attns", torch::nn::ModuleDict());
  for (int l = 0; l < L; ++l) {
    down_blocks->push_back(MixBlock(widths_[l]));
    if (attention_levels_.count(l)) {
      attns->update({{"down" + std::to_string(l), CrossAttention(widths_[l], cfg.embed_dim, cfg.attention_heads).ptr()}});
    }
  }
  for (int l = 0; l + 1 < L; ++l) {
    downsamplers->push_back(lora::LoraLinear(4 * widths_[l], widths_[l + 1]));
    upsamplers->push_back(lora::LoraLinear(widths_[l + 1], 4 * widths_[l]));
    fusers->push_back(lora::LoraLinear(2 * widths_[l], widths_[l]));
    up_blocks->push_back(MixBlock(widths_[l]));
    if (attention_levels_.count(l)) {
      attns->update({{"up" + std::to_string(l), CrossAttention(widths_[l], cfg.embed_dim, cfg.attention_heads).ptr()}});
    }
  }
  out_norm = register_module("out_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({widths_[0]})));
  out = register_module("out", lora::LoraLinear(widths_[0], cfg.latent_channels));
}

namespace {

torch::Tensor nhwc_to_nchw(const torch::Tensor& x) { return x.permute({0, 3, 1, 2}).contiguous(); }
torch::Tensor nchw_to_nhwc(const torch::Tensor& x) { return x.permute({0, 2, 3, 1}).contiguous(); }

torch::Tensor normalize_maps(const torch::Tensor& raw) {
  return raw / (raw.amax({-2, -1}, /*keepdim=*/true) + 1e-8);
}

}  // namespace

DenoiseOutput DenoiserImpl::forward(const torch::Tensor& z, const TokenBatch& cond) {
  const int L = static_cast<int>(widths_.size());
  const int64_t factor = int64_t{1} << (L - 1);
  if (z.dim() != 4 || z.size(2) % factor != 0 || z.size(3) % factor != 0) {
    throw ValidationError("latent spatial size must be divisible by " + std::to_string(factor));
  }
  if (cond.tokens.size(0) != z.size(0)) throw ValidationError("condition batch does not match latent batch");
  for (auto c : cond.counts) {
    if (c < 1) throw ValidationError("cross-attention needs at least one token per image");
  }

  DenoiseOutput result;
  auto record = [&](const std::string& id, const torch::Tensor& raw) {
    result.attention.push_back({id, raw.size(-1), raw, normalize_maps(raw)});
  };

  auto h = nchw_to_nhwc(conv_in(z));
  std::vector<torch::Tensor> skips;
  for (int l = 0; l < L; ++l) {
    h = down_blocks[l]->as<MixBlock>()->forward(h);
    const auto id = "down" + std::to_string(l);
    if (attns->contains(id)) {
      auto [next, raw] = attns[id]->as<CrossAttention>()->forward(h, cond);
      h = next;
      record(id, raw);
    }
    if (l + 1 < L) {
      skips.push_back(h);
      h = nchw_to_nhwc(F::pixel_unshuffle(nhwc_to_nchw(h), F::PixelUnshuffleFuncOptions(2)));
      h = downsamplers[l]->as<lora::LoraLinear>()->forward(h);
    }
  }
  result.feats.push_back(nhwc_to_nchw(h));
  for (int l = L - 2; l >= 0; --l) {
    h = upsamplers[l]->as<lora::LoraLinear>()->forward(h);
    h = nchw_to_nhwc(F::pixel_shuffle(nhwc_to_nchw(h), F::PixelShuffleFuncOptions(2)));
    h = fusers[l]->as<lora::LoraLinear>()->forward(torch::cat({h, skips[l]}, -1));
    h = up_blocks[l]->as<MixBlock>()->forward(h);
    const auto id = "up" + std::to_string(l);
    if (attns->contains(id)) {
      auto [next, raw] = attns[id]->as<CrossAttention>()->forward(h, cond);
      h = next;
      record(id, raw);
    }
    result.feats.push_back(nhwc_to_nchw(h));
  }
  result.eps = nhwc_to_nchw(out(out_norm(h)));
  return result;
}

// ---------------------------------------------------------------------------
// Backbone

BackboneImpl::BackboneImpl(BackboneConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  encoder = register_module("encoder", Encoder(cfg_));
  decoder = register_module("decoder", Decoder(cfg_));
  tag_embedder = register_module("tag_embedder", TagEmbedder(cfg_));
  denoiser = register_module("denoiser", Denoiser(cfg_));
}

EncoderOutput BackboneImpl::encode(const torch::Tensor& x) {
  const bool batched = x.dim() == 4;
  if (!(x.dim() == 3 || batched) || x.size(batched ? 1 : 0) != 3) {
    throw ValidationError("encode expects a 3xHxW or Nx3xHxW image");
  }
  const auto h = x.size(-2), w = x.size(-1);
  if (h % cfg_.latent_downsample != 0 || w % cfg_.latent_downsample != 0) {
    throw ValidationError("image size " + std::to_string(h) + "x" + std::to_string(w) +
                          " is not divisible by latent_downsample " + std::to_string(cfg_.latent_downsample));
  }
  auto out = encoder(batched ? x : x.unsqueeze(0));
  if (!batched) out.z = out.z.squeeze(0);
  return out;
}

DecoderOutput BackboneImpl::decode(const torch::Tensor& z) {
  const bool batched = z.dim() == 4;
  if (!(z.dim() == 3 || batched) || z.size(batched ? 1 : 0) != cfg_.latent_channels) {
    throw ValidationError("decode expects a latent with " + std::to_string(cfg_.latent_channels) + " channels");
  }
  auto out = decoder(batched ? z : z.unsqueeze(0));
  if (!batched) out.image = out.image.squeeze(0);
  return out;
}

TagEmbedding BackboneImpl::embed_tags(const std::vector<std::string>& tags) { return tag_embedder->embed(tags); }

TokenBatch BackboneImpl::embed_batch(const std::vector<std::vector<std::string>>& tags) {
  TokenBatch out;
  int64_t t_max = 0;
  for (const auto& t : tags) {
    if (t.empty()) throw ValidationError("every image needs at least one tag (use " + kNullTag + " for none)");
    t_max = std::max<int64_t>(t_max, static_cast<int64_t>(t.size()));
  }
  const auto B = static_cast<int64_t>(tags.size());
  std::vector<int64_t> idx(B * t_max, 0);
  auto valid = torch::zeros({B, t_max}, torch::kBool);
  for (int64_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < tags[b].size(); ++i) {
      idx[b * t_max + static_cast<int64_t>(i)] = tag_embedder->index_of(tags[b][i]);
      valid[b][static_cast<int64_t>(i)] = true;
    }
    out.counts.push_back(static_cast<int64_t>(tags[b].size()));
  }
  out.tokens = tag_embedder->table(torch::tensor(idx, torch::kInt64).view({B, t_max}));
  out.valid = valid;
  return out;
}

DenoiseOutput BackboneImpl::denoise_step(const torch::Tensor& z_lq, const TagEmbedding& cond) {
  if (cond.size() < 1) throw ValidationError("cross-attention needs at least one token");
  TokenBatch batch{cond.tokens.unsqueeze(0), torch::ones({1, cond.size()}, torch::kBool), {cond.size()}};
  const bool batched = z_lq.dim() == 4;
  auto out = denoiser(batched ? z_lq : z_lq.unsqueeze(0), batch);
  if (!batched) out.eps = out.eps.squeeze(0);
  return out;
}

DenoiseOutput BackboneImpl::denoise(const torch::Tensor& z_lq, const TokenBatch& cond) {
  return denoiser(z_lq, cond);
}

RestoreOutput BackboneImpl::restore(const torch::Tensor& x_lq, const TokenBatch& cond, bool with_decoder_feats) {
  auto enc = encode(x_lq.dim() == 4 ? x_lq : x_lq.unsqueeze(0));
  auto dn = denoiser(enc.z, cond);
  RestoreOutput out;
  out.z_hq = enc.z - dn.eps;
  auto dec = decoder(out.z_hq);
  out.image = x_lq.dim() == 4 ? dec.image : dec.image.squeeze(0);
  out.features.encoder_feats = std::move(enc.feats);
  out.features.denoiser_feats = std::move(dn.feats);
  if (with_decoder_feats) out.features.decoder_feats = std::move(dec.feats);
  out.attention = std::move(dn.attention);
  return out;
}

// ---------------------------------------------------------------------------
// Weights and checkpoints

std::map<std::string, torch::Tensor> named_weights(torch::nn::Module& module) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& p : module.named_parameters()) out.emplace(p.key(), p.value().detach().clone());
  return out;
}

void load_weights(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& weights,
                  const std::string& prefix) {
  torch::NoGradGuard no_grad;
  for (auto& p : module.named_parameters()) {
    auto it = weights.find(prefix + p.key());
    if (it == weights.end()) throw ValidationError("checkpoint is missing weight " + prefix + p.key());
    if (!it->second.sizes().equals(p.value().sizes())) {
      throw ValidationError("checkpoint weight " + prefix + p.key() + " has the wrong shape");
    }
    p.value().copy_(it->second);
  }
}

Backbone clone_backbone(Backbone& model) {
  Backbone copy(model->config());
  load_weights(*copy, named_weights(*model));
  auto src = model->named_parameters();
  for (auto& p : copy->named_parameters()) p.value().set_requires_grad(src[p.key()].requires_grad());
  return copy;
}

void save_backbone(Backbone& model, const std::filesystem::path& path, json extra_meta) {
  Archive ar;
  ar.meta = extra_meta.is_object() ? extra_meta : json::object();
  ar.meta["kind"] = ar.meta.value("kind", std::string("backbone"));
  ar.meta["backbone_config"] = model->config();
  json frozen = json::array();
  for (const auto& p : model->named_parameters()) {
    ar.tensors["backbone." + p.key()] = p.value();
    if (!p.value().requires_grad()) frozen.push_back(p.key());
  }
  ar.meta["frozen"] = frozen;
  save_archive(path, ar);
}

Backbone backbone_from_archive(const Archive& ar, const std::string& prefix) {
  Backbone model(ar.meta.at("backbone_config").get<BackboneConfig>());
  std::map<std::string, torch::Tensor> weights;
  for (const auto& [name, t] : ar.tensors) weights.emplace(name, t);
  load_weights(*model, weights, prefix);
  std::set<std::string> frozen;
  if (ar.meta.contains("frozen")) frozen = ar.meta.at("frozen").get<std::set<std::string>>();
  for (auto& p : model->named_parameters()) p.value().set_requires_grad(!frozen.count(p.key()));
  return model;
}

Backbone load_backbone(const std::filesystem::path& path) {
  return backbone_from_archive(load_archive(path), "backbone.");
}

}  // namespace rass::backbone
