// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "rass/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "rass/degrade.hpp"
#include "rass/errors.hpp"
#include "rass/log.hpp"
#include "rass/rng.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace rass::trainer {

using backbone::Backbone;
using backbone::TokenBatch;

// ---------------------------------------------------------------------------
// Config

std::string to_string(Stage s) {
  switch (s) {
    case Stage::AE: return "AE";
    case Stage::SCR: return "SCR";
    case Stage::RAS: return "RAS";
  }
  return "?";
}

namespace {

Stage stage_from_string(const std::string& s) {
  if (s == "AE") return Stage::AE;
  if (s == "SCR") return Stage::SCR;
  if (s == "RAS") return Stage::RAS;
  throw ConfigError("train.stage", "unknown stage '" + s + "' (expected AE, SCR or RAS)");
}

std::string tag_mode_name(TagMode m) { return m == TagMode::Null ? "null" : "gt"; }

TagMode tag_mode_from(const std::string& s, const std::string& field) {
  if (s == "null") return TagMode::Null;
  if (s == "gt") return TagMode::GroundTruth;
  throw ConfigError(field, "expected 'gt' or 'null', got '" + s + "'");
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

void to_json(json& j, const FeatureTaps& t) {
  j = json{{"unet", t.unet}, {"vae_encoder", t.vae_encoder}, {"vae_decoder", t.vae_decoder}};
}

void from_json(const json& j, FeatureTaps& t) {
  t.unet = j.value("unet", t.unet);
  t.vae_encoder = j.value("vae_encoder", t.vae_encoder);
  t.vae_decoder = j.value("vae_decoder", t.vae_decoder);
}

TrainConfig TrainConfig::defaults(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  switch (stage) {
    case Stage::AE:
      c.steps = 2500;
      c.batch_size = 16;
      c.lr = 1e-3;
      break;
    case Stage::SCR:
      c.steps = 2000;
      c.batch_size = 8;
      c.lr = 5e-5;
      break;
    case Stage::RAS:
      c.steps = 1500;
      c.batch_size = 8;
      c.lr = 1e-4;
      c.weight_decay = 5e-2;
      break;
  }
  return c;
}

void TrainConfig::validate() const {
  const std::string p = "train." + lower(to_string(stage)) + ".";
  if (steps < 0) throw ConfigError(p + "steps", "must be >= 0");
  if (batch_size < 1) throw ConfigError(p + "batch_size", "must be >= 1");
  if (!(lr > 0.0)) throw ConfigError(p + "lr", "must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError(p + "weight_decay", "must be >= 0");
  if (denoiser_steps < 0) throw ConfigError(p + "denoiser_steps", "must be >= 0");
  if (!(denoiser_lr > 0.0)) throw ConfigError(p + "denoiser_lr", "must be > 0");
  if (!(noise_max >= 0.0)) throw ConfigError(p + "noise_max", "must be >= 0");
  if (!(tag_dropout >= 0.0 && tag_dropout <= 1.0)) throw ConfigError(p + "tag_dropout", "must lie in [0, 1]");
  if (!taps.unet) throw ConfigError(p + "taps.unet", "the denoiser features are always used");
  if (num_queries < 1) throw ConfigError(p + "num_queries", "must be >= 1");
  if (head_dim < 1) throw ConfigError(p + "head_dim", "must be >= 1");
  if (seg_resolution < 1) throw ConfigError(p + "seg_resolution", "must be >= 1");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"stage", to_string(c.stage)},
           {"steps", c.steps},
           {"batch_size", c.batch_size},
           {"lr", c.lr},
           {"weight_decay", c.weight_decay},
           {"seed", c.seed},
           {"log_every", c.log_every},
           {"train_tags", tag_mode_name(c.train_tags)},
           {"infer_tags", tag_mode_name(c.infer_tags)}};
  if (c.stage == Stage::AE) {
    j["denoiser_steps"] = c.denoiser_steps;
    j["denoiser_lr"] = c.denoiser_lr;
    j["noise_max"] = c.noise_max;
    j["tag_dropout"] = c.tag_dropout;
    j["min_psnr"] = c.min_psnr;
    j["target_psnr"] = c.target_psnr;
  }
  if (c.stage == Stage::RAS) {
    j["taps"] = c.taps;
    j["num_queries"] = c.num_queries;
    j["head_dim"] = c.head_dim;
    j["seg_resolution"] = c.seg_resolution;
    j["train_on_hq"] = c.train_on_hq;
  }
}

void from_json(const json& j, TrainConfig& c) {
  const Stage stage = j.contains("stage") ? stage_from_string(j.at("stage").get<std::string>()) : c.stage;
  if (stage != c.stage) c = TrainConfig::defaults(stage);
  const std::string p = "train." + lower(to_string(stage)) + ".";
  try {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    c.denoiser_steps = j.value("denoiser_steps", c.denoiser_steps);
    c.denoiser_lr = j.value("denoiser_lr", c.denoiser_lr);
    c.noise_max = j.value("noise_max", c.noise_max);
    c.tag_dropout = j.value("tag_dropout", c.tag_dropout);
    c.min_psnr = j.value("min_psnr", c.min_psnr);
    c.target_psnr = j.value("target_psnr", c.target_psnr);
    if (j.contains("taps")) j.at("taps").get_to(c.taps);
    c.num_queries = j.value("num_queries", c.num_queries);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.seg_resolution = j.value("seg_resolution", c.seg_resolution);
    c.train_on_hq = j.value("train_on_hq", c.train_on_hq);
  } catch (const json::type_error& e) {
    throw ConfigError(p.substr(0, p.size() - 1), e.what());
  }
  if (j.contains("train_tags")) c.train_tags = tag_mode_from(j.at("train_tags").get<std::string>(), p + "train_tags");
  if (j.contains("infer_tags")) c.infer_tags = tag_mode_from(j.at("infer_tags").get<std::string>(), p + "infer_tags");
}

// ---------------------------------------------------------------------------
// Data

torch::Tensor PreparedSplit::pair_masks(const torch::Tensor& index, int64_t tokens) const {
  const auto lab = labels.index_select(0, index);
  const auto pc = pair_class.index_select(0, index).narrow(1, 0, tokens);
  return (lab.unsqueeze(1) == pc.unsqueeze(-1).unsqueeze(-1)).logical_and(pc.ge(0).unsqueeze(-1).unsqueeze(-1))
      .to(torch::kFloat);
}

torch::Tensor PreparedSplit::matched(const torch::Tensor& index, int64_t tokens) const {
  return pair_class.index_select(0, index).narrow(1, 0, tokens).ge(0);
}

std::vector<losses::MatchedPair> PreparedSplit::pairs(int64_t i) const {
  std::vector<losses::MatchedPair> out;
  const auto row = pair_class[i];
  for (std::size_t t = 0; t < tags[i].size(); ++t) {
    const auto c = row[static_cast<int64_t>(t)].item<int64_t>();
    if (c < 0) continue;
    out.push_back({tags[i][t].text, static_cast<int64_t>(t), labels[i].eq(c).to(torch::kFloat)});
  }
  return out;
}

PreparedSplit prepare_split(const std::vector<datakit::ImagePair>& records,
                            const std::vector<std::string>& class_names, const tagmap::MappingTable& table) {
  if (records.empty()) throw ValidationError("cannot prepare an empty split");
  PreparedSplit out;
  out.class_names = class_names;
  std::vector<torch::Tensor> hq, lq, labels;
  std::size_t t_max = 1;
  bool have_lq = true;
  for (const auto& r : records) {
    out.ids.push_back(r.id);
    hq.push_back(r.hq);
    labels.push_back(r.mask.to(torch::kInt64));
    if (r.lq.defined()) {
      lq.push_back(degrade::upsample_bicubic(r.lq, r.hq.size(1), r.hq.size(2)));
    } else {
      have_lq = false;
    }
    out.tags.push_back(r.tags);
    std::vector<std::string> texts;
    for (const auto& t : r.tags) texts.push_back(t.text);
    if (texts.empty()) texts.push_back(backbone::kNullTag);
    out.tag_texts.push_back(texts);
    t_max = std::max(t_max, texts.size());
  }
  out.hq = torch::stack(hq);
  if (have_lq) out.lq_up = torch::stack(lq);
  out.labels = torch::stack(labels);
  out.pair_class = torch::full({out.size(), static_cast<int64_t>(t_max)}, -1, torch::kInt64);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto present = tagmap::class_masks(out.labels[static_cast<int64_t>(i)], out.num_classes());
    for (std::size_t t = 0; t < records[i].tags.size(); ++t) {
      const auto c = tagmap::resolve_class(records[i].tags[t], table, class_names);
      if (c && present.count(*c)) out.pair_class[static_cast<int64_t>(i)][static_cast<int64_t>(t)] = *c;
    }
  }
  return out;
}

tagmap::MappingTable default_mapping(const datakit::DatasetManifest& manifest, double threshold) {
  std::set<std::string> open;
  for (const auto& r : manifest.records) {
    for (const auto& t : datakit::load_tags(r.tags_path)) {
      if (t.source == datakit::TagSource::Open) open.insert(t.text);
    }
  }
  return tagmap::build_mapping({open.begin(), open.end()}, manifest.class_names, tagmap::trigram_similarity,
                               threshold);
}

std::vector<std::string> collect_vocab(const std::vector<datakit::ImagePair>& records) {
  std::set<std::string> vocab;
  for (const auto& r : records) {
    for (const auto& t : r.tags) vocab.insert(t.text);
  }
  return {vocab.begin(), vocab.end()};
}

losses::SegTarget seg_target(const torch::Tensor& labels, int64_t num_classes, int64_t resolution) {
  const auto lab = losses::resample_mask(labels.to(torch::kFloat), resolution, resolution).to(torch::kInt64);
  losses::SegTarget t;
  std::vector<torch::Tensor> masks;
  for (int64_t c = 0; c < num_classes; ++c) {
    auto m = lab.eq(c);
    if (!m.any().item<bool>()) continue;
    t.classes.push_back(c);
    masks.push_back(m.to(torch::kFloat));
  }
  t.masks = masks.empty() ? torch::zeros({0, resolution, resolution}) : torch::stack(masks);
  return t;
}

EncodedSplit encode_split(Backbone& model, const torch::Tensor& images, bool keep_feats, int64_t chunk) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> zs;
  std::vector<std::vector<torch::Tensor>> feats;
  for (int64_t s = 0; s < images.size(0); s += chunk) {
    auto enc = model->encode(images.narrow(0, s, std::min(chunk, images.size(0) - s)));
    zs.push_back(enc.z);
    if (keep_feats) {
      if (feats.empty()) feats.resize(enc.feats.size());
      for (std::size_t i = 0; i < enc.feats.size(); ++i) feats[i].push_back(enc.feats[i]);
    }
  }
  EncodedSplit out;
  out.z = torch::cat(zs);
  for (auto& f : feats) out.feats.push_back(torch::cat(f));
  return out;
}

// ---------------------------------------------------------------------------
// Segmentation head

namespace {

std::vector<int64_t> encoder_channels(const backbone::BackboneConfig& b) {
  std::vector<int64_t> out;
  for (int l = static_cast<int>(b.ae_widths.size()) - 1; l >= 1; --l) out.push_back(b.ae_widths[l]);
  return out;
}

std::vector<int64_t> denoiser_channels(const backbone::BackboneConfig& b) {
  return {b.denoiser_widths.rbegin(), b.denoiser_widths.rend()};
}

std::vector<int64_t> decoder_channels(const backbone::BackboneConfig& b) {
  return {b.ae_widths.rbegin(), b.ae_widths.rend()};
}

torch::nn::ModuleList projections(const std::vector<int64_t>& channels, int64_t dim) {
  torch::nn::ModuleList list;
  for (auto c : channels) list->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(c, dim, 1)));
  return list;
}

}  // namespace

SegHeadImpl::SegHeadImpl(const SegHeadConfig& cfg, const backbone::BackboneConfig& bcfg, const FeatureTaps& taps)
    : cfg_(cfg), taps_(taps) {
  const auto d = cfg.dim;
  enc_proj = register_module("enc_proj", taps.vae_encoder ? projections(encoder_channels(bcfg), d)
                                                          : torch::nn::ModuleList());
  unet_proj = register_module("unet_proj", projections(denoiser_channels(bcfg), d));
  dec_proj = register_module("dec_proj", taps.vae_decoder ? projections(decoder_channels(bcfg), d)
                                                          : torch::nn::ModuleList());
  refine = register_module("refine", torch::nn::Conv2d(torch::nn::Conv2dOptions(d, d, 1)));
  // Depthwise 3×3 with dilation 2^i, then pointwise: shape-scale context at
  // little parameter cost.
  context = register_module("context", torch::nn::ModuleList());
  for (int64_t i = 0; i < cfg.context_blocks; ++i) {
    const int64_t dil = int64_t{1} << i;
    context->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(d, d, 3).padding(dil).dilation(dil).groups(d)));
    context->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(d, d, 1)));
  }
  queries = register_parameter("queries", torch::randn({cfg.num_queries, d}) * 0.5);
  q_norm1 = register_module("q_norm1", torch::nn::ModuleList());
  q_attn_q = register_module("q_attn_q", torch::nn::ModuleList());
  q_attn_kv = register_module("q_attn_kv", torch::nn::ModuleList());
  q_norm2 = register_module("q_norm2", torch::nn::ModuleList());
  q_mlp1 = register_module("q_mlp1", torch::nn::ModuleList());
  q_mlp2 = register_module("q_mlp2", torch::nn::ModuleList());
  for (int64_t i = 0; i < cfg.decoder_layers; ++i) {
    q_norm1->push_back(torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
    q_attn_q->push_back(torch::nn::Linear(d, d));
    q_attn_kv->push_back(torch::nn::Linear(d, 2 * d));
    q_norm2->push_back(torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
    q_mlp1->push_back(torch::nn::Linear(d, 2 * d));
    q_mlp2->push_back(torch::nn::Linear(2 * d, d));
  }
  out_norm = register_module("out_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  class_head = register_module("class_head", torch::nn::Linear(d, cfg.num_classes + 1));
  mask_embed1 = register_module("mask_embed1", torch::nn::Linear(d, d));
  mask_embed2 = register_module("mask_embed2", torch::nn::Linear(d, d));
}

SegOutput SegHeadImpl::forward(const backbone::FeatureBundle& feats) {
  const auto res = cfg_.resolution;
  torch::Tensor plane;
  auto add = [&](torch::nn::ModuleList& proj, const std::vector<torch::Tensor>& maps, const char* what) {
    if (static_cast<int64_t>(maps.size()) != static_cast<int64_t>(proj->size())) {
      throw ValidationError(std::string("segmentation head expects ") + std::to_string(proj->size()) + " " + what +
                            " feature maps, got " + std::to_string(maps.size()));
    }
    for (std::size_t i = 0; i < maps.size(); ++i) {
      auto p = proj[i]->as<torch::nn::Conv2d>()->forward(maps[i]);
      if (p.size(-1) != res || p.size(-2) != res) {
        p = F::interpolate(p, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{res, res})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
      }
      plane = plane.defined() ? plane + p : p;
    }
  };
  if (taps_.vae_encoder) add(enc_proj, feats.encoder_feats, "encoder");
  add(unet_proj, feats.denoiser_feats, "denoiser");
  if (taps_.vae_decoder) add(dec_proj, feats.decoder_feats, "decoder");
  plane = refine(F::gelu(plane));  // B × d × res × res
  for (std::size_t i = 0; i + 1 < context->size(); i += 2) {
    auto h = context[i]->as<torch::nn::Conv2d>()->forward(F::gelu(plane));
    plane = plane + context[i + 1]->as<torch::nn::Conv2d>()->forward(F::gelu(h));
  }

  const auto B = plane.size(0), d = cfg_.dim;
  auto memory = F::adaptive_avg_pool2d(plane, F::AdaptiveAvgPool2dFuncOptions(cfg_.memory_size))
                    .flatten(2)
                    .transpose(1, 2);  // B × M × d
  auto q = queries.unsqueeze(0).expand({B, cfg_.num_queries, d});
  for (int64_t i = 0; i < cfg_.decoder_layers; ++i) {
    auto qq = q_attn_q[i]->as<torch::nn::Linear>()->forward(q_norm1[i]->as<torch::nn::LayerNorm>()->forward(q));
    auto kv = q_attn_kv[i]->as<torch::nn::Linear>()->forward(memory).chunk(2, -1);
    auto w = torch::softmax(torch::matmul(qq, kv[0].transpose(1, 2)) / std::sqrt(static_cast<double>(d)), -1);
    q = q + torch::matmul(w, kv[1]);
    auto h = q_mlp1[i]->as<torch::nn::Linear>()->forward(q_norm2[i]->as<torch::nn::LayerNorm>()->forward(q));
    q = q + q_mlp2[i]->as<torch::nn::Linear>()->forward(F::gelu(h));
  }
  q = out_norm(q);
  SegOutput out;
  out.class_logits = class_head(q);
  auto emb = mask_embed2(F::gelu(mask_embed1(q)));
  out.mask_logits = torch::einsum("bqd,bdhw->bqhw", {emb, plane});
  return out;
}

torch::Tensor resolve_labels(const losses::SegPrediction& pred, int64_t out_h, int64_t out_w) {
  const auto C = pred.class_logits.size(-1) - 1;
  const auto prob = torch::softmax(pred.class_logits, -1).narrow(-1, 0, C);
  auto score = torch::einsum("qc,qhw->chw", {prob, torch::sigmoid(pred.mask_logits)});
  if (score.size(-2) != out_h || score.size(-1) != out_w) {
    score = F::interpolate(score.unsqueeze(0), F::InterpolateFuncOptions()
                                                   .size(std::vector<int64_t>{out_h, out_w})
                                                   .mode(torch::kBilinear)
                                                   .align_corners(false))
                .squeeze(0);
  }
  return score.argmax(0);
}

// ---------------------------------------------------------------------------
// Training helpers

json StepRecord::to_json() const {
  json j{{"step", step}, {"lr", lr}};
  if (!phase.empty()) j["phase"] = phase;
  for (const auto& [k, v] : values) j[k] = v;
  return j;
}

JsonlWriter::JsonlWriter(const std::filesystem::path& path) : path_(path) {
  std::ofstream out(path_, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path_.string());
}

void JsonlWriter::write(const StepRecord& r) {
  std::ofstream out(path_, std::ios::app);
  out << r.to_json().dump() << "\n";
}

namespace {

/// Seeded epoch-wise shuffling; every record is visited once per epoch.
class BatchSampler {
 public:
  BatchSampler(int64_t n, int64_t batch, std::uint64_t seed) : n_(n), batch_(std::min(batch, n)), rng_(seed) {
    order_.resize(n_);
    reshuffle();
  }

  torch::Tensor next() {
    if (pos_ + batch_ > n_) reshuffle();
    std::vector<int64_t> idx(order_.begin() + pos_, order_.begin() + pos_ + batch_);
    pos_ += batch_;
    return torch::tensor(idx, torch::kInt64);
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }

  int64_t n_, batch_, pos_ = 0;
  std::mt19937_64 rng_;
  std::vector<int64_t> order_;
};

std::vector<std::vector<std::string>> gather(const std::vector<std::vector<std::string>>& all,
                                             const torch::Tensor& index) {
  std::vector<std::vector<std::string>> out;
  const auto acc = index.accessor<int64_t, 1>();
  for (int64_t i = 0; i < index.size(0); ++i) out.push_back(all[acc[i]]);
  return out;
}

std::vector<std::vector<std::string>> null_tags(int64_t n) {
  return std::vector<std::vector<std::string>>(n, {backbone::kNullTag});
}

void set_lr(torch::optim::AdamW& opt, double lr) {
  for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);
}

double psnr_of(const torch::Tensor& a, const torch::Tensor& b) {
  const double mse = (a - b).pow(2).mean().item<double>();
  return mse < 1e-10 ? 100.0 : 10.0 * std::log10(1.0 / mse);
}

/// Keeps the last parameter values that produced a finite loss.
class LastGood {
 public:
  explicit LastGood(std::vector<torch::Tensor> params) : params_(std::move(params)) { save(); }

  void save() {
    torch::NoGradGuard no_grad;
    copies_.clear();
    for (const auto& p : params_) copies_.push_back(p.detach().clone());
  }

  void restore() {
    torch::NoGradGuard no_grad;
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].copy_(copies_[i]);
  }

 private:
  std::vector<torch::Tensor> params_;
  std::vector<torch::Tensor> copies_;
};

bool finite(const torch::Tensor& t) { return std::isfinite(t.item<double>()); }

void emit(std::vector<StepRecord>& log, const StepSink& sink, StepRecord r) {
  if (sink) sink(r);
  log.push_back(std::move(r));
}

void progress(const std::string& phase, int64_t step, int64_t total, int log_every, const StepRecord& r) {
  if (log_every <= 0 || (step % log_every != 0 && step + 1 != total)) return;
  std::string msg = phase + " step " + std::to_string(step + 1) + "/" + std::to_string(total);
  for (const auto& [k, v] : r.values) msg += " " + k + "=" + c10::str(v);
  log::info(msg);
}

}  // namespace

// ---------------------------------------------------------------------------
// Autoencoder and denoiser base

AeResult pretrain_autoencoder(const PreparedSplit& train, const PreparedSplit& val, backbone::BackboneConfig bcfg,
                              const TrainConfig& cfg, const StepSink& sink) {
  cfg.validate();
  if (bcfg.vocab.empty()) {
    std::set<std::string> vocab;
    for (const auto& tags : train.tag_texts) vocab.insert(tags.begin(), tags.end());
    bcfg.vocab.assign(vocab.begin(), vocab.end());
  }
  bcfg.validate();
  torch::manual_seed(mix_seed(cfg.seed, 0));
  AeResult result;
  result.model = Backbone(bcfg);
  auto& model = result.model;

  // Phase 1: encoder/decoder reconstruction of clean images.
  std::vector<torch::Tensor> ae_params = model->encoder->parameters();
  for (auto& p : model->decoder->parameters()) ae_params.push_back(p);
  torch::optim::AdamW opt(ae_params, torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));
  BatchSampler sampler(train.size(), cfg.batch_size, mix_seed(cfg.seed, 1));
  const double pi = std::acos(-1.0);
  for (int64_t step = 0; step < cfg.steps; ++step) {
    // Cosine decay to a tenth of the base rate.
    const double lr = cfg.lr * (0.1 + 0.45 * (1.0 + std::cos(pi * static_cast<double>(step) / cfg.steps)));
    set_lr(opt, lr);
    const auto idx = sampler.next();
    const auto x = train.hq.index_select(0, idx);
    const auto recon = model->decode(model->encode(x).z).image;
    const auto loss = F::mse_loss(recon, x);
    if (!finite(loss)) throw TrainingError("autoencoder loss became non-finite at step " + std::to_string(step));
    opt.zero_grad();
    loss.backward();
    opt.step();
    StepRecord r{step, "autoencoder", {{"l_rec", loss.item<double>()}}, lr};
    progress("autoencoder", step, cfg.steps, cfg.log_every, r);
    emit(result.log, sink, std::move(r));
  }
  for (auto& p : ae_params) p.set_requires_grad(false);

  {
    torch::NoGradGuard no_grad;
    const auto enc = encode_split(model, val.hq, false);
    std::vector<double> psnrs;
    for (int64_t s = 0; s < val.size(); s += 32) {
      const auto n = std::min<int64_t>(32, val.size() - s);
      const auto recon = model->decode(enc.z.narrow(0, s, n)).image;
      for (int64_t i = 0; i < n; ++i) psnrs.push_back(psnr_of(recon[i], val.hq[s + i]));
    }
    result.val_psnr = std::accumulate(psnrs.begin(), psnrs.end(), 0.0) / static_cast<double>(psnrs.size());
  }
  log::info("autoencoder val PSNR " + c10::str(result.val_psnr) + " dB");
  if (result.val_psnr < cfg.min_psnr) {
    std::string curve;
    for (std::size_t i = 0; i < result.log.size(); i += std::max<std::size_t>(1, result.log.size() / 10)) {
      curve += " " + std::to_string(result.log[i].step) + ":" + c10::str(result.log[i].values.at("l_rec"));
    }
    throw TrainingError("autoencoder did not converge: val PSNR " + c10::str(result.val_psnr) + " dB < " +
                        c10::str(cfg.min_psnr) + " dB; loss curve" + curve);
  }
  if (result.val_psnr < cfg.target_psnr) {
    log::warn("autoencoder val PSNR " + c10::str(result.val_psnr) + " dB is below the " + c10::str(cfg.target_psnr) +
              " dB target");
  }

  // Phase 2: the denoiser base and tag table learn tag-conditioned latent
  // denoising of clean latents, standing in for a pretrained text-to-image
  // prior.
  if (cfg.denoiser_steps > 0) {
    const auto z = encode_split(model, train.hq, false).z;
    const double z_std = z.std().item<double>();
    std::vector<torch::Tensor> den_params = model->denoiser->parameters();
    for (auto& p : model->tag_embedder->parameters()) den_params.push_back(p);
    torch::optim::AdamW dopt(den_params, torch::optim::AdamWOptions(cfg.denoiser_lr).weight_decay(0.0));
    BatchSampler dsampler(train.size(), cfg.batch_size, mix_seed(cfg.seed, 2));
    auto gen = at::make_generator<at::CPUGeneratorImpl>(mix_seed(cfg.seed, 3));
    std::mt19937_64 drop_rng(mix_seed(cfg.seed, 4));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int64_t step = 0; step < cfg.denoiser_steps; ++step) {
      const double lr =
          cfg.denoiser_lr * (0.1 + 0.45 * (1.0 + std::cos(pi * static_cast<double>(step) / cfg.denoiser_steps)));
      set_lr(dopt, lr);
      const auto idx = dsampler.next();
      const auto B = idx.size(0);
      const auto zb = z.index_select(0, idx);
      const auto sigma = torch::rand({B, 1, 1, 1}, gen) * (cfg.noise_max * z_std);
      const auto noise = torch::randn(zb.sizes(), gen) * sigma;
      auto tags = gather(train.tag_texts, idx);
      for (auto& t : tags) {
        if (unit(drop_rng) < cfg.tag_dropout) t = {backbone::kNullTag};
      }
      const auto out = model->denoise(zb + noise, model->embed_batch(tags));
      const auto loss = F::mse_loss(out.eps, noise);
      if (!finite(loss)) throw TrainingError("denoiser loss became non-finite at step " + std::to_string(step));
      dopt.zero_grad();
      loss.backward();
      dopt.step();
      StepRecord r{step, "denoiser", {{"l_den", loss.item<double>()}}, lr};
      progress("denoiser", step, cfg.denoiser_steps, cfg.log_every, r);
      emit(result.log, sink, std::move(r));
    }
  }
  for (auto& p : model->parameters()) p.set_requires_grad(false);
  return result;
}

// ---------------------------------------------------------------------------
// Stage 1: semantic-constrained restoration

ScrResult train_scr(Backbone& base, const PreparedSplit& train, const TrainConfig& cfg,
                    const losses::LossConfig& loss_cfg, const lora::InjectSpec& spec, const StepSink& sink,
                    const NanGuard& guard) {
  cfg.validate();
  loss_cfg.validate();
  if (!train.lq_up.defined()) throw ValidationError("SCR training needs degraded LQ images");
  ScrResult result;
  auto& model = result.model;
  model.backbone = clone_backbone(base);
  for (auto& p : model.backbone->parameters()) p.set_requires_grad(false);
  model.adapters = lora::inject(*model.backbone, spec, lora::StageTag::Scr);

  const auto cache = encode_split(model.backbone, train.lq_up, false);
  const losses::PerceptualNet net(loss_cfg.perceptual_seed);
  const bool use_scl = loss_cfg.lambda_region > 0.0 || loss_cfg.lambda_pixel > 0.0;
  torch::optim::AdamW opt(model.adapters.parameters(),
                          torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));
  BatchSampler sampler(train.size(), cfg.batch_size, mix_seed(cfg.seed, 11));
  LastGood last_good(model.adapters.parameters());

  for (int64_t step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next();
    const auto z = cache.z.index_select(0, idx);
    const auto tags = cfg.train_tags == TagMode::Null ? null_tags(idx.size(0)) : gather(train.tag_texts, idx);
    const auto cond = model.backbone->embed_batch(tags);
    const auto dn = model.backbone->denoise(z, cond);
    const auto restored = model.backbone->decode(z - dn.eps).image;
    const auto rt = losses::restoration_terms(restored, train.hq.index_select(0, idx), loss_cfg, net);
    torch::Tensor scl = torch::zeros({});
    if (use_scl) {
      const auto T = cond.tokens.size(1);
      scl = losses::scl_loss_batched(dn.attention, train.pair_masks(idx, T), train.matched(idx, T), loss_cfg);
    }
    const auto total = rt.total + scl;
    if (!finite(total)) {
      last_good.restore();
      if (!guard.checkpoint.empty()) save_scr(model, guard.checkpoint, {{"aborted_at_step", step}});
      throw TrainingError("SCR loss became non-finite at step " + std::to_string(step) +
                          (guard.checkpoint.empty() ? "" : "; last good adapters saved to " + guard.checkpoint.string()));
    }
    last_good.save();
    opt.zero_grad();
    total.backward();
    opt.step();
    StepRecord r{step,
                 "scr",
                 {{"l_res", rt.total.item<double>()},
                  {"l_mse", rt.mse.item<double>()},
                  {"l_perc", rt.perceptual.item<double>()},
                  {"l_scl", scl.item<double>()},
                  {"total", total.item<double>()}},
                 cfg.lr};
    progress("scr", step, cfg.steps, cfg.log_every, r);
    emit(result.log, sink, std::move(r));
  }
  return result;
}

torch::Tensor restore_images(ScrModel& model, const torch::Tensor& lq_up,
                             const std::vector<std::vector<std::string>>& tags, int64_t chunk) {
  torch::NoGradGuard no_grad;
  if (static_cast<int64_t>(tags.size()) != lq_up.size(0)) throw ValidationError("one tag list per image required");
  std::vector<torch::Tensor> out;
  for (int64_t s = 0; s < lq_up.size(0); s += chunk) {
    const auto n = std::min(chunk, lq_up.size(0) - s);
    std::vector<std::vector<std::string>> t(tags.begin() + s, tags.begin() + s + n);
    out.push_back(model.backbone->restore(lq_up.narrow(0, s, n), model.backbone->embed_batch(t)).image);
  }
  return torch::cat(out);
}

// ---------------------------------------------------------------------------
// Stage 2: restoration-adapted segmentation

int64_t RasModel::trainable_parameters() const {
  int64_t n = seg.parameter_count();
  for (const auto& p : head->parameters()) n += p.numel();
  return n;
}

int64_t RasModel::total_parameters() const {
  int64_t n = trainable_parameters();
  for (const auto& p : backbone->parameters()) n += p.numel();
  return n;
}

namespace {

SegHeadConfig head_config(const TrainConfig& cfg, int64_t num_classes) {
  SegHeadConfig h;
  h.num_classes = num_classes;
  h.num_queries = cfg.num_queries;
  h.dim = cfg.head_dim;
  h.resolution = cfg.seg_resolution;
  return h;
}

/// Shared forward of training and inference: denoiser features (and the
/// optional taps) into the head. The decoder only runs for its tap.
SegOutput head_forward(RasModel& model, const torch::Tensor& z, const std::vector<torch::Tensor>& enc_feats,
                       const TokenBatch& cond) {
  const auto& taps = model.head->taps();
  const auto dn = model.backbone->denoise(z, cond);
  backbone::FeatureBundle fb;
  fb.denoiser_feats = dn.feats;
  if (taps.vae_encoder) fb.encoder_feats = enc_feats;
  if (taps.vae_decoder) fb.decoder_feats = model.backbone->decode(z - dn.eps).feats;
  return model.head->forward(fb);
}

std::vector<std::vector<std::string>> condition_tags(TagMode mode, const std::vector<std::vector<std::string>>& tags,
                                                     int64_t n) {
  if (mode == TagMode::Null) return null_tags(n);
  if (static_cast<int64_t>(tags.size()) != n) {
    throw ValidationError("this segmenter conditions on tags; one tag list per image is required");
  }
  return tags;
}

}  // namespace

RasResult train_ras(Backbone& base, const std::optional<lora::AdapterSet>& scr, const PreparedSplit& train,
                    const TrainConfig& cfg, const losses::LossConfig& loss_cfg, const lora::InjectSpec& seg_spec,
                    const std::string& role, const StepSink& sink, const NanGuard& guard) {
  cfg.validate();
  loss_cfg.validate();
  if (!cfg.train_on_hq && !train.lq_up.defined()) throw ValidationError("RAS training needs degraded LQ images");
  RasResult result;
  auto& model = result.model;
  model.role = role;
  model.class_names = train.class_names;
  model.infer_tags = cfg.infer_tags;
  model.base_weights = backbone::named_weights(*base);
  model.backbone = clone_backbone(base);
  for (auto& p : model.backbone->parameters()) p.set_requires_grad(false);
  if (scr) {
    model.scr = *scr;
    model.seg = lora::init_stage2(*model.backbone, *scr, seg_spec);
  } else {
    model.seg = lora::inject(*model.backbone, seg_spec, lora::StageTag::Seg);
  }
  torch::manual_seed(mix_seed(cfg.seed, 21));
  model.head = SegHead(head_config(cfg, train.num_classes()), model.backbone->config(), cfg.taps);

  log::info("RAS trainable parameters " + std::to_string(model.trainable_parameters()) + " of " +
            std::to_string(model.total_parameters()) + " (" +
            c10::str(100.0 * static_cast<double>(model.trainable_parameters()) /
                     static_cast<double>(model.total_parameters())) +
            "%)");

  const auto& inputs = cfg.train_on_hq ? train.hq : train.lq_up;
  const auto cache = encode_split(model.backbone, inputs, cfg.taps.vae_encoder);
  std::vector<losses::SegTarget> targets;
  for (int64_t i = 0; i < train.size(); ++i) {
    targets.push_back(seg_target(train.labels[i], train.num_classes(), cfg.seg_resolution));
  }

  std::vector<torch::Tensor> params = model.seg.parameters();
  for (auto& p : model.head->parameters()) params.push_back(p);
  torch::optim::AdamW opt(params, torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));
  BatchSampler sampler(train.size(), cfg.batch_size, mix_seed(cfg.seed, 22));
  LastGood last_good(params);

  for (int64_t step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next();
    const auto B = idx.size(0);
    std::vector<torch::Tensor> feats;
    for (const auto& f : cache.feats) feats.push_back(f.index_select(0, idx));
    const auto tags = cfg.train_tags == TagMode::Null ? null_tags(B) : gather(train.tag_texts, idx);
    const auto out = head_forward(model, cache.z.index_select(0, idx), feats, model.backbone->embed_batch(tags));
    auto loss = torch::zeros({});
    const auto acc = idx.accessor<int64_t, 1>();
    for (int64_t b = 0; b < B; ++b) loss = loss + losses::segmentation_loss(out.at(b), targets[acc[b]], loss_cfg);
    loss = loss / static_cast<double>(B);
    if (!finite(loss)) {
      last_good.restore();
      if (!guard.checkpoint.empty()) save_ras(model, guard.checkpoint, {{"aborted_at_step", step}});
      throw TrainingError("RAS loss became non-finite at step " + std::to_string(step) +
                          (guard.checkpoint.empty() ? "" : "; last good weights saved to " + guard.checkpoint.string()));
    }
    last_good.save();
    opt.zero_grad();
    loss.backward();
    opt.step();
    StepRecord r{step, "ras", {{"l_seg", loss.item<double>()}, {"total", loss.item<double>()}}, cfg.lr};
    progress("ras", step, cfg.steps, cfg.log_every, r);
    emit(result.log, sink, std::move(r));
  }
  return result;
}

SegOutput segment_logits(RasModel& model, const torch::Tensor& images,
                         const std::vector<std::vector<std::string>>& tags) {
  const auto enc = model.backbone->encode(images);
  const auto t = condition_tags(model.infer_tags, tags, images.size(0));
  return head_forward(model, enc.z, enc.feats, model.backbone->embed_batch(t));
}

torch::Tensor predict_segmentation(RasModel& model, const torch::Tensor& images,
                                   const std::vector<std::vector<std::string>>& tags, int64_t chunk) {
  torch::NoGradGuard no_grad;
  const bool single = images.dim() == 3;
  const auto x = single ? images.unsqueeze(0) : images;
  const auto all_tags = condition_tags(model.infer_tags, tags, x.size(0));
  std::vector<torch::Tensor> out;
  for (int64_t s = 0; s < x.size(0); s += chunk) {
    const auto n = std::min(chunk, x.size(0) - s);
    std::vector<std::vector<std::string>> t(all_tags.begin() + s, all_tags.begin() + s + n);
    const auto logits = segment_logits(model, x.narrow(0, s, n), t);
    for (int64_t b = 0; b < n; ++b) out.push_back(resolve_labels(logits.at(b), x.size(-2), x.size(-1)));
  }
  auto labels = torch::stack(out);
  return single ? labels.squeeze(0) : labels;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_scr(const ScrModel& model, const std::filesystem::path& path, const json& extra) {
  Archive ar;
  ar.meta = extra.is_object() ? extra : json::object();
  ar.meta["kind"] = "scr";
  ar.meta["backbone_config"] = model.backbone->config();
  json frozen = json::array();
  for (const auto& p : model.backbone->named_parameters()) {
    ar.tensors["backbone." + p.key()] = p.value();
    frozen.push_back(p.key());
  }
  ar.meta["frozen"] = frozen;
  lora::store_adapters(model.adapters, ar, "scr");
  save_archive(path, ar);
}

ScrModel load_scr(const std::filesystem::path& path) {
  const auto ar = load_archive(path);
  if (ar.meta.value("kind", std::string()) != "scr") {
    throw ValidationError(path.string() + " is not a restoration (SCR) checkpoint");
  }
  ScrModel model;
  model.backbone = backbone::backbone_from_archive(ar, "backbone.");
  model.adapters = lora::fetch_adapters(ar, "scr");
  lora::attach(*model.backbone, model.adapters);
  return model;
}

void save_ras(const RasModel& model, const std::filesystem::path& path, const json& extra) {
  Archive ar;
  ar.meta = extra.is_object() ? extra : json::object();
  ar.meta["kind"] = "ras";
  ar.meta["role"] = model.role;
  ar.meta["backbone_config"] = model.backbone->config();
  ar.meta["class_names"] = model.class_names;
  ar.meta["infer_tags"] = tag_mode_name(model.infer_tags);
  const auto& h = model.head->config();
  ar.meta["head"] = {{"num_classes", h.num_classes}, {"num_queries", h.num_queries}, {"dim", h.dim},
                     {"resolution", h.resolution},   {"decoder_layers", h.decoder_layers},
                     {"memory_size", h.memory_size}, {"context_blocks", h.context_blocks}};
  ar.meta["taps"] = model.head->taps();
  for (const auto& [name, t] : model.base_weights) ar.tensors["backbone." + name] = t;
  if (model.scr) lora::store_adapters(*model.scr, ar, "scr");
  lora::store_adapters(model.seg, ar, "seg");
  for (const auto& p : model.head->named_parameters()) ar.tensors["head." + p.key()] = p.value();
  ar.meta["trainable_parameters"] = model.trainable_parameters();
  ar.meta["total_parameters"] = model.total_parameters();
  save_archive(path, ar);
}

RasModel load_ras(const std::filesystem::path& path) {
  const auto ar = load_archive(path);
  if (ar.meta.value("kind", std::string()) != "ras") {
    throw ValidationError(path.string() + " is not a segmentation checkpoint");
  }
  RasModel model;
  model.role = ar.meta.at("role").get<std::string>();
  model.class_names = ar.meta.at("class_names").get<std::vector<std::string>>();
  model.infer_tags = tag_mode_from(ar.meta.value("infer_tags", std::string("null")), "infer_tags");
  model.backbone = Backbone(ar.meta.at("backbone_config").get<backbone::BackboneConfig>());
  backbone::load_weights(*model.backbone, ar.tensors, "backbone.");
  model.base_weights = backbone::named_weights(*model.backbone);
  for (auto& p : model.backbone->parameters()) p.set_requires_grad(false);
  if (ar.meta.contains("scr")) {
    model.scr = lora::fetch_adapters(ar, "scr");
    lora::attach(*model.backbone, *model.scr);
    lora::merge(*model.backbone);
  }
  model.seg = lora::fetch_adapters(ar, "seg");
  lora::attach(*model.backbone, model.seg);
  const auto& h = ar.meta.at("head");
  SegHeadConfig hc;
  hc.num_classes = h.at("num_classes").get<int64_t>();
  hc.num_queries = h.at("num_queries").get<int64_t>();
  hc.dim = h.at("dim").get<int64_t>();
  hc.resolution = h.at("resolution").get<int64_t>();
  hc.decoder_layers = h.at("decoder_layers").get<int64_t>();
  hc.memory_size = h.at("memory_size").get<int64_t>();
  hc.context_blocks = h.value("context_blocks", int64_t{0});
  model.head = SegHead(hc, model.backbone->config(), ar.meta.at("taps").get<FeatureTaps>());
  backbone::load_weights(*model.head, ar.tensors, "head.");
  return model;
}

}  // namespace rass::trainer
