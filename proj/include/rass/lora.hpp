// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rass/archive.hpp"

namespace rass::lora {

enum class StageTag { Scr, Seg };

std::string to_string(StageTag tag);
StageTag stage_from_string(const std::string& s);

/// ΔW = (alpha / rank) · B · A for a d_out×d_in base weight.
struct LoraEntry {
  torch::Tensor A;  // rank × d_in
  torch::Tensor B;  // d_out × rank
  int64_t rank = 0;
  double alpha = 0.0;

  double scale() const { return alpha / static_cast<double>(rank); }
  torch::Tensor delta() const { return B.mm(A) * scale(); }
};

/// Adapters of one training stage, keyed by the full base-weight name
/// (e.g. `denoiser.down0_attn.to_q.weight`).
struct AdapterSet {
  StageTag stage = StageTag::Scr;
  std::map<std::string, LoraEntry> entries;

  int64_t parameter_count() const;
  std::vector<torch::Tensor> parameters() const;
  AdapterSet clone() const;
};

/// Linear layer whose effective weight is `weight + Σ ΔW` over the adapters
/// currently attached. Adapter tensors are not registered as module
/// parameters; the owning AdapterSet hands them to the optimizer.
class LoraLinearImpl : public torch::nn::Module {
 public:
  LoraLinearImpl(int64_t in_features, int64_t out_features, bool with_bias = true);

  torch::Tensor forward(const torch::Tensor& x);

  int64_t in_features() const { return weight.size(1); }
  int64_t out_features() const { return weight.size(0); }

  void attach(const LoraEntry& entry);
  void clear_adapters() { adapters_.clear(); }
  const std::vector<LoraEntry>& adapters() const { return adapters_; }

  torch::Tensor weight;
  torch::Tensor bias;

 private:
  std::vector<LoraEntry> adapters_;
};
TORCH_MODULE(LoraLinear);

/// Every adaptable linear below `root`, keyed by `<path>.weight`.
std::map<std::string, LoraLinearImpl*> adaptable_layers(torch::nn::Module& root, const std::string& prefix = "");

struct InjectSpec {
  std::vector<std::string> targets;  // empty selects every adaptable layer
  int64_t rank = 4;
  double alpha = 4.0;  // alpha == rank gives unit scaling
  std::uint64_t seed = 0;
  double init_std = 0.01;

  /// Throws ConfigError naming the offending `lora.*` field.
  void validate() const;
};

void to_json(nlohmann::json& j, const InjectSpec& s);
void from_json(const nlohmann::json& j, InjectSpec& s);

/// Creates fresh adapters (A ~ N(0, init_std²), B = 0) on the targeted layers,
/// attaches them and freezes every parameter registered under `root`.
AdapterSet inject(torch::nn::Module& root, const InjectSpec& spec, StageTag stage, const std::string& prefix = "");

/// Attaches an existing adapter set (e.g. loaded from disk) to `root`.
void attach(torch::nn::Module& root, const AdapterSet& set, const std::string& prefix = "");

/// Removes every adapter from `root` without touching base weights.
void detach_all(torch::nn::Module& root);

/// Folds every attached adapter into its base weight and detaches it.
void merge(torch::nn::Module& root);

/// Stage-2 initialization: base ← base + ΔW_scr (merged, frozen), then a
/// fresh SEG adapter set with B = 0 is injected and returned.
AdapterSet init_stage2(torch::nn::Module& root, const AdapterSet& scr, const InjectSpec& seg_spec,
                       const std::string& prefix = "");

/// Embeds an adapter set in a larger archive: header under meta[key],
/// tensors named `<key>/<weight_name>.A|B`.
void store_adapters(const AdapterSet& set, Archive& ar, const std::string& key);
AdapterSet fetch_adapters(const Archive& ar, const std::string& key);

/// Adapter-only checkpoint: stage tag header plus {weight_name, r, alpha, A, B}.
void save_adapters(const AdapterSet& set, const std::filesystem::path& path);
AdapterSet load_adapters(const std::filesystem::path& path);

}  // namespace rass::lora
