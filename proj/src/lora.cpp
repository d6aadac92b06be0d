// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "rass/lora.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "rass/archive.hpp"
#include "rass/errors.hpp"

namespace rass::lora {

std::string to_string(StageTag tag) { return tag == StageTag::Scr ? "SCR" : "SEG"; }

StageTag stage_from_string(const std::string& s) {
  if (s == "SCR") return StageTag::Scr;
  if (s == "SEG") return StageTag::Seg;
  throw ValidationError("unknown adapter stage tag '" + s + "'");
}

int64_t AdapterSet::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, e] : entries) n += e.A.numel() + e.B.numel();
  return n;
}

std::vector<torch::Tensor> AdapterSet::parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& [name, e] : entries) {
    out.push_back(e.A);
    out.push_back(e.B);
  }
  return out;
}

AdapterSet AdapterSet::clone() const {
  AdapterSet copy;
  copy.stage = stage;
  for (const auto& [name, e] : entries) {
    LoraEntry c = e;
    c.A = e.A.detach().clone().set_requires_grad(e.A.requires_grad());
    c.B = e.B.detach().clone().set_requires_grad(e.B.requires_grad());
    copy.entries.emplace(name, std::move(c));
  }
  return copy;
}

LoraLinearImpl::LoraLinearImpl(int64_t in_features, int64_t out_features, bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight = register_parameter("weight", torch::empty({out_features, in_features}).uniform_(-bound, bound));
  if (with_bias) bias = register_parameter("bias", torch::empty({out_features}).uniform_(-bound, bound));
}

torch::Tensor LoraLinearImpl::forward(const torch::Tensor& x) {
  auto y = torch::nn::functional::linear(x, weight, bias);
  for (const auto& a : adapters_) {
    y = y + torch::nn::functional::linear(torch::nn::functional::linear(x, a.A), a.B) * a.scale();
  }
  return y;
}

void LoraLinearImpl::attach(const LoraEntry& entry) {
  if (entry.rank < 1) throw ValidationError("adapter rank must be >= 1");
  if (entry.A.dim() != 2 || entry.B.dim() != 2 || entry.A.size(0) != entry.rank || entry.B.size(1) != entry.rank ||
      entry.A.size(1) != in_features() || entry.B.size(0) != out_features()) {
    throw ValidationError("adapter shapes do not conform to a " + std::to_string(out_features()) + "x" +
                          std::to_string(in_features()) + " weight");
  }
  adapters_.push_back(entry);
}

std::map<std::string, LoraLinearImpl*> adaptable_layers(torch::nn::Module& root, const std::string& prefix) {
  std::map<std::string, LoraLinearImpl*> out;
  for (const auto& item : root.named_modules(/*name_prefix=*/"", /*include_self=*/true)) {
    if (auto* lin = dynamic_cast<LoraLinearImpl*>(item.value().get())) {
      const std::string path = item.key().empty() ? "weight" : item.key() + ".weight";
      out.emplace(prefix + path, lin);
    }
  }
  return out;
}

AdapterSet inject(torch::nn::Module& root, const InjectSpec& spec, StageTag stage, const std::string& prefix) {
  if (spec.rank < 1) throw ValidationError("adapter rank must be >= 1, got " + std::to_string(spec.rank));
  auto layers = adaptable_layers(root, prefix);

  std::vector<std::string> targets = spec.targets;
  if (targets.empty()) {
    for (const auto& [name, _] : layers) targets.push_back(name);
  }
  std::string unknown;
  for (const auto& t : targets) {
    if (!layers.count(t)) unknown += (unknown.empty() ? "" : ", ") + t;
  }
  if (!unknown.empty()) throw ValidationError("unknown adapter target(s): " + unknown);

  auto gen = at::make_generator<at::CPUGeneratorImpl>(spec.seed);
  AdapterSet set;
  set.stage = stage;
  for (const auto& t : targets) {
    auto* lin = layers.at(t);
    LoraEntry e;
    e.rank = spec.rank;
    e.alpha = spec.alpha;
    e.A = (torch::randn({spec.rank, lin->in_features()}, gen, torch::TensorOptions().dtype(lin->weight.dtype())) *
           spec.init_std)
              .set_requires_grad(true);
    e.B = torch::zeros({lin->out_features(), spec.rank}, lin->weight.options()).set_requires_grad(true);
    set.entries.emplace(t, e);
  }
  for (auto& p : root.parameters()) p.set_requires_grad(false);
  attach(root, set, prefix);
  return set;
}

void attach(torch::nn::Module& root, const AdapterSet& set, const std::string& prefix) {
  auto layers = adaptable_layers(root, prefix);
  for (const auto& [name, e] : set.entries) {
    auto it = layers.find(name);
    if (it == layers.end()) throw ValidationError("adapter targets unknown weight " + name);
    it->second->attach(e);
  }
}

void detach_all(torch::nn::Module& root) {
  for (auto& [name, lin] : adaptable_layers(root)) lin->clear_adapters();
}

void merge(torch::nn::Module& root) {
  torch::NoGradGuard no_grad;
  for (auto& [name, lin] : adaptable_layers(root)) {
    for (const auto& a : lin->adapters()) lin->weight.add_(a.delta().to(lin->weight.dtype()));
    lin->clear_adapters();
  }
}

AdapterSet init_stage2(torch::nn::Module& root, const AdapterSet& scr, const InjectSpec& seg_spec,
                       const std::string& prefix) {
  detach_all(root);
  attach(root, scr, prefix);
  merge(root);
  return inject(root, seg_spec, StageTag::Seg, prefix);
}

void store_adapters(const AdapterSet& set, Archive& ar, const std::string& key) {
  nlohmann::json header;
  header["stage_tag"] = to_string(set.stage);
  header["entries"] = nlohmann::json::array();
  for (const auto& [name, e] : set.entries) {
    header["entries"].push_back({{"weight_name", name}, {"r", e.rank}, {"alpha", e.alpha}});
    ar.tensors[key + "/" + name + ".A"] = e.A;
    ar.tensors[key + "/" + name + ".B"] = e.B;
  }
  ar.meta[key] = header;
}

AdapterSet fetch_adapters(const Archive& ar, const std::string& key) {
  if (!ar.meta.contains(key)) throw ValidationError("archive holds no adapter set '" + key + "'");
  const auto& header = ar.meta.at(key);
  AdapterSet set;
  set.stage = stage_from_string(header.at("stage_tag").get<std::string>());
  for (const auto& e : header.at("entries")) {
    const auto name = e.at("weight_name").get<std::string>();
    LoraEntry entry;
    entry.rank = e.at("r").get<int64_t>();
    entry.alpha = e.at("alpha").get<double>();
    entry.A = ar.at(key + "/" + name + ".A").clone().set_requires_grad(true);
    entry.B = ar.at(key + "/" + name + ".B").clone().set_requires_grad(true);
    set.entries.emplace(name, std::move(entry));
  }
  return set;
}

void save_adapters(const AdapterSet& set, const std::filesystem::path& path) {
  Archive ar;
  ar.meta["kind"] = "adapters";
  ar.meta["stage_tag"] = to_string(set.stage);
  ar.meta["entries"] = nlohmann::json::array();
  for (const auto& [name, e] : set.entries) {
    ar.meta["entries"].push_back({{"weight_name", name}, {"r", e.rank}, {"alpha", e.alpha}});
    ar.tensors[name + ".A"] = e.A;
    ar.tensors[name + ".B"] = e.B;
  }
  save_archive(path, ar);
}

AdapterSet load_adapters(const std::filesystem::path& path) {
  const auto ar = load_archive(path);
  if (ar.meta.value("kind", std::string()) != "adapters") {
    throw ValidationError(path.string() + " is not an adapter checkpoint");
  }
  AdapterSet set;
  set.stage = stage_from_string(ar.meta.at("stage_tag").get<std::string>());
  for (const auto& e : ar.meta.at("entries")) {
    const auto name = e.at("weight_name").get<std::string>();
    LoraEntry entry;
    entry.rank = e.at("r").get<int64_t>();
    entry.alpha = e.at("alpha").get<double>();
    entry.A = ar.at(name + ".A").clone().set_requires_grad(true);
    entry.B = ar.at(name + ".B").clone().set_requires_grad(true);
    set.entries.emplace(name, std::move(entry));
  }
  return set;
}

void InjectSpec::validate() const {
  if (rank < 1) throw ConfigError("lora.rank", "must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("lora.alpha", "must be > 0");
  if (!(init_std >= 0.0)) throw ConfigError("lora.init_std", "must be >= 0");
}

void to_json(nlohmann::json& j, const InjectSpec& s) {
  j = nlohmann::json{{"targets", s.targets}, {"rank", s.rank}, {"alpha", s.alpha}, {"seed", s.seed},
                     {"init_std", s.init_std}};
}

void from_json(const nlohmann::json& j, InjectSpec& s) {
  try {
    s.targets = j.value("targets", s.targets);
    s.rank = j.value("rank", s.rank);
    s.alpha = j.value("alpha", s.alpha);
    s.seed = j.value("seed", s.seed);
    s.init_std = j.value("init_std", s.init_std);
  } catch (const nlohmann::json::type_error& e) {
    throw ConfigError("lora", e.what());
  }
}

}  // namespace rass::lora
