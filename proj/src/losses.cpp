// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "rass/losses.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "rass/errors.hpp"
#include "rass/log.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace rass::losses {

void LossConfig::validate() const {
  const std::pair<const char*, double> lambdas[] = {
      {"lambda_mse", lambda_mse},       {"lambda_lpips", lambda_lpips}, {"lambda_region", lambda_region},
      {"lambda_pixel", lambda_pixel},   {"lambda_ce", lambda_ce},       {"lambda_dice", lambda_dice},
      {"lambda_cls", lambda_cls},       {"lambda_cls_unmatched", lambda_cls_unmatched}};
  for (const auto& [name, v] : lambdas) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string("loss.") + name, "must be finite and >= 0");
  }
  if (!(bce_clamp_eps > 0.0 && bce_clamp_eps < 1e-3)) throw ConfigError("loss.bce_clamp_eps", "must lie in (0, 1e-3)");
  if (!(region_denominator_eps > 0.0 && region_denominator_eps < 1e-3)) {
    throw ConfigError("loss.region_denominator_eps", "must lie in (0, 1e-3)");
  }
}

void to_json(json& j, const LossConfig& c) {
  j = json{{"lambda_mse", c.lambda_mse},
           {"lambda_lpips", c.lambda_lpips},
           {"lambda_region", c.lambda_region},
           {"lambda_pixel", c.lambda_pixel},
           {"lambda_ce", c.lambda_ce},
           {"lambda_dice", c.lambda_dice},
           {"lambda_cls", c.lambda_cls},
           {"lambda_cls_unmatched", c.lambda_cls_unmatched},
           {"bce_clamp_eps", c.bce_clamp_eps},
           {"region_denominator_eps", c.region_denominator_eps},
           {"perceptual_seed", c.perceptual_seed}};
}

void from_json(const json& j, LossConfig& c) {
  c.lambda_mse = j.value("lambda_mse", c.lambda_mse);
  c.lambda_lpips = j.value("lambda_lpips", c.lambda_lpips);
  c.lambda_region = j.value("lambda_region", c.lambda_region);
  c.lambda_pixel = j.value("lambda_pixel", c.lambda_pixel);
  c.lambda_ce = j.value("lambda_ce", c.lambda_ce);
  c.lambda_dice = j.value("lambda_dice", c.lambda_dice);
  c.lambda_cls = j.value("lambda_cls", c.lambda_cls);
  c.lambda_cls_unmatched = j.value("lambda_cls_unmatched", c.lambda_cls_unmatched);
  c.bce_clamp_eps = j.value("bce_clamp_eps", c.bce_clamp_eps);
  c.region_denominator_eps = j.value("region_denominator_eps", c.region_denominator_eps);
  c.perceptual_seed = j.value("perceptual_seed", c.perceptual_seed);
}

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    throw ValidationError(std::string(what) + ": shape mismatch " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Restoration

PerceptualNet::PerceptualNet(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int64_t channels[] = {3, 16, 32, 64};
  for (int l = 0; l < 3; ++l) {
    const int64_t in = channels[l], out = channels[l + 1];
    const double std = std::sqrt(2.0 / static_cast<double>(in * 9));
    std::vector<float> w(out * in * 9), b(out);
    for (auto& v : w) v = static_cast<float>(normal(rng) * std);
    for (auto& v : b) v = static_cast<float>(normal(rng) * 0.1);
    weights_.push_back(torch::tensor(w).view({out, in, 3, 3}));
    biases_.push_back(torch::tensor(b));
  }
}

std::vector<torch::Tensor> PerceptualNet::features(const torch::Tensor& x) const {
  auto h = (x.dim() == 3 ? x.unsqueeze(0) : x) * 2.0 - 1.0;
  std::vector<torch::Tensor> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const auto w = weights_[l].to(h.options());
    const auto b = biases_[l].to(h.options());
    h = F::gelu(F::conv2d(h, w, F::Conv2dFuncOptions().bias(b).stride(l == 0 ? 1 : 2).padding(1)));
    out.push_back(h / torch::sqrt(h.pow(2).sum(1, /*keepdim=*/true) + 1e-10));
  }
  return out;
}

torch::Tensor PerceptualNet::distance(const torch::Tensor& a, const torch::Tensor& b) const {
  const auto fa = features(a);
  const auto fb = features(b);
  auto total = torch::zeros({}, a.options());
  for (std::size_t l = 0; l < fa.size(); ++l) total = total + (fa[l] - fb[l]).pow(2).sum(1).mean();
  return total / static_cast<double>(fa.size());
}

RestorationTerms restoration_terms(const torch::Tensor& pred, const torch::Tensor& target, const LossConfig& cfg,
                                   const PerceptualNet& net) {
  require_same_shape(pred, target, "restoration_loss");
  RestorationTerms t;
  t.mse = F::mse_loss(pred, target);
  t.perceptual = cfg.lambda_lpips > 0.0 ? net.distance(pred, target) : torch::zeros({}, pred.options());
  t.total = cfg.lambda_mse * t.mse + cfg.lambda_lpips * t.perceptual;
  return t;
}

torch::Tensor restoration_loss(const torch::Tensor& pred, const torch::Tensor& target, const LossConfig& cfg,
                               const PerceptualNet& net) {
  return restoration_terms(pred, target, cfg, net).total;
}

// ---------------------------------------------------------------------------
// Semantic constraint

torch::Tensor region_loss(const torch::Tensor& A, const torch::Tensor& M, const LossConfig& cfg) {
  require_same_shape(A, M, "region_loss");
  return 1.0 - (A * M).sum({-2, -1}) / (A.sum({-2, -1}) + cfg.region_denominator_eps);
}

torch::Tensor pixel_loss(const torch::Tensor& A, const torch::Tensor& M, const LossConfig& cfg) {
  require_same_shape(A, M, "pixel_loss");
  const auto a = A.clamp(cfg.bce_clamp_eps, 1.0 - cfg.bce_clamp_eps);
  return -(M * torch::log(a) + (1.0 - M) * torch::log(1.0 - a)).mean({-2, -1});
}

torch::Tensor resample_mask(const torch::Tensor& mask, int64_t h, int64_t w) {
  if (mask.size(-2) == h && mask.size(-1) == w) return mask;
  // Output pixel i samples source pixel floor((i + 0.5) * in / out).
  auto centres = [&mask](int64_t in, int64_t out) {
    auto idx = ((torch::arange(out, torch::kDouble) + 0.5) * (static_cast<double>(in) / out)).floor();
    return idx.clamp_max(in - 1).to(torch::kLong).to(mask.device());
  };
  return mask.index_select(-2, centres(mask.size(-2), h)).index_select(-1, centres(mask.size(-1), w));
}

torch::Tensor scl_loss(const backbone::AttentionBundle& bundle, const std::vector<MatchedPair>& pairs,
                       const LossConfig& cfg) {
  if (pairs.empty() || bundle.layers.empty()) {
    log::warn("semantic constraint: no tag has a mask; loss is 0");
    auto opts = bundle.layers.empty() ? torch::TensorOptions() : bundle.layers.front().maps.options();
    return torch::zeros({}, opts);
  }
  std::vector<int64_t> rows;
  std::vector<torch::Tensor> masks;
  for (const auto& p : pairs) {
    rows.push_back(p.token);
    masks.push_back(p.mask);
  }
  const auto idx = torch::tensor(rows, torch::kInt64);
  const auto full = torch::stack(masks);
  std::vector<torch::Tensor> per_layer;
  for (const auto& layer : bundle.layers) {
    const auto A = layer.maps.index_select(0, idx);
    const auto M = resample_mask(full, A.size(-2), A.size(-1)).to(A.dtype());
    per_layer.push_back((cfg.lambda_region * region_loss(A, M, cfg) + cfg.lambda_pixel * pixel_loss(A, M, cfg)).mean());
  }
  return torch::stack(per_layer).mean();
}

torch::Tensor scl_loss_batched(const std::vector<backbone::AttentionLayer>& layers, const torch::Tensor& masks,
                               const torch::Tensor& matched, const LossConfig& cfg) {
  const auto w = matched.to(torch::kFloat);
  const auto counts = w.sum(1);
  const auto with_pairs = (counts > 0).to(torch::kFloat);
  const auto n_images = with_pairs.sum().clamp_min(1.0);
  std::vector<torch::Tensor> per_layer;
  for (const auto& layer : layers) {
    const auto& A = layer.maps;
    const auto B = A.size(0), T = A.size(1);
    const auto M = resample_mask(masks.reshape({B * T, masks.size(-2), masks.size(-1)}), A.size(-2), A.size(-1))
                       .view({B, T, A.size(-2), A.size(-1)})
                       .to(A.dtype());
    const auto per = cfg.lambda_region * region_loss(A, M, cfg) + cfg.lambda_pixel * pixel_loss(A, M, cfg);
    const auto per_image = (per * w).sum(1) / counts.clamp_min(1.0);
    per_layer.push_back((per_image * with_pairs).sum() / n_images);
  }
  if (per_layer.empty()) return torch::zeros({}, masks.options().dtype(torch::kFloat));
  return torch::stack(per_layer).mean();
}

torch::Tensor scr_total_loss(const torch::Tensor& pred, const torch::Tensor& target,
                             const backbone::AttentionBundle& bundle, const std::vector<MatchedPair>& pairs,
                             const LossConfig& cfg, const PerceptualNet& net) {
  return restoration_loss(pred, target, cfg, net) + scl_loss(bundle, pairs, cfg);
}

// ---------------------------------------------------------------------------
// Segmentation

torch::Tensor dice_loss(const torch::Tensor& p, const torch::Tensor& g, double smooth) {
  require_same_shape(p, g, "dice_loss");
  return 1.0 - (2.0 * (p * g).sum({-2, -1}) + smooth) / (p.sum({-2, -1}) + g.sum({-2, -1}) + smooth);
}

std::vector<int64_t> linear_assignment(const std::vector<std::vector<double>>& cost) {
  const auto n = static_cast<int64_t>(cost.size());
  if (n == 0) return {};
  const auto m = static_cast<int64_t>(cost.front().size());
  if (n > m) throw ValidationError("assignment needs at least as many columns as rows");
  const double inf = std::numeric_limits<double>::infinity();
  // Shortest augmenting path with potentials; 1-based with a virtual column 0.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int64_t> p(m + 1, 0), way(m + 1, 0);
  for (int64_t i = 1; i <= n; ++i) {
    p[0] = i;
    int64_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const int64_t i0 = p[j0];
      double delta = inf;
      int64_t j1 = 0;
      for (int64_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int64_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int64_t> col_of(n, -1);
  for (int64_t j = 1; j <= m; ++j) {
    if (p[j] != 0) col_of[p[j] - 1] = j - 1;
  }
  return col_of;
}

std::vector<std::vector<double>> matching_cost(const SegPrediction& pred, const SegTarget& gt, const LossConfig& cfg) {
  torch::NoGradGuard no_grad;
  const auto G = static_cast<int64_t>(gt.classes.size());
  const auto Q = pred.class_logits.size(0);
  std::vector<std::vector<double>> cost(G, std::vector<double>(Q, 0.0));
  if (G == 0) return cost;
  const auto logits = pred.mask_logits.detach().to(torch::kDouble).reshape({Q, -1});
  const auto masks = gt.masks.detach().to(torch::kDouble).reshape({G, -1});
  if (logits.size(1) != masks.size(1)) throw ValidationError("ground-truth masks do not match the mask resolution");
  const auto hw = static_cast<double>(logits.size(1));
  const auto prob = torch::softmax(pred.class_logits.detach().to(torch::kDouble), -1);
  // BCE with logits: softplus(-x) where m = 1, softplus(x) where m = 0.
  const auto bce = (torch::matmul(masks, F::softplus(-logits).t()) + torch::matmul(1.0 - masks, F::softplus(logits).t())) / hw;
  const auto sig = torch::sigmoid(logits);
  const auto inter = torch::matmul(masks, sig.t());
  const auto dice = 1.0 - (2.0 * inter + 1.0) / (masks.sum(1, true) + sig.sum(1).unsqueeze(0) + 1.0);
  auto total = cfg.lambda_ce * bce + cfg.lambda_dice * dice;
  const auto acc = total.accessor<double, 2>();
  const auto pacc = prob.accessor<double, 2>();
  for (int64_t g = 0; g < G; ++g) {
    for (int64_t q = 0; q < Q; ++q) cost[g][q] = acc[g][q] - cfg.lambda_cls * pacc[q][gt.classes[g]];
  }
  return cost;
}

std::vector<std::pair<int64_t, int64_t>> hungarian_match(const SegPrediction& pred, const SegTarget& gt,
                                                         const LossConfig& cfg) {
  const auto G = static_cast<int64_t>(gt.classes.size());
  const auto Q = pred.class_logits.size(0);
  if (G > Q) {
    throw ValidationError("image has " + std::to_string(G) + " segments but only " + std::to_string(Q) + " queries");
  }
  std::vector<std::pair<int64_t, int64_t>> out;
  if (G == 0) return out;
  const auto col_of = linear_assignment(matching_cost(pred, gt, cfg));
  for (int64_t g = 0; g < G; ++g) out.emplace_back(col_of[g], g);
  return out;
}

SegLossTerms segmentation_terms(const SegPrediction& pred, const SegTarget& gt, const LossConfig& cfg) {
  SegLossTerms out;
  out.assignment = hungarian_match(pred, gt, cfg);
  const auto Q = pred.class_logits.size(0);
  const auto no_object = pred.class_logits.size(1) - 1;
  const auto G = static_cast<int64_t>(gt.classes.size());

  std::vector<int64_t> target(Q, no_object);
  std::vector<double> weight(Q, cfg.lambda_cls_unmatched);
  auto total = torch::zeros({}, pred.class_logits.options());
  if (!out.assignment.empty()) {
    std::vector<int64_t> qs, gs;
    for (const auto& [q, g] : out.assignment) {
      qs.push_back(q);
      gs.push_back(g);
      target[q] = gt.classes[g];
      weight[q] = cfg.lambda_cls;
    }
    const auto x = pred.mask_logits.index_select(0, torch::tensor(qs, torch::kInt64));
    const auto m = gt.masks.index_select(0, torch::tensor(gs, torch::kInt64)).to(x.dtype());
    const auto bce = F::binary_cross_entropy_with_logits(
                         x, m, F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone))
                         .mean({-2, -1});
    total = total + cfg.lambda_ce * bce.sum() + cfg.lambda_dice * dice_loss(torch::sigmoid(x), m).sum();
  }
  const auto ce = F::cross_entropy(pred.class_logits, torch::tensor(target, torch::kInt64),
                                   F::CrossEntropyFuncOptions().reduction(torch::kNone));
  total = total + (ce * torch::tensor(weight, pred.class_logits.options())).sum();
  out.total = total / static_cast<double>(std::max<int64_t>(G, 1));
  return out;
}

torch::Tensor segmentation_loss(const SegPrediction& pred, const SegTarget& gt, const LossConfig& cfg) {
  return segmentation_terms(pred, gt, cfg).total;
}

}  // namespace rass::losses
