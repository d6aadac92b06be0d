// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "rass/evalkit.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "rass/errors.hpp"
#include "rass/log.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace rass::evalkit {

// ---------------------------------------------------------------------------
// Segmentation metrics

ConfusionMatrix::ConfusionMatrix(int64_t num_classes) {
  if (num_classes < 1) throw ValidationError("confusion matrix needs at least one class");
  counts_ = torch::zeros({num_classes, num_classes}, torch::kInt64);
}

void ConfusionMatrix::add(const torch::Tensor& pred, const torch::Tensor& gt, int64_t ignore) {
  if (pred.sizes() != gt.sizes()) {
    throw ValidationError("prediction and ground truth shapes differ: " + c10::str(pred.sizes()) + " vs " +
                          c10::str(gt.sizes()));
  }
  const auto C = num_classes();
  const auto p = pred.to(torch::kInt64).flatten();
  const auto g = gt.to(torch::kInt64).flatten();
  const auto keep = g.ne(ignore);
  const auto gk = g.masked_select(keep);
  const auto pk = p.masked_select(keep);
  if ((gk.lt(0) | gk.ge(C)).any().item<bool>()) {
    throw ValidationError("ground truth holds ids outside [0, " + std::to_string(C) + ") other than the ignore value");
  }
  // Out-of-range predictions are false negatives for the true class only.
  const auto valid = pk.ge(0) & pk.lt(C);
  const auto fn_only = gk.masked_select(valid.logical_not());
  const auto codes = gk.masked_select(valid) * C + pk.masked_select(valid);
  counts_ += torch::bincount(codes, {}, C * C).view({C, C});
  if (fn_only.numel() > 0) {
    missed_ = missed_.defined() ? missed_ + torch::bincount(fn_only, {}, C) : torch::bincount(fn_only, {}, C);
  }
}

std::vector<double> ConfusionMatrix::per_class_iou() const {
  const auto C = num_classes();
  const auto cm = counts_.to(torch::kDouble);
  const auto tp = cm.diagonal();
  auto gt_total = cm.sum(1);
  if (missed_.defined()) gt_total = gt_total + missed_.to(torch::kDouble);
  const auto uni = gt_total + cm.sum(0) - tp;
  std::vector<double> out(C);
  for (int64_t c = 0; c < C; ++c) {
    const double u = uni[c].item<double>();
    out[c] = u > 0 ? tp[c].item<double>() / u : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

double ConfusionMatrix::miou() const {
  double sum = 0.0;
  int n = 0;
  for (double v : per_class_iou()) {
    if (std::isnan(v)) continue;
    sum += v;
    ++n;
  }
  return n > 0 ? sum / n : 0.0;
}

MiouResult miou(const torch::Tensor& pred, const torch::Tensor& gt, int64_t num_classes, int64_t ignore) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, gt, ignore);
  return {cm.per_class_iou(), cm.miou()};
}

// ---------------------------------------------------------------------------
// Image fidelity

namespace {

void same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw ValidationError(std::string(what) + ": shapes differ: " + c10::str(a.sizes()) + " vs " +
                          c10::str(b.sizes()));
  }
}

}  // namespace

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  same_shape(a, b, "psnr");
  const double mse = (a.to(torch::kDouble) - b.to(torch::kDouble)).pow(2).mean().item<double>();
  if (mse < 1e-10) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  same_shape(a, b, "ssim");
  if (a.dim() != 3) throw ValidationError("ssim expects C×H×W images");
  constexpr int64_t kWin = 7;
  if (a.size(1) < kWin || a.size(2) < kWin) throw ValidationError("ssim needs images of at least 7×7");
  const double c1 = std::pow(0.01, 2), c2 = std::pow(0.03, 2);
  const auto x = a.to(torch::kDouble).unsqueeze(1);  // C × 1 × H × W
  const auto y = b.to(torch::kDouble).unsqueeze(1);
  auto mean = [&](const torch::Tensor& t) { return F::avg_pool2d(t, F::AvgPool2dFuncOptions(kWin).stride(1)); };
  // Sample covariance over the window, the usual reference convention.
  const double n = kWin * kWin, cov_norm = n / (n - 1.0);
  const auto ux = mean(x), uy = mean(y);
  const auto vx = cov_norm * (mean(x * x) - ux * ux);
  const auto vy = cov_norm * (mean(y * y) - uy * uy);
  const auto vxy = cov_norm * (mean(x * y) - ux * uy);
  const auto s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux.pow(2) + uy.pow(2) + c1) * (vx + vy + c2));
  return s.mean({1, 2, 3}).mean().item<double>();
}

// ---------------------------------------------------------------------------
// Attention

double attention_overlap(const backbone::AttentionBundle& bundle, const std::vector<losses::MatchedPair>& pairs,
                         const losses::LossConfig& cfg) {
  if (pairs.empty() || bundle.layers.empty()) return 0.0;
  torch::NoGradGuard no_grad;
  std::vector<int64_t> rows;
  std::vector<torch::Tensor> masks;
  for (const auto& p : pairs) {
    if (p.token < 0 || p.token >= bundle.token_count()) {
      throw ValidationError("pair '" + p.tag + "' points at token " + std::to_string(p.token) + " outside the bundle");
    }
    rows.push_back(p.token);
    masks.push_back(p.mask.to(torch::kFloat));
  }
  const auto idx = torch::tensor(rows, torch::kInt64);
  const auto M = torch::stack(masks);
  double total = 0.0;
  for (const auto& layer : bundle.layers) {
    const auto A = layer.maps.index_select(0, idx);
    const auto m = losses::resample_mask(M, A.size(-2), A.size(-1));
    total += 1.0 - losses::region_loss(A, m, cfg).mean().item<double>();
  }
  return total / static_cast<double>(bundle.layers.size());
}

double mean_attention_overlap(trainer::ScrModel& model, const trainer::PreparedSplit& split, int64_t chunk) {
  torch::NoGradGuard no_grad;
  double sum = 0.0;
  int64_t n = 0;
  for (int64_t s = 0; s < split.size(); s += chunk) {
    const auto count = std::min(chunk, split.size() - s);
    std::vector<std::vector<std::string>> tags(split.tag_texts.begin() + s, split.tag_texts.begin() + s + count);
    const auto cond = model.backbone->embed_batch(tags);
    const auto z = model.backbone->encode(split.lq_up.narrow(0, s, count)).z;
    const auto dn = model.backbone->denoise(z, cond);
    for (int64_t b = 0; b < count; ++b) {
      const auto pairs = split.pairs(s + b);
      if (pairs.empty()) continue;
      sum += attention_overlap(backbone::slice_attention(dn.attention, b, cond.counts[b], tags[b]), pairs);
      ++n;
    }
  }
  if (n == 0) throw ValidationError("no record of the split has a tag with an inherited mask");
  return sum / static_cast<double>(n);
}

namespace {

torch::Tensor rescale01(const torch::Tensor& m) {
  const auto lo = m.min(), hi = m.max();
  const double span = (hi - lo).item<double>();
  if (span <= 0.0) return torch::zeros_like(m);
  return (m - lo) / span;
}

void write_gray(const torch::Tensor& m01, const std::filesystem::path& path) {
  auto u8 = (m01 * 255.0).round().clamp(0, 255).to(torch::kUInt8).contiguous();
  cv::Mat view(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1, u8.data_ptr<uint8_t>());
  if (!cv::imwrite(path.string(), view)) throw IoError("cannot write " + path.string());
}

std::string file_safe(const std::string& s) {
  std::string out;
  for (unsigned char c : s) out.push_back(std::isalnum(c) || c == '-' || c == '.' ? static_cast<char>(c) : '_');
  return out;
}

}  // namespace

torch::Tensor merged_attention(const backbone::AttentionBundle& bundle, int64_t t) {
  if (bundle.layers.empty()) throw ValidationError("attention bundle has no layers");
  int64_t h = 0, w = 0;
  for (const auto& l : bundle.layers) {
    if (l.maps.size(-2) * l.maps.size(-1) > h * w) {
      h = l.maps.size(-2);
      w = l.maps.size(-1);
    }
  }
  auto acc = torch::zeros({h, w}, torch::kDouble);
  for (const auto& l : bundle.layers) {
    auto m = l.maps[t].to(torch::kDouble);
    if (m.size(-2) != h || m.size(-1) != w) {
      m = F::interpolate(m.unsqueeze(0).unsqueeze(0), F::InterpolateFuncOptions()
                                                          .size(std::vector<int64_t>{h, w})
                                                          .mode(torch::kBilinear)
                                                          .align_corners(false))
              .squeeze(0)
              .squeeze(0);
    }
    acc += m;
  }
  return rescale01(acc / static_cast<double>(bundle.layers.size()));
}

std::vector<std::filesystem::path> render_attention(const backbone::AttentionBundle& bundle, const std::string& id,
                                                    const std::filesystem::path& out_dir) {
  torch::NoGradGuard no_grad;
  if (bundle.layers.empty()) throw ValidationError("attention bundle has no layers");
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  for (int64_t t = 0; t < bundle.token_count(); ++t) {
    const std::string tag = t < static_cast<int64_t>(bundle.tags.size()) ? bundle.tags[t] : "token" + std::to_string(t);
    const std::string stem = file_safe(id) + "_" + file_safe(tag) + "_";
    for (const auto& l : bundle.layers) {
      written.push_back(out_dir / (stem + file_safe(l.layer_id) + ".png"));
      write_gray(rescale01(l.maps[t].to(torch::kDouble)), written.back());
    }
    written.push_back(out_dir / (stem + "merged.png"));
    write_gray(merged_attention(bundle, t), written.back());
  }
  return written;
}

// ---------------------------------------------------------------------------
// Timing

double measure_fps(const std::function<void(int64_t)>& run_one, int64_t n, int warmup) {
  if (n < 1) throw ValidationError("measure_fps needs at least one item");
  for (int i = 0; i < warmup; ++i) run_one(i % n);
  const auto t0 = std::chrono::steady_clock::now();
  for (int64_t i = 0; i < n; ++i) run_one(i);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return static_cast<double>(n) / std::max(secs, 1e-12);
}

// ---------------------------------------------------------------------------
// Protocols

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::DT: return "DT";
    case Protocol::R2S: return "R2S";
    case Protocol::FT: return "FT";
  }
  return "?";
}

Protocol protocol_from_string(const std::string& s) {
  if (s == "DT") return Protocol::DT;
  if (s == "R2S") return Protocol::R2S;
  if (s == "FT") return Protocol::FT;
  throw ConfigError("eval.protocol", "unknown protocol '" + s + "' (expected DT, R2S or FT)");
}

void to_json(json& j, const EvalOptions& o) {
  j = json{{"timing", o.timing},
           {"warmup", o.warmup},
           {"restore_tags", o.restore_tags == trainer::TagMode::Null ? "null" : "gt"},
           {"chunk", o.chunk}};
}

void from_json(const json& j, EvalOptions& o) {
  try {
    o.timing = j.value("timing", o.timing);
    o.warmup = j.value("warmup", o.warmup);
    o.chunk = j.value("chunk", o.chunk);
    if (j.contains("restore_tags")) {
      const auto m = j.at("restore_tags").get<std::string>();
      if (m != "gt" && m != "null") throw ConfigError("eval.restore_tags", "expected 'gt' or 'null', got '" + m + "'");
      o.restore_tags = m == "null" ? trainer::TagMode::Null : trainer::TagMode::GroundTruth;
    }
  } catch (const json::type_error& e) {
    throw ConfigError("eval", e.what());
  }
  if (o.warmup < 0) throw ConfigError("eval.warmup", "must be >= 0");
  if (o.chunk < 1) throw ConfigError("eval.chunk", "must be >= 1");
}

json EvalReport::to_json() const {
  json per = json::object();
  for (std::size_t c = 0; c < per_class_iou.size(); ++c) {
    const auto name = c < class_names.size() ? class_names[c] : std::to_string(c);
    per[name] = std::isnan(per_class_iou[c]) ? json(nullptr) : json(per_class_iou[c]);
  }
  json j{{"protocol", to_string(protocol)}, {"miou", miou}, {"per_class_iou", per}, {"images", images},
         {"notes", notes}};
  j["psnr"] = psnr ? json(*psnr) : json(nullptr);
  j["ssim"] = ssim ? json(*ssim) : json(nullptr);
  j["fps"] = fps ? json(*fps) : json(nullptr);
  return j;
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  os << "protocol " << to_string(protocol) << ", " << images << " images\n";
  os << std::left << std::setw(16) << "class" << "IoU\n";
  for (std::size_t c = 0; c < per_class_iou.size(); ++c) {
    os << std::setw(16) << (c < class_names.size() ? class_names[c] : std::to_string(c));
    if (std::isnan(per_class_iou[c])) {
      os << "-\n";
    } else {
      os << std::fixed << std::setprecision(2) << 100.0 * per_class_iou[c] << "\n";
    }
  }
  os << std::setw(16) << "mIoU" << std::fixed << std::setprecision(2) << 100.0 * miou << "\n";
  if (psnr) os << std::setw(16) << "PSNR (dB)" << std::setprecision(2) << *psnr << "\n";
  if (ssim) os << std::setw(16) << "SSIM" << std::setprecision(4) << *ssim << "\n";
  if (fps) os << std::setw(16) << "FPS" << std::setprecision(2) << *fps << "\n";
  for (const auto& n : notes) os << "note: " << n << "\n";
  return os.str();
}

namespace {

void require_segmenter(const EvalModels& m) {
  if (m.segmenter == nullptr) throw ConfigError("eval.segmenter", "a segmentation checkpoint is required");
}

}  // namespace

EvalReport run_protocol(Protocol protocol, EvalModels& models, const trainer::PreparedSplit& split,
                        const EvalOptions& options) {
  require_segmenter(models);
  auto& seg = *models.segmenter;
  if (!split.lq_up.defined()) throw ValidationError("evaluation needs degraded LQ images");
  switch (protocol) {
    case Protocol::DT:
      if (seg.role == "rass") {
        throw ConfigError("eval.segmenter",
                          "DT results are not applicable to RASS checkpoints: the model is trained on degraded "
                          "inputs by construction");
      }
      if (seg.role != "sq") {
        throw ConfigError("eval.segmenter", "DT needs a segmenter trained on clean images (role sq), got role '" +
                                                seg.role + "'");
      }
      break;
    case Protocol::R2S:
      if (models.restorer == nullptr && !models.identity_restorer) {
        throw ConfigError("eval.restorer", "R2S needs a restoration checkpoint or 'identity'");
      }
      break;
    case Protocol::FT:
      if (seg.role != "ft" && seg.role != "rass") {
        throw ConfigError("eval.segmenter", "FT needs a segmenter trained on degraded inputs (role ft or rass), got "
                                            "role '" + seg.role + "'");
      }
      break;
  }

  torch::NoGradGuard no_grad;
  EvalReport report;
  report.protocol = protocol;
  report.class_names = seg.class_names;
  report.images = split.size();
  report.notes.push_back("mIoU accumulates confusion counts over the whole split; classes with an empty union are "
                         "left out of the mean");

  const bool restoring = protocol == Protocol::R2S && !models.identity_restorer;
  auto restore_tags = [&](int64_t s, int64_t n) {
    if (options.restore_tags == trainer::TagMode::Null) {
      return std::vector<std::vector<std::string>>(n, {backbone::kNullTag});
    }
    return std::vector<std::vector<std::string>>(split.tag_texts.begin() + s, split.tag_texts.begin() + s + n);
  };
  auto seg_tags = [&](int64_t s, int64_t n) {
    return std::vector<std::vector<std::string>>(split.tag_texts.begin() + s, split.tag_texts.begin() + s + n);
  };

  ConfusionMatrix cm(split.num_classes());
  double psnr_sum = 0.0, ssim_sum = 0.0;
  for (int64_t s = 0; s < split.size(); s += options.chunk) {
    const auto n = std::min(options.chunk, split.size() - s);
    auto inputs = split.lq_up.narrow(0, s, n);
    if (restoring) inputs = trainer::restore_images(*models.restorer, inputs, restore_tags(s, n), n);
    if (protocol == Protocol::R2S) {
      for (int64_t i = 0; i < n; ++i) {
        psnr_sum += psnr(inputs[i], split.hq[s + i]);
        ssim_sum += ssim(inputs[i], split.hq[s + i]);
      }
    }
    const auto labels = trainer::predict_segmentation(seg, inputs, seg_tags(s, n), n);
    cm.add(labels, split.labels.narrow(0, s, n));
  }
  report.per_class_iou = cm.per_class_iou();
  report.miou = cm.miou();
  if (protocol == Protocol::R2S) {
    report.psnr = psnr_sum / static_cast<double>(split.size());
    report.ssim = ssim_sum / static_cast<double>(split.size());
    report.notes.push_back("SSIM uses a 7x7 uniform window");
    report.notes.push_back(models.identity_restorer ? "restorer: identity (bicubic resample only)"
                                                    : "restorer conditioned on " +
                                                          std::string(options.restore_tags == trainer::TagMode::Null
                                                                          ? "the null tag"
                                                                          : "ground-truth tags"));
  }

  if (options.timing) {
    report.fps = measure_fps(
        [&](int64_t i) {
          auto x = split.lq_up.narrow(0, i, 1);
          if (restoring) x = trainer::restore_images(*models.restorer, x, restore_tags(i, 1), 1);
          trainer::predict_segmentation(seg, x, seg_tags(i, 1), 1);
        },
        split.size(), options.warmup);
    report.notes.push_back("FPS at batch 1 over the split, warm-up excluded, label resolution included");
  }
  log::info("eval " + to_string(protocol) + " mIoU " + c10::str(100.0 * report.miou));
  return report;
}

}  // namespace rass::evalkit
