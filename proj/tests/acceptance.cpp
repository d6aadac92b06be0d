// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: every criterion at its stated tolerance, one PASS/FAIL line
// each. Criteria 8-10 train the desk-scale pipeline (500/100 shapes at 64×64)
// and take most of the runtime.
//
//   rass_acceptance [--work DIR] [--skip-desk]

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "rass/cli.hpp"
#include "rass/errors.hpp"
#include "rass/evalkit.hpp"
#include "rass/losses.hpp"
#include "rass/lora.hpp"
#include "rass/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rass;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

torch::TensorOptions f64() { return torch::TensorOptions().dtype(torch::kDouble); }

struct Verdict {
  int id;
  bool pass;
  std::string detail;
};

std::vector<Verdict> verdicts;

void report(int id, bool pass, const std::string& detail) {
  verdicts.push_back({id, pass, detail});
  std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

/// Runs one criterion; an escaped exception counts as a failure.
void criterion(int id, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(id, false, std::string("threw: ") + e.what());
  }
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

/// True when both trees hold the same relative paths with identical bytes.
/// Timestamped run logs are not outputs and are skipped.
bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  auto output = [](const fs::directory_entry& e) { return e.is_regular_file() && e.path().extension() != ".log"; };
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (output(e)) files.push_back(fs::relative(e.path(), a));
  }
  std::size_t count_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) count_b += output(e);
  if (files.size() != count_b) {
    why = "file counts differ";
    return false;
  }
  for (const auto& rel : files) {
    if (!fs::exists(b / rel) || slurp(a / rel) != slurp(b / rel)) {
      why = rel.string() + " differs";
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Criteria 1-6: loss and metric properties

void gradient_checks() {
  const auto t0 = Clock::now();
  torch::manual_seed(101);
  losses::PerceptualNet net;
  std::vector<std::pair<std::string, double>> worst;
  auto check = [&](const std::string& name, const std::function<double()>& fixture) {
    double w = 0;
    for (int i = 0; i < 20; ++i) w = std::max(w, fixture());
    worst.emplace_back(name, w);
  };
  check("region", [] {
    auto A = torch::rand({5, 5}, f64()) * 0.9 + 0.05;
    auto M = (torch::rand({5, 5}, f64()) > 0.5).to(torch::kDouble);
    return oracle::max_fd_error([&](const torch::Tensor& a) { return losses::region_loss(a, M, {}); }, A);
  });
  check("pixel", [] {
    auto A = torch::rand({5, 5}, f64()) * 0.9 + 0.05;
    auto M = (torch::rand({5, 5}, f64()) > 0.5).to(torch::kDouble);
    return oracle::max_fd_error([&](const torch::Tensor& a) { return losses::pixel_loss(a, M, {}); }, A);
  });
  check("dice", [] {
    auto p = torch::rand({5, 5}, f64());
    auto g = (torch::rand({5, 5}, f64()) > 0.5).to(torch::kDouble);
    return oracle::max_fd_error([&](const torch::Tensor& q) { return losses::dice_loss(q, g); }, p);
  });
  check("restoration", [&net] {
    auto x = torch::rand({3, 8, 8}, f64());
    auto y = torch::rand({3, 8, 8}, f64());
    return oracle::max_fd_error([&](const torch::Tensor& a) { return losses::restoration_loss(a, y, {}, net); }, x);
  });
  int fixture_index = 0;
  check("segmentation", [&fixture_index] {
    auto cls = torch::randn({3, 5}, f64());
    auto masks = torch::randn({3, 4, 4}, f64());
    losses::SegTarget gt{{static_cast<int64_t>(fixture_index++ % 4), 3},
                         (torch::rand({2, 4, 4}, f64()) > 0.5).to(torch::kDouble)};
    const double a = oracle::max_fd_error(
        [&](const torch::Tensor& c) { return losses::segmentation_loss({c, masks}, gt, {}); }, cls);
    const double b = oracle::max_fd_error(
        [&](const torch::Tensor& m) { return losses::segmentation_loss({cls, m}, gt, {}); }, masks);
    return std::max(a, b);
  });
  const double elapsed = seconds_since(t0);
  bool pass = elapsed < 60.0;
  std::string detail;
  for (const auto& [name, w] : worst) {
    pass = pass && w < 1e-4;
    detail += name + " " + fmt(w, 3) + ", ";
  }
  report(1, pass, "max rel err: " + detail + "time " + fmt(elapsed, 3) + " s");
}

void hand_values() {
  auto A = torch::full({4, 4}, 0.5, f64());
  auto M = torch::zeros({4, 4}, f64());
  M.index_put_({torch::indexing::Slice(0, 2), torch::indexing::Slice(0, 2)}, 1.0);
  const double region = losses::region_loss(A, M, {}).item<double>();
  const double pixel = losses::pixel_loss(A, M, {}).item<double>();
  auto g = torch::zeros({4, 4}, f64());
  g.view(-1).narrow(0, 0, 8).fill_(1.0);
  const double dice = losses::dice_loss(torch::zeros({4, 4}, f64()), g, 1.0).item<double>();
  const bool pass = std::abs(region - 0.75) < 1e-6 && std::abs(pixel - std::log(2.0)) < 1e-6 &&
                    std::abs(dice - 8.0 / 9.0) < 1e-6;
  report(2, pass, "region " + fmt(region, 9) + ", pixel " + fmt(pixel, 9) + ", dice " + fmt(dice, 9));
}

torch::Tensor denoiser_eps(backbone::Backbone& m, const torch::Tensor& z) {
  torch::NoGradGuard g;
  return m->denoise(z, m->embed_batch({{"circle", "ring"}, {"square"}})).eps;
}

void lora_merge() {
  const auto t0 = Clock::now();
  const auto d = fixture::tiny_data("accept_lora", 8, 2);
  auto base = fixture::tiny_base(d);
  auto cfg = fixture::quick(trainer::Stage::SCR, 30);
  cfg.lr = 1e-2;
  auto scr = trainer::train_scr(base, d.train, cfg, {}, {});
  double max_b = 0;
  for (const auto& [_, e] : scr.model.adapters.entries) max_b = std::max(max_b, e.B.abs().max().item<double>());

  auto merged = backbone::clone_backbone(base);
  lora::attach(*merged, scr.model.adapters);
  torch::manual_seed(303);
  std::vector<torch::Tensor> zs, adapted;
  const auto& bc = base->config();
  for (int i = 0; i < 100; ++i) {
    zs.push_back(torch::randn({2, bc.latent_channels, 8, 8}));
    adapted.push_back(denoiser_eps(merged, zs.back()));
  }
  lora::merge(*merged);
  double merge_err = 0;
  for (int i = 0; i < 100; ++i) {
    merge_err = std::max(merge_err, (denoiser_eps(merged, zs[i]) - adapted[i]).abs().max().item<double>());
  }

  auto stage2 = backbone::clone_backbone(base);
  lora::InjectSpec seg_spec;
  seg_spec.seed = 7;
  lora::init_stage2(*stage2, scr.model.adapters, seg_spec);
  double init_err = 0;
  for (int i = 0; i < 100; ++i) {
    init_err = std::max(init_err, (denoiser_eps(stage2, zs[i]) - adapted[i]).abs().max().item<double>());
  }
  const double elapsed = seconds_since(t0);
  const bool pass = max_b > 0 && merge_err < 1e-5 && init_err < 1e-5 && elapsed < 60.0;
  report(3, pass,
         "merge max diff " + fmt(merge_err, 3) + ", init_stage2 max diff " + fmt(init_err, 3) + " (trained |B| max " +
             fmt(max_b, 3) + "), time " + fmt(elapsed, 3) + " s");
}

void matching_oracle() {
  torch::manual_seed(404);
  std::mt19937_64 rng(404);
  int agree = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t Q = 1 + static_cast<int64_t>(rng() % 6);
    const int64_t G = 1 + static_cast<int64_t>(rng() % Q);
    losses::SegPrediction p{torch::randn({Q, 5}), torch::randn({Q, 6, 6}) * 2};
    losses::SegTarget g;
    for (int64_t i = 0; i < G; ++i) g.classes.push_back(static_cast<int64_t>(rng() % 4));
    g.masks = (torch::rand({G, 6, 6}) > 0.5).to(torch::kFloat);
    const auto cost = losses::matching_cost(p, g, {});
    double got = 0;
    for (const auto& [q, gi] : losses::hungarian_match(p, g, {})) got += cost[gi][q];
    agree += got == oracle::brute_force_assignment(cost);
  }
  report(4, agree == 200, std::to_string(agree) + "/200 matrices equal brute force exactly");
}

void miou_oracle() {
  torch::manual_seed(505);
  int agree = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto gt = torch::randint(0, 4, {16, 16}, torch::kInt64);
    gt.masked_fill_(torch::rand({16, 16}) < 0.05, evalkit::kIgnore);
    const auto pred = torch::randint(0, 4, {16, 16}, torch::kInt64);
    const auto want = oracle::confusion_miou(pred, gt, 4);
    const auto got = evalkit::miou(pred, gt, 4);
    bool same = got.miou == want.miou;
    for (int c = 0; c < 4; ++c) {
      same = same && (std::isnan(want.per_class[c]) ? std::isnan(got.per_class_iou[c])
                                                     : got.per_class_iou[c] == want.per_class[c]);
    }
    agree += same;
  }
  report(5, agree == 100, std::to_string(agree) + "/100 maps equal the confusion-count recomputation exactly");
}

void scl_exclusion() {
  torch::manual_seed(606);
  int agree = 0;
  for (int i = 0; i < 50; ++i) {
    backbone::AttentionBundle b;
    for (int64_t r : {16, 8, 4}) {
      auto raw = torch::softmax(torch::randn({3, r, r}), 0);
      b.layers.push_back({"l" + std::to_string(r), r, raw, raw / raw.amax({1, 2}, true)});
    }
    auto mask = (torch::rand({32, 32}) > 0.5).to(torch::kFloat);
    const std::vector<losses::MatchedPair> pairs{{"circle", 0, mask}, {"ring", 2, 1 - mask}};
    const auto before = losses::scl_loss(b, pairs, {});
    auto extended = b;
    for (auto& l : extended.layers) {
      l.raw = torch::cat({l.raw, torch::rand({1, l.raw.size(1), l.raw.size(2)})});
      l.maps = torch::cat({l.maps, torch::rand({1, l.maps.size(1), l.maps.size(2)})});
    }
    agree += torch::equal(before, losses::scl_loss(extended, pairs, {}));
  }
  report(6, agree == 50, std::to_string(agree) + "/50 fixtures bit-identical with an extra mask-less tag");
}

// ---------------------------------------------------------------------------
// Criterion 7: determinism through the command line

void determinism(const fs::path& work, const fs::path& desk_data) {
  const auto dir = work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);

  const auto manifest = (desk_data / "manifest.json").string();
  // Both runs write to the same directory so the recorded options agree; the
  // first is snapshotted before the second.
  for (const char* snapshot : {"deg_a", "deg_b"}) {
    fs::remove_all(dir / "deg");
    if (cli::dispatch({"degrade", "--manifest", manifest, "--out", (dir / "deg").string(), "--seed", "11"}) !=
        cli::kOk) {
      throw std::runtime_error("degrade run failed");
    }
    fs::rename(dir / "deg", dir / snapshot);
  }
  std::string why;
  const bool degrade_same = same_tree(dir / "deg_a", dir / "deg_b", why);
  std::size_t files_compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "deg_a")) {
    files_compared += e.is_regular_file() && e.path().extension() != ".log";
  }

  // Two train-scr runs on a tiny backbone trained once.
  json tiny;
  tiny["backbone"] = {{"ae_widths", {8, 8, 8}}, {"denoiser_widths", {8, 16, 16}}, {"embed_dim", 16}};
  tiny["train"]["ae"] = {{"steps", 20}, {"denoiser_steps", 20}, {"min_psnr", 0.0}, {"target_psnr", 0.0}};
  tiny["train"]["scr"] = {{"steps", 25}, {"batch_size", 4}, {"log_every", 1}};
  const auto cfg = (dir / "tiny.json").string();
  std::ofstream(cfg) << tiny.dump(2);
  const auto deg = (dir / "deg_a/manifest.json").string();
  auto ok = [](int code) {
    if (code != cli::kOk) throw std::runtime_error("command exited with " + std::to_string(code));
  };
  ok(cli::dispatch({"build-mapping", "--manifest", deg, "--out", (dir / "map").string()}));
  ok(cli::dispatch({"pretrain-ae", "--manifest", deg, "--out", (dir / "ae").string(), "--config", cfg}));
  for (const char* run : {"scr_a", "scr_b"}) {
    ok(cli::dispatch({"train-scr", "--manifest", deg, "--backbone", (dir / "ae/backbone.ckpt").string(), "--mapping",
                      (dir / "map/mapping.json").string(), "--out", (dir / run).string(), "--seed", "5", "--config",
                      cfg}));
  }
  const auto log_a = slurp(dir / "scr_a/train_log.jsonl");
  const auto log_b = slurp(dir / "scr_b/train_log.jsonl");
  const auto lines = std::count(log_a.begin(), log_a.end(), '\n');
  const bool scr_same = !log_a.empty() && log_a == log_b;
  report(7, degrade_same && scr_same,
         std::string("degrade outputs ") + (degrade_same ? "byte-identical (" + std::to_string(files_compared) + " files, run.log excluded)"
                                       : "differ (" + why + ")") +
             ", train-scr trajectories " + (scr_same ? "identical" : "differ") + " (" + std::to_string(lines) +
             " records)");
}

// ---------------------------------------------------------------------------
// Criteria 8-10: desk-scale pipeline

struct SegScores {
  std::vector<double> miou;  // one per seed, in points
  double mean() const {
    double s = 0;
    for (double v : miou) s += v;
    return miou.empty() ? 0.0 : s / static_cast<double>(miou.size());
  }
  std::string list() const {
    std::string out;
    for (double v : miou) out += (out.empty() ? "" : "/") + fmt(v, 4);
    return out;
  }
};

struct Desk {
  trainer::PreparedSplit train, val;
  backbone::Backbone base{nullptr};
  double ae_psnr = 0;
  double pipeline_seconds = 0;  // data + autoencoder + SCR
  int scr_steps = 0;
};

double mean_psnr(const torch::Tensor& a, const torch::Tensor& b) {
  double s = 0;
  for (int64_t i = 0; i < a.size(0); ++i) s += evalkit::psnr(a[i], b[i]);
  return s / static_cast<double>(a.size(0));
}

SegScores ras_scores(Desk& d, const std::optional<lora::AdapterSet>& scr, const std::vector<std::uint64_t>& seeds) {
  SegScores out;
  for (auto seed : seeds) {
    auto cfg = trainer::TrainConfig::defaults(trainer::Stage::RAS);
    cfg.seed = seed;
    cfg.log_every = 0;
    lora::InjectSpec spec;
    spec.seed = seed;
    auto ras = trainer::train_ras(d.base, scr, d.train, cfg, {}, spec, scr ? "rass" : "ft");
    evalkit::EvalModels m;
    m.segmenter = &ras.model;
    out.miou.push_back(100.0 * evalkit::run_protocol(evalkit::Protocol::FT, m, d.val).miou);
    std::printf("  RAS %s seed %llu: val mIoU %.2f\n", scr ? "from SCR" : "from base",
                static_cast<unsigned long long>(seed), out.miou.back());
    std::fflush(stdout);
  }
  return out;
}

// The full SCR budget the restoration criterion allows.
constexpr int kScrSteps = 5000;

/// Mean of a logged component over the first and the last 10% of steps.
std::pair<double, double> first_last_tenth(const std::vector<trainer::StepRecord>& log, const std::string& key) {
  const std::size_t n = std::max<std::size_t>(1, log.size() / 10);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < n && i < log.size(); ++i) {
    first += log[i].values.at(key) / static_cast<double>(n);
    last += log[log.size() - 1 - i].values.at(key) / static_cast<double>(n);
  }
  return {first, last};
}

trainer::ScrResult train_scr_variant(Desk& d, const losses::LossConfig& lc, const char* label) {
  const auto t0 = Clock::now();
  auto cfg = trainer::TrainConfig::defaults(trainer::Stage::SCR);
  cfg.steps = kScrSteps;
  cfg.log_every = 0;
  auto r = trainer::train_scr(d.base, d.train, cfg, lc, {});
  std::printf("  SCR (%s): %d steps in %.0f s\n", label, cfg.steps, seconds_since(t0));
  std::fflush(stdout);
  return r;
}

void desk_scale(const fs::path& data_dir, Clock::time_point started) {
  Desk d;
  const auto manifest = datakit::load_manifest(data_dir / "deg/manifest.json");
  const auto table = trainer::default_mapping(manifest);
  d.train = trainer::prepare_split(datakit::load_split(manifest, "train"), manifest.class_names, table);
  d.val = trainer::prepare_split(datakit::load_split(manifest, "val"), manifest.class_names, table);

  auto ae_cfg = trainer::TrainConfig::defaults(trainer::Stage::AE);
  ae_cfg.log_every = 0;
  auto ae = trainer::pretrain_autoencoder(d.train, d.val, backbone::BackboneConfig{}, ae_cfg);
  d.base = ae.model;
  d.ae_psnr = ae.val_psnr;
  std::printf("  autoencoder val PSNR %.2f dB after %.0f s\n", d.ae_psnr, seconds_since(started));
  std::fflush(stdout);

  const losses::LossConfig with_scl;
  auto zero_cfg = trainer::TrainConfig::defaults(trainer::Stage::SCR);
  zero_cfg.steps = 0;
  auto step0 = trainer::train_scr(d.base, d.train, zero_cfg, with_scl, {});
  const double overlap0 = evalkit::mean_attention_overlap(step0.model, d.val);

  auto scr = train_scr_variant(d, with_scl, "default weights");
  d.scr_steps = kScrSteps;
  d.pipeline_seconds = seconds_since(started);

  const double bicubic = mean_psnr(d.val.lq_up, d.val.hq);
  const double restored = mean_psnr(trainer::restore_images(scr.model, d.val.lq_up, d.val.tag_texts), d.val.hq);
  const double overlap = evalkit::mean_attention_overlap(scr.model, d.val);
  const double gain = restored - bicubic;
  const auto [scl_first, scl_last] = first_last_tenth(scr.log, "l_scl");
  std::printf("  L_SCL mean over first 10%% of steps %.6g, last 10%% %.6g\n", scl_first, scl_last);
  report(8, gain >= 2.0 && overlap > overlap0 && d.scr_steps <= 5000 && d.pipeline_seconds <= 3 * 3600.0,
         "val PSNR " + fmt(restored) + " vs bicubic " + fmt(bicubic) + " (gain " + fmt(gain, 3) +
             " dB, need >= 2), overlap " + fmt(overlap) + " vs step-0 " + fmt(overlap0) + ", " +
             std::to_string(d.scr_steps) + " SCR steps, " + fmt(d.pipeline_seconds / 60.0, 3) + " min");

  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const auto from_scr = ras_scores(d, scr.model.adapters, seeds);
  const auto fresh = ras_scores(d, std::nullopt, seeds);
  report(9, from_scr.mean() >= fresh.mean() + 2.0,
         "val mIoU from SCR " + fmt(from_scr.mean()) + " (" + from_scr.list() + ") vs fresh base " +
             fmt(fresh.mean()) + " (" + fresh.list() + "), need margin >= 2 points");

  losses::LossConfig no_scl;
  no_scl.lambda_region = 0.0;
  no_scl.lambda_pixel = 0.0;
  auto scr0 = train_scr_variant(d, no_scl, "lambda = 0");
  const double overlap_l0 = evalkit::mean_attention_overlap(scr0.model, d.val);
  const auto from_scr0 = ras_scores(d, scr0.model.adapters, seeds);
  report(10, overlap > overlap_l0 && from_scr.mean() >= from_scr0.mean() - 0.5,
         "overlap " + fmt(overlap) + " vs lambda=0 " + fmt(overlap_l0) + ", mIoU " + fmt(from_scr.mean()) +
             " vs lambda=0 " + fmt(from_scr0.mean()) + " (" + from_scr0.list() + "), need >= lambda=0 - 0.5");
}

// ---------------------------------------------------------------------------
// Criterion 11: protocol harness

void protocol_harness(const fs::path& work) {
  const auto d = fixture::tiny_data("accept_protocol", 8, 4);
  auto base = fixture::tiny_base(d);
  auto sq_cfg = fixture::quick(trainer::Stage::RAS, 5);
  sq_cfg.train_on_hq = true;
  auto sq = trainer::train_ras(base, std::nullopt, d.train, sq_cfg, {}, {}, "sq");
  evalkit::EvalModels m;
  m.segmenter = &sq.model;
  const auto dt = evalkit::run_protocol(evalkit::Protocol::DT, m, d.val);
  m.identity_restorer = true;
  const auto r2s = evalkit::run_protocol(evalkit::Protocol::R2S, m, d.val);
  bool identical = dt.miou == r2s.miou && dt.per_class_iou.size() == r2s.per_class_iou.size();
  for (std::size_t c = 0; identical && c < dt.per_class_iou.size(); ++c) {
    const double a = dt.per_class_iou[c], b = r2s.per_class_iou[c];
    identical = (std::isnan(a) && std::isnan(b)) || a == b;
  }

  auto scr = trainer::train_scr(base, d.train, fixture::quick(trainer::Stage::SCR, 3), {}, {});
  auto rass = trainer::train_ras(base, scr.model.adapters, d.train, fixture::quick(trainer::Stage::RAS, 3), {}, {},
                                 "rass");
  const auto path = work / "protocol_rass.ckpt";
  trainer::save_ras(rass.model, path);
  auto loaded = trainer::load_ras(path);
  evalkit::EvalModels rm;
  rm.segmenter = &loaded;
  std::string field;
  try {
    evalkit::run_protocol(evalkit::Protocol::DT, rm, d.val);
  } catch (const ConfigError& e) {
    field = e.field();
  }
  report(11, identical && field == "eval.segmenter",
         std::string("R2S(identity) ") + (identical ? "bit-identical to" : "differs from") + " DT (mIoU " +
             fmt(dt.miou, 6) + "), DT on RASS checkpoint " +
             (field.empty() ? "did not raise" : "raised ConfigError on " + field));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run"};
  std::string work = (fs::temp_directory_path() / "rass_acceptance").string();
  bool skip_desk = false;
  app.add_option("--work", work, "scratch directory");
  app.add_flag("--skip-desk", skip_desk, "skip the desk-scale training criteria (8-10)");
  CLI11_PARSE(app, argc, argv);

  const auto started = Clock::now();
  const fs::path dir(work);
  fs::remove_all(dir);
  fs::create_directories(dir);

  criterion(1, gradient_checks);
  criterion(2, hand_values);
  criterion(3, lora_merge);
  criterion(4, matching_oracle);
  criterion(5, miou_oracle);
  criterion(6, scl_exclusion);

  // Desk-scale data, shared by criteria 7-10.
  const auto data = dir / "desk";
  const auto desk_started = Clock::now();
  int synth = cli::dispatch({"synth", "--out", (data / "data").string(), "--seed", "7"});
  if (synth == cli::kOk) {
    synth = cli::dispatch({"degrade", "--manifest", (data / "data/manifest.json").string(), "--out",
                           (data / "deg").string(), "--seed", "7"});
  }
  criterion(7, [&] {
    if (synth != cli::kOk) throw std::runtime_error("synth/degrade exited with " + std::to_string(synth));
    determinism(dir, data / "data");
  });

  if (skip_desk) {
    for (int id : {8, 9, 10}) report(id, false, "skipped (--skip-desk)");
  } else {
    criterion(8, [&] {
      if (synth != cli::kOk) throw std::runtime_error("synth/degrade exited with " + std::to_string(synth));
      desk_scale(data, desk_started);
    });
    // A throw inside the desk run leaves 9 and 10 unreported.
    for (int id : {9, 10}) {
      bool seen = false;
      for (const auto& v : verdicts) seen = seen || v.id == id;
      if (!seen) report(id, false, "desk-scale run did not reach this criterion");
    }
  }

  criterion(11, [&] { protocol_harness(dir); });

  int passed = 0;
  for (const auto& v : verdicts) passed += v.pass;
  std::printf("acceptance: %d/%zu criteria passed in %.1f min\n", passed, verdicts.size(),
              seconds_since(started) / 60.0);
  return passed == static_cast<int>(verdicts.size()) ? 0 : 1;
}
