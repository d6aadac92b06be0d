// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "rass/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "rass/backbone.hpp"
#include "rass/datakit.hpp"
#include "rass/degrade.hpp"
#include "rass/errors.hpp"
#include "rass/evalkit.hpp"
#include "rass/log.hpp"
#include "rass/lora.hpp"
#include "rass/losses.hpp"
#include "rass/rng.hpp"
#include "rass/tagmap.hpp"
#include "rass/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace rass::cli {

namespace {

const std::map<std::string, std::string> kSummaries = {
    {"synth", "render the synthetic shapes dataset"},
    {"degrade", "synthesize LQ images with recorded recipes"},
    {"build-mapping", "map open-vocabulary tags onto segmentation classes"},
    {"pretrain-ae", "train the autoencoder and the denoiser base"},
    {"train-scr", "train the restoration adapters"},
    {"train-ras", "train the segmentation adapters and head"},
    {"eval", "run a DT, R2S or FT evaluation"},
    {"viz-attn", "write cross-attention heatmaps"},
};

// ---------------------------------------------------------------------------
// Config handling

json read_json_file(const fs::path& path, const std::string& field) {
  std::ifstream in(path);
  if (!in) throw ConfigError(field, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(field, path.string() + " is not valid JSON: " + e.what());
  }
}

template <typename T>
json round_trip(const json& user, const std::string& field) {
  T value;
  try {
    if (!user.is_null()) {
      if (!user.is_object()) throw ConfigError(field, "must be an object");
      user.get_to(value);
    }
  } catch (const json::exception& e) {
    throw ConfigError(field, e.what());
  }
  return value;
}

trainer::TrainConfig stage_config(const json& cfg, trainer::Stage stage) {
  static const std::map<trainer::Stage, std::string> keys = {
      {trainer::Stage::AE, "ae"}, {trainer::Stage::SCR, "scr"}, {trainer::Stage::RAS, "ras"}};
  auto c = trainer::TrainConfig::defaults(stage);
  json j = cfg.at("train").value(keys.at(stage), json::object());
  j["stage"] = trainer::to_string(stage);
  try {
    trainer::from_json(j, c);
  } catch (const json::exception& e) {
    throw ConfigError("train." + keys.at(stage), e.what());
  }
  c.validate();
  return c;
}

// Run-level inputs (paths, seeds, budgets) as given on the command line or in
// the `run` section of a config file.
struct Options {
  std::map<std::string, std::string> values;
  std::map<std::string, bool> flags;

  bool has(const std::string& k) const {
    auto it = values.find(k);
    return it != values.end() && !it->second.empty();
  }
  const std::string& get(const std::string& k) const { return values.at(k); }
  std::string require(const std::string& k, const std::string& field) const {
    if (!has(k)) throw ConfigError(field, "--" + k + " is required");
    return values.at(k);
  }
  template <typename T>
  std::optional<T> number(const std::string& k, const std::string& field) const {
    if (!has(k)) return std::nullopt;
    try {
      std::size_t used = 0;
      T v;
      if constexpr (std::is_floating_point_v<T>) {
        v = static_cast<T>(std::stod(values.at(k), &used));
      } else {
        v = static_cast<T>(std::stoll(values.at(k), &used));
      }
      if (used != values.at(k).size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(field, "'" + values.at(k) + "' is not a number");
    }
  }

  json to_json() const {
    json j = json::object();
    for (const auto& [k, v] : values) {
      if (!v.empty()) j[k] = v;
    }
    for (const auto& [k, v] : flags) {
      if (v) j[k] = true;
    }
    return j;
  }
};

struct Run {
  std::string command;
  Options opts;
  json config;      // resolved sections
  fs::path out;
};

void start_run(Run& run) {
  run.out = run.opts.require("out", "run.out");
  fs::create_directories(run.out);
  log::set_file(run.out / "run.log");
  json resolved = run.config;
  resolved["run"] = {{"command", run.command}, {"options", run.opts.to_json()}};
  std::ofstream out(run.out / "config.resolved", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (run.out / "config.resolved").string());
  out << resolved.dump(2) << "\n";
  log::info("rass " + run.command + " -> " + run.out.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------
// Shared loading

datakit::DatasetManifest manifest_of(const Run& run) {
  const fs::path p = run.opts.require("manifest", "run.manifest");
  if (!fs::exists(p)) throw ConfigError("run.manifest", "no manifest at " + p.string());
  return datakit::load_manifest(p);
}

tagmap::MappingTable mapping_of(const Run& run, const datakit::DatasetManifest& manifest) {
  if (run.opts.has("mapping")) return tagmap::load_mapping(run.opts.get("mapping"));
  return trainer::default_mapping(manifest, run.config.at("data").value("mapping_threshold", 0.5));
}

trainer::PreparedSplit split_of(const datakit::DatasetManifest& manifest, const std::string& name,
                                const tagmap::MappingTable& table) {
  auto records = datakit::load_split(manifest, name);
  if (records.empty()) throw ConfigError("run.split", "the manifest has no '" + name + "' records");
  return trainer::prepare_split(records, manifest.class_names, table);
}

backbone::Backbone backbone_of(const Run& run) {
  const fs::path p = run.opts.require("backbone", "run.backbone");
  if (!fs::exists(p)) throw ConfigError("run.backbone", "no checkpoint at " + p.string());
  return backbone::load_backbone(p);
}

trainer::StepSink jsonl_sink(const fs::path& path, std::shared_ptr<trainer::JsonlWriter>& keep) {
  keep = std::make_shared<trainer::JsonlWriter>(path);
  auto w = keep;
  return [w](const trainer::StepRecord& r) { w->write(r); };
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_synth(Run& run) {
  auto data = run.config.at("data").get<datakit::ShapesConfig>();
  if (auto v = run.opts.number<int>("n-train", "data.n_train")) data.n_train = *v;
  if (auto v = run.opts.number<int>("n-val", "data.n_val")) data.n_val = *v;
  if (auto v = run.opts.number<int>("image-size", "data.image_size")) data.image_size = *v;
  if (auto v = run.opts.number<int>("num-classes", "data.num_classes")) data.num_classes = *v;
  data.validate();
  const auto seed = run.opts.number<std::uint64_t>("seed", "run.seed").value_or(0);
  run.config["data"].update(json(data));
  start_run(run);
  const auto m = datakit::generate_shapes_dataset(data, seed, run.out);
  log::info("wrote " + std::to_string(m.records.size()) + " records to " + (run.out / "manifest.json").string());
}

void cmd_degrade(Run& run) {
  const auto manifest = manifest_of(run);
  auto cfg = run.config.at("degrade").get<degrade::DegradeConfig>();
  if (!run.config.at("degrade").contains("scale")) cfg.scale = manifest.scale;
  cfg.validate();
  const auto seed = run.opts.number<std::uint64_t>("seed", "run.seed").value_or(0);
  run.config["degrade"] = cfg;
  start_run(run);
  const auto m = datakit::degrade_dataset(manifest, cfg, seed, run.out);
  log::info("degraded " + std::to_string(m.records.size()) + " records");
}

void cmd_build_mapping(Run& run) {
  const auto manifest = manifest_of(run);
  double threshold = run.config.at("data").value("mapping_threshold", 0.5);
  if (auto v = run.opts.number<double>("threshold", "data.mapping_threshold")) threshold = *v;
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("data.mapping_threshold", "must lie in [0, 1]");
  run.config["data"]["mapping_threshold"] = threshold;
  std::map<std::string, std::string> overrides;
  if (run.opts.has("overrides")) overrides = tagmap::load_overrides(run.opts.get("overrides"));
  tagmap::Similarity sim = tagmap::trigram_similarity;
  if (run.opts.has("similarity") && run.opts.get("similarity") != "trigram") {
    if (!fs::exists(run.opts.get("similarity"))) {
      throw ConfigError("run.similarity", "expected 'trigram' or a score table file, got " + run.opts.get("similarity"));
    }
    sim = tagmap::TableSimilarity::from_file(run.opts.get("similarity"));
  }
  start_run(run);
  std::set<std::string> open;
  for (const auto& r : manifest.records) {
    for (const auto& t : datakit::load_tags(r.tags_path)) {
      if (t.source == datakit::TagSource::Open) open.insert(t.text);
    }
  }
  const auto table = tagmap::build_mapping({open.begin(), open.end()}, manifest.class_names, sim, threshold, overrides);
  tagmap::save_mapping(table, run.out / "mapping.json");
  std::ostringstream os;
  for (const auto& tag : open) {
    const auto it = table.entries.find(tag);
    os << tag << " -> " << (it == table.entries.end() ? "(discarded)" : it->second.category + " " +
                                                                            c10::str(it->second.score))
       << "\n";
  }
  write_text(run.out / "mapping.txt", os.str());
  log::info("mapped " + std::to_string(table.entries.size()) + " of " + std::to_string(open.size()) + " open tags");
}

void cmd_pretrain_ae(Run& run) {
  const auto manifest = manifest_of(run);
  auto tc = stage_config(run.config, trainer::Stage::AE);
  if (auto v = run.opts.number<std::uint64_t>("seed", "train.ae.seed")) tc.seed = *v;
  if (auto v = run.opts.number<int>("steps", "train.ae.steps")) tc.steps = *v;
  if (auto v = run.opts.number<int>("denoiser-steps", "train.ae.denoiser_steps")) tc.denoiser_steps = *v;
  tc.validate();
  auto bcfg = run.config.at("backbone").get<backbone::BackboneConfig>();
  bcfg.validate();
  run.config["train"]["ae"] = tc;
  start_run(run);
  const auto table = mapping_of(run, manifest);
  const auto train = split_of(manifest, "train", table);
  const auto val = split_of(manifest, "val", table);
  std::shared_ptr<trainer::JsonlWriter> w;
  auto result = trainer::pretrain_autoencoder(train, val, bcfg, tc, jsonl_sink(run.out / "train_log.jsonl", w));
  backbone::save_backbone(result.model, run.out / "backbone.ckpt", {{"val_psnr", result.val_psnr}});
  write_text(run.out / "metrics.json", json{{"val_psnr", result.val_psnr}}.dump(2) + "\n");
}

void cmd_train_scr(Run& run) {
  const auto manifest = manifest_of(run);
  auto tc = stage_config(run.config, trainer::Stage::SCR);
  if (auto v = run.opts.number<std::uint64_t>("seed", "train.scr.seed")) tc.seed = *v;
  if (auto v = run.opts.number<int>("steps", "train.scr.steps")) tc.steps = *v;
  if (auto v = run.opts.number<double>("lr", "train.scr.lr")) tc.lr = *v;
  tc.validate();
  auto loss = run.config.at("loss").get<losses::LossConfig>();
  if (auto v = run.opts.number<double>("lambda-region", "loss.lambda_region")) loss.lambda_region = *v;
  if (auto v = run.opts.number<double>("lambda-pixel", "loss.lambda_pixel")) loss.lambda_pixel = *v;
  loss.validate();
  auto spec = run.config.at("lora").get<lora::InjectSpec>();
  spec.seed = mix_seed(tc.seed, 0x5c);
  spec.validate();
  run.config["train"]["scr"] = tc;
  run.config["loss"] = loss;
  auto base = backbone_of(run);
  start_run(run);
  const auto train = split_of(manifest, "train", mapping_of(run, manifest));
  std::shared_ptr<trainer::JsonlWriter> w;
  auto result = trainer::train_scr(base, train, tc, loss, spec, jsonl_sink(run.out / "train_log.jsonl", w),
                                   {run.out / "scr_last_good.ckpt"});
  trainer::save_scr(result.model, run.out / "scr.ckpt");
}

void cmd_train_ras(Run& run) {
  const auto manifest = manifest_of(run);
  auto tc = stage_config(run.config, trainer::Stage::RAS);
  if (auto v = run.opts.number<std::uint64_t>("seed", "train.ras.seed")) tc.seed = *v;
  if (auto v = run.opts.number<int>("steps", "train.ras.steps")) tc.steps = *v;
  std::string role = run.opts.has("role") ? run.opts.get("role") : (run.opts.has("scr") ? "rass" : "ft");
  if (role != "rass" && role != "ft" && role != "sq") throw ConfigError("run.role", "expected rass, ft or sq");
  if (role == "rass" && !run.opts.has("scr")) throw ConfigError("run.scr", "role rass needs --scr");
  if (role != "rass" && run.opts.has("scr")) throw ConfigError("run.scr", "only role rass starts from SCR adapters");
  if (role == "sq") tc.train_on_hq = true;
  tc.validate();
  auto loss = run.config.at("loss").get<losses::LossConfig>();
  loss.validate();
  auto spec = run.config.at("lora").get<lora::InjectSpec>();
  spec.seed = mix_seed(tc.seed, 0x5e);
  spec.validate();
  run.config["train"]["ras"] = tc;
  run.opts.values["role"] = role;
  auto base = backbone_of(run);
  std::optional<lora::AdapterSet> scr;
  if (run.opts.has("scr")) {
    if (!fs::exists(run.opts.get("scr"))) throw ConfigError("run.scr", "no checkpoint at " + run.opts.get("scr"));
    scr = trainer::load_scr(run.opts.get("scr")).adapters;
  }
  start_run(run);
  const auto train = split_of(manifest, "train", mapping_of(run, manifest));
  std::shared_ptr<trainer::JsonlWriter> w;
  auto result = trainer::train_ras(base, scr, train, tc, loss, spec, role, jsonl_sink(run.out / "train_log.jsonl", w),
                                   {run.out / "segmenter_last_good.ckpt"});
  trainer::save_ras(result.model, run.out / "segmenter.ckpt");
}

void cmd_eval(Run& run) {
  if (!run.opts.has("protocol")) throw ConfigError("eval.protocol", "--protocol is required (DT, R2S or FT)");
  const auto protocol = evalkit::protocol_from_string(run.opts.get("protocol"));
  if (protocol == evalkit::Protocol::R2S && !run.opts.has("restorer")) {
    throw ConfigError("eval.restorer", "R2S needs --restorer (a restoration checkpoint or 'identity')");
  }
  if (protocol != evalkit::Protocol::R2S && run.opts.has("restorer")) {
    throw ConfigError("eval.restorer", "only R2S uses a restorer");
  }
  const fs::path seg_path = run.opts.require("segmenter", "eval.segmenter");
  if (!fs::exists(seg_path)) throw ConfigError("eval.segmenter", "no checkpoint at " + seg_path.string());
  auto options = run.config.at("eval").get<evalkit::EvalOptions>();
  if (run.opts.flags["fps"]) options.timing = true;
  run.config["eval"].update(json(options));
  const std::string split = run.opts.has("split") ? run.opts.get("split") : "val";
  const auto manifest = manifest_of(run);

  auto segmenter = trainer::load_ras(seg_path);
  std::optional<trainer::ScrModel> restorer;
  evalkit::EvalModels models;
  models.segmenter = &segmenter;
  models.segmenter_name = seg_path.string();
  if (protocol == evalkit::Protocol::R2S) {
    if (run.opts.get("restorer") == "identity") {
      models.identity_restorer = true;
    } else {
      if (!fs::exists(run.opts.get("restorer"))) {
        throw ConfigError("eval.restorer", "no checkpoint at " + run.opts.get("restorer"));
      }
      restorer = trainer::load_scr(run.opts.get("restorer"));
      models.restorer = &*restorer;
    }
  }
  // Role checks happen before any data is touched.
  if (protocol == evalkit::Protocol::DT && segmenter.role == "rass") {
    throw ConfigError("eval.segmenter", "DT results are not applicable to RASS checkpoints");
  }
  start_run(run);
  const auto data = split_of(manifest, split, mapping_of(run, manifest));
  const auto report = evalkit::run_protocol(protocol, models, data, options);
  write_text(run.out / "report.json", report.to_json().dump(2) + "\n");
  write_text(run.out / "report.txt", report.to_table());
  std::cout << report.to_table();
}

void cmd_viz_attn(Run& run) {
  const auto manifest = manifest_of(run);
  const fs::path scr_path = run.opts.require("scr", "run.scr");
  if (!fs::exists(scr_path)) throw ConfigError("run.scr", "no checkpoint at " + scr_path.string());
  const int count = run.opts.number<int>("count", "run.count").value_or(4);
  if (count < 1) throw ConfigError("run.count", "must be >= 1");
  const std::string split = run.opts.has("split") ? run.opts.get("split") : "val";
  auto model = trainer::load_scr(scr_path);
  start_run(run);
  const auto data = split_of(manifest, split, mapping_of(run, manifest));
  std::vector<int64_t> chosen;
  if (run.opts.has("ids")) {
    std::stringstream ss(run.opts.get("ids"));
    std::string id;
    while (std::getline(ss, id, ',')) {
      auto it = std::find(data.ids.begin(), data.ids.end(), id);
      if (it == data.ids.end()) throw ConfigError("run.ids", "no record '" + id + "' in split " + split);
      chosen.push_back(it - data.ids.begin());
    }
  } else {
    for (int64_t i = 0; i < std::min<int64_t>(count, data.size()); ++i) chosen.push_back(i);
  }
  torch::NoGradGuard no_grad;
  std::size_t files = 0;
  for (auto i : chosen) {
    const auto cond = model.backbone->embed_batch({data.tag_texts[i]});
    const auto out = model.backbone->restore(data.lq_up.narrow(0, i, 1), cond);
    const auto bundle = backbone::slice_attention(out.attention, 0, cond.counts[0], data.tag_texts[i]);
    files += evalkit::render_attention(bundle, data.ids[i], run.out).size();
    datakit::save_image(out.image[0], run.out / (data.ids[i] + "_restored.png"));
    datakit::save_image(data.lq_up[i], run.out / (data.ids[i] + "_input.png"));
  }
  log::info("wrote " + std::to_string(files) + " heatmaps for " + std::to_string(chosen.size()) + " records");
}

using Handler = void (*)(Run&);

struct Command {
  Handler handler;
  std::vector<std::pair<std::string, std::string>> options;  // name, help
  std::vector<std::pair<std::string, std::string>> flags;
};

const std::map<std::string, Command>& commands() {
  static const std::map<std::string, Command> cmds = {
      {"synth",
       {cmd_synth,
        {{"out", "output dataset directory"},
         {"seed", "dataset seed"},
         {"n-train", "training records"},
         {"n-val", "validation records"},
         {"image-size", "HQ side length in pixels"},
         {"num-classes", "classes including background"}},
        {}}},
      {"degrade",
       {cmd_degrade, {{"manifest", "input manifest"}, {"seed", "recipe seed"}, {"out", "output directory"}}, {}}},
      {"build-mapping",
       {cmd_build_mapping,
        {{"manifest", "input manifest"},
         {"out", "output directory"},
         {"threshold", "discard scores at or below this value"},
         {"similarity", "'trigram' or a JSON table of scored pairs"},
         {"overrides", "JSON list of {open_tag, category}"}},
        {}}},
      {"pretrain-ae",
       {cmd_pretrain_ae,
        {{"manifest", "degraded manifest"},
         {"out", "output directory"},
         {"seed", "training seed"},
         {"steps", "autoencoder steps"},
         {"denoiser-steps", "denoiser base steps"},
         {"mapping", "mapping table (default: built from the manifest)"}},
        {}}},
      {"train-scr",
       {cmd_train_scr,
        {{"manifest", "degraded manifest"},
         {"backbone", "checkpoint from pretrain-ae"},
         {"out", "output directory"},
         {"mapping", "mapping table (default: built from the manifest)"},
         {"seed", "training seed"},
         {"steps", "optimizer steps"},
         {"lr", "learning rate"},
         {"lambda-region", "region loss weight"},
         {"lambda-pixel", "pixel loss weight"}},
        {}}},
      {"train-ras",
       {cmd_train_ras,
        {{"manifest", "degraded manifest"},
         {"backbone", "checkpoint from pretrain-ae"},
         {"scr", "restoration checkpoint to start from"},
         {"role", "rass, ft or sq"},
         {"out", "output directory"},
         {"mapping", "mapping table (default: built from the manifest)"},
         {"seed", "training seed"},
         {"steps", "optimizer steps"}},
        {}}},
      {"eval",
       {cmd_eval,
        {{"protocol", "DT, R2S or FT"},
         {"manifest", "degraded manifest"},
         {"segmenter", "segmentation checkpoint"},
         {"restorer", "restoration checkpoint or 'identity' (R2S)"},
         {"split", "split to evaluate (default val)"},
         {"mapping", "mapping table (default: built from the manifest)"},
         {"out", "output directory"}},
        {{"fps", "measure frames per second at batch 1"}}}},
      {"viz-attn",
       {cmd_viz_attn,
        {{"manifest", "degraded manifest"},
         {"scr", "restoration checkpoint"},
         {"out", "output directory"},
         {"ids", "comma-separated record ids"},
         {"count", "number of records when --ids is absent (default 4)"},
         {"split", "split to draw from (default val)"},
         {"mapping", "mapping table (default: built from the manifest)"}},
        {}}},
  };
  return cmds;
}

}  // namespace

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names = {"synth",     "degrade",   "build-mapping", "pretrain-ae",
                                                 "train-scr", "train-ras", "eval",          "viz-attn"};
  return names;
}

std::string usage() {
  std::ostringstream os;
  os << "usage: rass <subcommand> [--config FILE] [options]\n\nsubcommands:\n";
  for (const auto& n : subcommands()) os << "  " << std::left << std::setw(15) << n << kSummaries.at(n) << "\n";
  os << "\nrun 'rass <subcommand> --help' for its options\n";
  return os.str();
}

json default_config() {
  json data = datakit::ShapesConfig{};
  data["mapping_threshold"] = 0.5;
  return json{{"data", data},
              {"degrade", degrade::DegradeConfig{}},
              {"backbone", backbone::BackboneConfig{}},
              {"lora", lora::InjectSpec{}},
              {"loss", losses::LossConfig{}},
              {"train",
               {{"ae", trainer::TrainConfig::defaults(trainer::Stage::AE)},
                {"scr", trainer::TrainConfig::defaults(trainer::Stage::SCR)},
                {"ras", trainer::TrainConfig::defaults(trainer::Stage::RAS)}}},
              {"eval", evalkit::EvalOptions{}}};
}

json resolve_config(const json& user) {
  if (!user.is_object()) throw ConfigError("config", "must be a JSON object");
  static const std::set<std::string> known = {"data", "degrade", "backbone", "lora", "loss", "train", "eval", "run"};
  for (const auto& [k, v] : user.items()) {
    if (!known.count(k)) throw ConfigError(k, "unknown config section");
  }
  auto section = [&](const char* name) { return user.contains(name) ? user.at(name) : json(); };
  json out;
  out["data"] = round_trip<datakit::ShapesConfig>(section("data"), "data");
  out["data"]["mapping_threshold"] = section("data").is_object() ? section("data").value("mapping_threshold", 0.5) : 0.5;
  out["degrade"] = round_trip<degrade::DegradeConfig>(section("degrade"), "degrade");
  // The manifest decides the scale unless the config pins it.
  if (!(section("degrade").is_object() && section("degrade").contains("scale"))) out["degrade"].erase("scale");
  out["backbone"] = round_trip<backbone::BackboneConfig>(section("backbone"), "backbone");
  out["lora"] = round_trip<lora::InjectSpec>(section("lora"), "lora");
  out["loss"] = round_trip<losses::LossConfig>(section("loss"), "loss");
  out["eval"] = round_trip<evalkit::EvalOptions>(section("eval"), "eval");
  out["train"] = json::object();
  const json train = section("train").is_object() ? section("train") : json::object();
  for (const auto& [key, stage] : {std::pair{"ae", trainer::Stage::AE}, std::pair{"scr", trainer::Stage::SCR},
                                   std::pair{"ras", trainer::Stage::RAS}}) {
    json probe{{"train", train}};
    out["train"][key] = stage_config(probe, stage);
  }
  return out;
}

int dispatch(const std::vector<std::string>& args) {
  if (args.empty() || args[0] == "-h" || args[0] == "--help") {
    std::cout << usage();
    return args.empty() ? kUsage : kOk;
  }
  const auto& cmds = commands();
  const std::string name = args[0];
  auto found = cmds.find(name);
  if (found == cmds.end()) {
    std::cerr << "rass: unknown subcommand '" << name << "'\n\n" << usage();
    return kUsage;
  }

  Run run;
  run.command = name;
  CLI::App app{"rass " + name + ": " + kSummaries.at(name), "rass " + name};
  std::string config_path;
  app.add_option("--config", config_path, "JSON config with sections data, degrade, backbone, lora, loss, train, eval");
  for (const auto& [opt, help] : found->second.options) app.add_option("--" + opt, run.opts.values[opt], help);
  for (const auto& [flag, help] : found->second.flags) app.add_flag("--" + flag, run.opts.flags[flag], help);

  std::vector<std::string> rest(args.begin() + 1, args.end());
  try {
    // CLI11 parses a reversed argument vector.
    std::vector<std::string> rev(rest.rbegin(), rest.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "rass " << name << ": " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    json user = json::object();
    if (!config_path.empty()) {
      user = read_json_file(config_path, "config");
      // A resolved config replays its own run inputs; flags still win.
      if (user.contains("run") && user["run"].value("command", std::string()) == name) {
        const json saved = user["run"].value("options", json::object());
        for (const auto& [k, v] : saved.items()) {
          if (run.opts.flags.count(k)) {
            if (v.is_boolean() && v.get<bool>()) run.opts.flags[k] = true;
          } else if (run.opts.values.count(k) && run.opts.values[k].empty()) {
            run.opts.values[k] = v.is_string() ? v.get<std::string>() : v.dump();
          }
        }
      }
    }
    run.config = resolve_config(user);
    found->second.handler(run);
    log::set_file("");
    return kOk;
  } catch (const ConfigError& e) {
    log::error("rass " + name + ": config error: " + e.what());
    log::set_file("");
    return kBadConfig;
  } catch (const std::exception& e) {
    log::error("rass " + name + ": " + e.what());
    log::set_file("");
    return kFailure;
  }
}

int dispatch(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args);
}

}  // namespace rass::cli
