// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "rass/datakit.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "cv_convert.hpp"
#include "rass/errors.hpp"
#include "rass/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace rass::datakit {

NLOHMANN_JSON_SERIALIZE_ENUM(TagSource, {{TagSource::Seg, "SEG"}, {TagSource::Open, "OPEN"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ShapeKind, {{ShapeKind::Circle, "circle"},
                                         {ShapeKind::Square, "square"},
                                         {ShapeKind::Triangle, "triangle"},
                                         {ShapeKind::Ring, "ring"},
                                         {ShapeKind::Cross, "cross"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Texture, {{Texture::Solid, "solid"}, {Texture::Striped, "striped"}})

void to_json(json& j, const TagEntry& t) {
  j = json{{"text", t.text}, {"source", t.source}};
  j["class_id"] = t.class_id ? json(*t.class_id) : json(nullptr);
}

void from_json(const json& j, TagEntry& t) {
  j.at("text").get_to(t.text);
  j.at("source").get_to(t.source);
  t.class_id.reset();
  if (j.contains("class_id") && !j.at("class_id").is_null()) t.class_id = j.at("class_id").get<int>();
  if (t.source == TagSource::Seg && !t.class_id) {
    throw ValidationError("SEG tag '" + t.text + "' has no class_id");
  }
}

std::vector<const ManifestRecord*> DatasetManifest::split(const std::string& name) const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records) {
    if (r.split == name) out.push_back(&r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }

  const fs::path base = fs::absolute(path).parent_path();
  auto resolve = [&](const json& rec, const char* key) -> fs::path {
    if (!rec.contains(key) || rec.at(key).is_null()) return {};
    const auto s = rec.at(key).get<std::string>();
    if (s.empty()) return {};
    return (base / s).lexically_normal();
  };

  DatasetManifest m;
  try {
    j.at("class_names").get_to(m.class_names);
    m.scale = j.value("scale", 1);
    for (const auto& rec : j.at("records")) {
      ManifestRecord r;
      rec.at("id").get_to(r.id);
      r.split = rec.value("split", std::string("train"));
      r.hq_path = resolve(rec, "hq_path");
      r.lq_path = resolve(rec, "lq_path");
      r.mask_path = resolve(rec, "mask_path");
      r.tags_path = resolve(rec, "tags_path");
      r.recipe_path = resolve(rec, "recipe_path");
      m.records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw ValidationError("manifest " + path.string() + " does not match the schema: " + e.what());
  }

  if (m.class_names.empty()) throw ValidationError("manifest has no class_names");
  if (m.scale < 1) throw ValidationError("manifest scale must be >= 1");

  std::set<std::string> seen;
  std::vector<std::string> duplicates;
  for (const auto& r : m.records) {
    if (!seen.insert(r.id).second) duplicates.push_back(r.id);
  }
  if (!duplicates.empty()) {
    std::string list;
    for (const auto& d : duplicates) list += (list.empty() ? "" : ", ") + std::string("\"") + d + "\"";
    throw ValidationError("duplicate record id(s): " + list);
  }
  for (const auto& r : m.records) {
    auto need = [&](const fs::path& p, const char* what, bool required) {
      if (p.empty()) {
        if (required) throw ValidationError("record \"" + r.id + "\" has no " + what);
        return;
      }
      if (!fs::exists(p)) {
        throw ValidationError("record \"" + r.id + "\" references missing " + what + " " + p.string());
      }
    };
    need(r.hq_path, "hq_path", true);
    need(r.mask_path, "mask_path", true);
    need(r.tags_path, "tags_path", true);
    need(r.lq_path, "lq_path", false);
    need(r.recipe_path, "recipe_path", false);
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  const fs::path base = fs::absolute(path).parent_path().lexically_normal();
  auto rel = [&](const fs::path& p) -> json {
    if (p.empty()) return "";
    return fs::absolute(p).lexically_normal().lexically_relative(base).generic_string();
  };
  json records = json::array();
  for (const auto& r : manifest.records) {
    records.push_back({{"id", r.id},
                       {"split", r.split},
                       {"hq_path", rel(r.hq_path)},
                       {"lq_path", rel(r.lq_path)},
                       {"mask_path", rel(r.mask_path)},
                       {"tags_path", rel(r.tags_path)},
                       {"recipe_path", rel(r.recipe_path)}});
  }
  json j{{"class_names", manifest.class_names}, {"scale", manifest.scale}, {"records", records}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<TagEntry> load_tags(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open tags file " + path.string());
  return json::parse(in).get<std::vector<TagEntry>>();
}

void save_tags(const std::vector<TagEntry>& tags, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write tags file " + path.string());
  out << json(tags).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Image and mask IO

void save_mask(const torch::Tensor& mask, const fs::path& path, int num_classes) {
  if (num_classes < 1 || num_classes > 255) {
    throw ValidationError("cannot store " + std::to_string(num_classes) +
                          " classes in an 8-bit mask: class ids would collide with the ignore value 255");
  }
  if (mask.dim() != 2) throw ValidationError("mask must be HxW");
  auto m = mask.detach().to(torch::kCPU, torch::kInt64).contiguous();
  const auto bad = ((m >= num_classes) & (m != kIgnoreLabel)) | (m < 0);
  if (bad.any().item<bool>()) {
    throw ValidationError("mask contains ids outside [0, " + std::to_string(num_classes) + ") and not 255");
  }
  auto u8 = m.to(torch::kUInt8).contiguous();
  cv::Mat view(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1, u8.data_ptr<uint8_t>());
  if (!cv::imwrite(path.string(), view)) throw IoError("cannot write mask " + path.string());
}

torch::Tensor load_mask(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw IoError("cannot read mask " + path.string());
  if (m.type() != CV_8UC1) throw ValidationError("mask " + path.string() + " is not single-channel 8-bit");
  return torch::from_blob(m.data, {m.rows, m.cols}, torch::kUInt8).clone();
}

void save_image(const torch::Tensor& image, const fs::path& path) {
  if (image.dim() != 3 || image.size(0) != 3) throw ValidationError("image must be 3xHxW");
  cv::Mat rgb = detail::to_mat(image.clamp(0.0, 1.0));
  cv::Mat u8, bgr;
  rgb.convertTo(u8, CV_8UC3, 255.0);
  cv::cvtColor(u8, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write image " + path.string());
}

torch::Tensor load_image(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image " + path.string());
  cv::Mat rgb, f;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
  return detail::to_tensor(f);
}

std::vector<ImagePair> load_split(const DatasetManifest& manifest, const std::string& split) {
  std::vector<ImagePair> out;
  for (const auto* r : manifest.split(split)) {
    ImagePair p;
    p.id = r->id;
    p.hq = load_image(r->hq_path);
    p.mask = load_mask(r->mask_path);
    p.tags = load_tags(r->tags_path);
    if (!r->lq_path.empty()) {
      p.lq = load_image(r->lq_path);
      if (p.lq.size(1) * manifest.scale != p.hq.size(1) || p.lq.size(2) * manifest.scale != p.hq.size(2)) {
        throw ValidationError("record \"" + r->id + "\": LQ size does not match HQ size / scale");
      }
    }
    if (!r->recipe_path.empty()) {
      std::ifstream in(r->recipe_path);
      p.recipe = json::parse(in).get<degrade::DegradationRecipe>();
    }
    if (p.hq.size(1) != p.mask.size(0) || p.hq.size(2) != p.mask.size(1)) {
      throw ValidationError("record \"" + r->id + "\": HQ image and mask sizes differ");
    }
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shapes

namespace {

const std::vector<std::string> kAllClassNames = {"background", "circle", "square", "triangle", "ring", "cross"};

const std::map<std::string, std::vector<std::string>> kSynonyms = {
    {"background", {"backdrop", "backgrounds", "scenery"}},
    {"circle", {"circles", "disc", "round"}},
    {"square", {"squares", "box", "block"}},
    {"triangle", {"triangles", "wedge", "pyramid"}},
    {"ring", {"rings", "donut", "annulus"}},
    {"cross", {"crosses", "plus", "crossing"}},
};

// Rotates (x, y) about (cx, cy) by -angle; returns coordinates in the shape frame.
std::pair<double, double> to_local(double x, double y, double cx, double cy, double angle) {
  const double dx = x - cx, dy = y - cy;
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * dx + s * dy, -s * dx + c * dy};
}

bool stripe_on(double x, double y, double period, double angle) {
  const double u = x * std::cos(angle) + y * std::sin(angle);
  double phase = std::fmod(u, period);
  if (phase < 0) phase += period;
  return phase < period / 2.0;
}

std::array<int, 3> random_color(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, 255);
  return {d(rng), d(rng), d(rng)};
}

int color_distance(const std::array<int, 3>& a, const std::array<int, 3>& b) {
  return std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
}

// A second stripe color well separated from `c`.
std::array<int, 3> stripe_partner(const std::array<int, 3>& c) {
  std::array<int, 3> out{};
  for (int k = 0; k < 3; ++k) out[k] = c[k] >= 128 ? c[k] - 90 : c[k] + 90;
  return out;
}

}  // namespace

std::vector<std::string> shape_class_names(int num_classes) {
  if (num_classes < 1 || num_classes > static_cast<int>(kAllClassNames.size())) {
    throw ValidationError("shapes dataset supports 1.." + std::to_string(kAllClassNames.size()) +
                          " classes, got " + std::to_string(num_classes));
  }
  return {kAllClassNames.begin(), kAllClassNames.begin() + num_classes};
}

const std::vector<std::string>& synonyms_for(const std::string& class_name) {
  static const std::vector<std::string> kNone;
  auto it = kSynonyms.find(class_name);
  return it == kSynonyms.end() ? kNone : it->second;
}

bool ShapeInstance::contains(double x, double y) const {
  switch (kind) {
    case ShapeKind::Circle: {
      const double dx = x - cx, dy = y - cy;
      return dx * dx + dy * dy <= size * size;
    }
    case ShapeKind::Ring: {
      const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      return d2 <= size * size && d2 >= aux * aux;
    }
    case ShapeKind::Square: {
      const auto [u, v] = to_local(x, y, cx, cy, angle);
      return std::abs(u) <= size && std::abs(v) <= size;
    }
    case ShapeKind::Cross: {
      const auto [u, v] = to_local(x, y, cx, cy, angle);
      return (std::abs(u) <= size && std::abs(v) <= aux) || (std::abs(v) <= size && std::abs(u) <= aux);
    }
    case ShapeKind::Triangle: {
      // Equilateral triangle with circumradius `size`; edges are tested as
      // half-planes whose inward normals point at the centroid.
      const auto [u, v] = to_local(x, y, cx, cy, angle);
      const double inradius = size / 2.0;
      for (int k = 0; k < 3; ++k) {
        const double a = std::numbers::pi + k * 2.0 * std::numbers::pi / 3.0;
        if (u * std::cos(a) + v * std::sin(a) > inradius) return false;
      }
      return true;
    }
  }
  return false;
}

void to_json(json& j, const Scene& s) {
  json shapes = json::array();
  for (const auto& sh : s.shapes) {
    shapes.push_back({{"kind", sh.kind},
                      {"cx", sh.cx},
                      {"cy", sh.cy},
                      {"size", sh.size},
                      {"aux", sh.aux},
                      {"angle", sh.angle},
                      {"texture", sh.texture},
                      {"color", sh.color},
                      {"color2", sh.color2},
                      {"stripe_period", sh.stripe_period},
                      {"stripe_angle", sh.stripe_angle}});
  }
  j = json{{"width", s.width},
           {"height", s.height},
           {"background_texture", s.background_texture},
           {"background", s.background},
           {"background2", s.background2},
           {"background_period", s.background_period},
           {"background_angle", s.background_angle},
           {"shapes", shapes}};
}

void from_json(const json& j, Scene& s) {
  j.at("width").get_to(s.width);
  j.at("height").get_to(s.height);
  j.at("background_texture").get_to(s.background_texture);
  j.at("background").get_to(s.background);
  j.at("background2").get_to(s.background2);
  j.at("background_period").get_to(s.background_period);
  j.at("background_angle").get_to(s.background_angle);
  s.shapes.clear();
  for (const auto& e : j.at("shapes")) {
    ShapeInstance sh;
    e.at("kind").get_to(sh.kind);
    e.at("cx").get_to(sh.cx);
    e.at("cy").get_to(sh.cy);
    e.at("size").get_to(sh.size);
    e.at("aux").get_to(sh.aux);
    e.at("angle").get_to(sh.angle);
    e.at("texture").get_to(sh.texture);
    e.at("color").get_to(sh.color);
    e.at("color2").get_to(sh.color2);
    e.at("stripe_period").get_to(sh.stripe_period);
    e.at("stripe_angle").get_to(sh.stripe_angle);
    s.shapes.push_back(sh);
  }
}

void to_json(json& j, const ShapesConfig& c) {
  j = json{{"image_size", c.image_size},         {"num_classes", c.num_classes}, {"n_train", c.n_train},
           {"n_val", c.n_val},                   {"min_shapes", c.min_shapes},   {"max_shapes", c.max_shapes},
           {"min_radius", c.min_radius},         {"max_radius", c.max_radius},
           {"striped_probability", c.striped_probability}, {"scale", c.scale}};
}

void ShapesConfig::validate() const {
  if (num_classes < 1 || num_classes > 6) throw ConfigError("data.num_classes", "must lie in [1, 6]");
  if (n_train < 0) throw ConfigError("data.n_train", "must be >= 0");
  if (n_val < 0) throw ConfigError("data.n_val", "must be >= 0");
  if (n_train + n_val <= 0) throw ConfigError("data.n_train", "the dataset needs at least one record");
  if (min_shapes < 0) throw ConfigError("data.min_shapes", "must be >= 0");
  if (max_shapes < min_shapes) throw ConfigError("data.max_shapes", "must be >= min_shapes");
  if (!(min_radius > 0.0) || max_radius < min_radius) throw ConfigError("data.max_radius", "needs 0 < min_radius <= max_radius");
  if (!(striped_probability >= 0.0 && striped_probability <= 1.0)) {
    throw ConfigError("data.striped_probability", "must lie in [0, 1]");
  }
  if (scale < 1 || image_size < 1 || image_size % scale != 0) {
    throw ConfigError("data.image_size", "must be positive and divisible by data.scale");
  }
}

void from_json(const json& j, ShapesConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.n_train = j.value("n_train", c.n_train);
  c.n_val = j.value("n_val", c.n_val);
  c.min_shapes = j.value("min_shapes", c.min_shapes);
  c.max_shapes = j.value("max_shapes", c.max_shapes);
  c.min_radius = j.value("min_radius", c.min_radius);
  c.max_radius = j.value("max_radius", c.max_radius);
  c.striped_probability = j.value("striped_probability", c.striped_probability);
  c.scale = j.value("scale", c.scale);
}

Scene sample_scene(const ShapesConfig& config, std::uint64_t seed, int index) {
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;

  Scene scene;
  scene.width = scene.height = config.image_size;
  scene.background = random_color(rng);
  scene.background2 = stripe_partner(scene.background);
  scene.background_texture = unit(rng) < 0.25 ? Texture::Striped : Texture::Solid;
  scene.background_period = 10.0 + 6.0 * unit(rng);
  scene.background_angle = two_pi * unit(rng);

  const int shape_kinds = config.num_classes - 1;
  if (shape_kinds <= 0) return scene;
  const int n = std::uniform_int_distribution<int>(config.min_shapes, config.max_shapes)(rng);
  for (int i = 0; i < n; ++i) {
    ShapeInstance sh;
    sh.kind = static_cast<ShapeKind>(std::uniform_int_distribution<int>(1, shape_kinds)(rng));
    sh.cx = config.image_size * (0.1 + 0.8 * unit(rng));
    sh.cy = config.image_size * (0.1 + 0.8 * unit(rng));
    sh.size = config.min_radius + (config.max_radius - config.min_radius) * unit(rng);
    sh.angle = two_pi * unit(rng);
    if (sh.kind == ShapeKind::Ring) sh.aux = sh.size * (0.4 + 0.2 * unit(rng));
    if (sh.kind == ShapeKind::Cross) sh.aux = sh.size * (0.3 + 0.15 * unit(rng));
    sh.color = random_color(rng);
    for (int attempt = 0; attempt < 16 && color_distance(sh.color, scene.background) < 150; ++attempt) {
      sh.color = random_color(rng);
    }
    sh.color2 = stripe_partner(sh.color);
    sh.texture = unit(rng) < config.striped_probability ? Texture::Striped : Texture::Solid;
    sh.stripe_period = 6.0 + 6.0 * unit(rng);
    sh.stripe_angle = two_pi * unit(rng);
    scene.shapes.push_back(sh);
  }
  return scene;
}

torch::Tensor render_image(const Scene& scene) {
  auto img = torch::empty({3, scene.height, scene.width}, torch::kFloat32);
  auto acc = img.accessor<float, 3>();
  for (int y = 0; y < scene.height; ++y) {
    for (int x = 0; x < scene.width; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const std::array<int, 3>* color = nullptr;
      for (auto it = scene.shapes.rbegin(); it != scene.shapes.rend(); ++it) {
        if (it->contains(px, py)) {
          const bool on = it->texture == Texture::Solid || stripe_on(px, py, it->stripe_period, it->stripe_angle);
          color = on ? &it->color : &it->color2;
          break;
        }
      }
      if (color == nullptr) {
        const bool on = scene.background_texture == Texture::Solid ||
                        stripe_on(px, py, scene.background_period, scene.background_angle);
        color = on ? &scene.background : &scene.background2;
      }
      for (int c = 0; c < 3; ++c) acc[c][y][x] = static_cast<float>((*color)[c]) / 255.0f;
    }
  }
  return img;
}

torch::Tensor render_mask(const Scene& scene) {
  auto mask = torch::zeros({scene.height, scene.width}, torch::kUInt8);
  auto acc = mask.accessor<uint8_t, 2>();
  for (int y = 0; y < scene.height; ++y) {
    for (int x = 0; x < scene.width; ++x) {
      for (auto it = scene.shapes.rbegin(); it != scene.shapes.rend(); ++it) {
        if (it->contains(x + 0.5, y + 0.5)) {
          acc[y][x] = static_cast<uint8_t>(it->kind);
          break;
        }
      }
    }
  }
  return mask;
}

DatasetManifest generate_shapes_dataset(const ShapesConfig& config, std::uint64_t seed, const fs::path& out_dir) {
  config.validate();
  const auto class_names = shape_class_names(config.num_classes);
  for (const char* sub : {"hq", "masks", "tags", "scenes"}) fs::create_directories(out_dir / sub);

  DatasetManifest manifest;
  manifest.class_names = class_names;
  manifest.scale = config.scale;

  auto emit = [&](const std::string& split, int count, int stream_base) {
    for (int i = 0; i < count; ++i) {
      char id_buf[32];
      std::snprintf(id_buf, sizeof(id_buf), "%s_%04d", split.c_str(), i);
      const std::string id = id_buf;
      const int stream = stream_base + i;
      const Scene scene = sample_scene(config, seed, stream);
      const auto image = render_image(scene);
      const auto mask = render_mask(scene);

      // Tag RNG is a separate stream so tags never perturb geometry.
      std::mt19937_64 tag_rng(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(stream)), 0x7A65));
      const auto counts = torch::bincount(mask.flatten().to(torch::kInt64), {}, config.num_classes);
      std::vector<TagEntry> tags;
      std::vector<TagEntry> open;
      for (int c = 0; c < config.num_classes; ++c) {
        if (counts[c].item<int64_t>() == 0) continue;
        tags.push_back({class_names[c], TagSource::Seg, c});
        const auto& syn = synonyms_for(class_names[c]);
        if (!syn.empty()) {
          const auto pick = std::uniform_int_distribution<std::size_t>(0, syn.size() - 1)(tag_rng);
          open.push_back({syn[pick], TagSource::Open, std::nullopt});
        }
      }
      tags.insert(tags.end(), open.begin(), open.end());

      ManifestRecord rec;
      rec.id = id;
      rec.split = split;
      rec.hq_path = out_dir / "hq" / (id + ".png");
      rec.mask_path = out_dir / "masks" / (id + ".png");
      rec.tags_path = out_dir / "tags" / (id + ".json");
      save_image(image, rec.hq_path);
      save_mask(mask, rec.mask_path, config.num_classes);
      save_tags(tags, rec.tags_path);
      std::ofstream(out_dir / "scenes" / (id + ".json"), std::ios::trunc) << json(scene).dump(2) << '\n';
      manifest.records.push_back(std::move(rec));
    }
  };
  emit("train", config.n_train, 0);
  emit("val", config.n_val, 1'000'000);

  save_manifest(manifest, out_dir / "manifest.json");
  return load_manifest(out_dir / "manifest.json");
}

// ---------------------------------------------------------------------------
// Dataset degradation

DatasetManifest degrade_dataset(const DatasetManifest& manifest, const degrade::DegradeConfig& config,
                                std::uint64_t seed, const fs::path& out_dir) {
  config.validate();
  if (config.scale != manifest.scale) {
    throw ConfigError("degrade.scale", "is " + std::to_string(config.scale) + " but the manifest scale is " +
                                           std::to_string(manifest.scale));
  }
  fs::create_directories(out_dir / "lq");
  fs::create_directories(out_dir / "recipes");
  DatasetManifest out = manifest;
  for (auto& r : out.records) {
    // FNV-1a of the id keeps each recipe independent of record order.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : r.id) h = (h ^ c) * 0x100000001b3ULL;
    std::mt19937_64 rng(mix_seed(seed, h));
    const auto recipe = degrade::sample_recipe(config, rng);
    const auto lq = degrade::apply_recipe(load_image(r.hq_path), recipe);
    r.lq_path = out_dir / "lq" / (r.id + ".png");
    r.recipe_path = out_dir / "recipes" / (r.id + ".json");
    save_image(lq, r.lq_path);
    std::ofstream rec(r.recipe_path, std::ios::trunc);
    if (!rec) throw IoError("cannot write " + r.recipe_path.string());
    rec << json(recipe).dump(2) << '\n';
  }
  save_manifest(out, out_dir / "manifest.json");
  return out;
}

}  // namespace rass::datakit
