// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rass/degrade.hpp"

namespace rass::datakit {

inline constexpr std::uint8_t kIgnoreLabel = 255;

enum class TagSource { Seg, Open };

struct TagEntry {
  std::string text;
  TagSource source = TagSource::Seg;
  std::optional<int> class_id;
};

void to_json(nlohmann::json& j, const TagEntry& t);
void from_json(const nlohmann::json& j, TagEntry& t);

/// One training/evaluation record.
///
/// Images are float32 tensors laid out 3×H×W (RGB) with values in [0,1];
/// `mask` is a uint8 H×W label map where 255 marks ignored pixels.
struct ImagePair {
  std::string id;
  torch::Tensor hq;
  torch::Tensor lq;
  torch::Tensor mask;
  std::vector<TagEntry> tags;
  std::optional<degrade::DegradationRecipe> recipe;
};

struct ManifestRecord {
  std::string id;
  std::string split = "train";
  std::filesystem::path hq_path;
  std::filesystem::path lq_path;  // empty until the record has been degraded
  std::filesystem::path mask_path;
  std::filesystem::path tags_path;
  std::filesystem::path recipe_path;  // optional
};

/// Paths inside a loaded manifest are absolute; on disk they are stored
/// relative to the manifest's directory.
struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::vector<std::string> class_names;
  int scale = 2;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<const ManifestRecord*> split(const std::string& name) const;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

std::vector<TagEntry> load_tags(const std::filesystem::path& path);
void save_tags(const std::vector<TagEntry>& tags, const std::filesystem::path& path);

/// Writes an 8-bit single-channel PNG. Every value must be < num_classes or
/// equal to 255; num_classes above 255 would collide with the ignore value.
void save_mask(const torch::Tensor& mask, const std::filesystem::path& path, int num_classes);
torch::Tensor load_mask(const std::filesystem::path& path);

/// 8-bit RGB PNG IO for 3×H×W float images. Writing quantizes to 1/255 steps.
void save_image(const torch::Tensor& image, const std::filesystem::path& path);
torch::Tensor load_image(const std::filesystem::path& path);

/// Loads every record of a split. Records without an LQ image get an
/// undefined `lq` tensor.
std::vector<ImagePair> load_split(const DatasetManifest& manifest, const std::string& split);

// ---------------------------------------------------------------------------
// Procedural shapes dataset

enum class ShapeKind { Circle = 1, Square = 2, Triangle = 3, Ring = 4, Cross = 5 };
enum class Texture { Solid, Striped };

/// Geometry and appearance of one rendered primitive. `size` is the outer
/// radius (half-side for squares, arm half-length for crosses); `aux` is the
/// ring inner radius or the cross arm half-width.
struct ShapeInstance {
  ShapeKind kind = ShapeKind::Circle;
  double cx = 0, cy = 0, size = 0, aux = 0, angle = 0;
  Texture texture = Texture::Solid;
  std::array<int, 3> color{0, 0, 0};
  std::array<int, 3> color2{0, 0, 0};
  double stripe_period = 8, stripe_angle = 0;

  /// Point-in-shape test at continuous image coordinates.
  bool contains(double x, double y) const;
};

struct Scene {
  int width = 64, height = 64;
  Texture background_texture = Texture::Solid;
  std::array<int, 3> background{0, 0, 0};
  std::array<int, 3> background2{0, 0, 0};
  double background_period = 8, background_angle = 0;
  std::vector<ShapeInstance> shapes;  // painter's order, later shapes on top
};

void to_json(nlohmann::json& j, const Scene& s);
void from_json(const nlohmann::json& j, Scene& s);

struct ShapesConfig {
  int image_size = 64;
  int num_classes = 6;
  int n_train = 500;
  int n_val = 100;
  int min_shapes = 1;
  int max_shapes = 5;
  double min_radius = 7.0;
  double max_radius = 16.0;
  double striped_probability = 0.5;
  int scale = 2;

  /// Throws ConfigError naming the offending `data.*` field.
  void validate() const;
};

void to_json(nlohmann::json& j, const ShapesConfig& c);
void from_json(const nlohmann::json& j, ShapesConfig& c);

/// Class names for the first `num_classes` entries of
/// {background, circle, square, triangle, ring, cross}.
std::vector<std::string> shape_class_names(int num_classes);

/// Built-in open-vocabulary synonyms per class name.
const std::vector<std::string>& synonyms_for(const std::string& class_name);

/// Samples one scene. A pure function of (config, seed, index).
Scene sample_scene(const ShapesConfig& config, std::uint64_t seed, int index);

/// Rasterizes a scene, sampling each pixel at its center.
torch::Tensor render_image(const Scene& scene);
torch::Tensor render_mask(const Scene& scene);

/// Renders the whole dataset under `out_dir` (hq/, masks/, tags/, scenes/,
/// manifest.json) and returns the loaded manifest. Record i of each split
/// depends only on (config, seed, split, i).
DatasetManifest generate_shapes_dataset(const ShapesConfig& config, std::uint64_t seed,
                                        const std::filesystem::path& out_dir);

/// Degrades every record of `manifest` into `out_dir` (lq/, recipes/,
/// manifest.json) and returns the new manifest; HQ, masks and tags keep their
/// original locations. The recipe of a record depends only on (seed, id).
DatasetManifest degrade_dataset(const DatasetManifest& manifest, const degrade::DegradeConfig& config,
                                std::uint64_t seed, const std::filesystem::path& out_dir);

}  // namespace rass::datakit
