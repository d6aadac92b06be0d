// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

// A miniature dataset and model stack for tests that need trained objects.
// Sizes are chosen for speed, not quality.

#pragma once

#include <filesystem>
#include <string>

#include "rass/datakit.hpp"
#include "rass/degrade.hpp"
#include "rass/trainer.hpp"

namespace fixture {

struct TinyData {
  rass::datakit::DatasetManifest manifest;
  rass::tagmap::MappingTable table;
  rass::trainer::PreparedSplit train;
  rass::trainer::PreparedSplit val;
};

inline TinyData tiny_data(const std::string& name, int n_train = 8, int n_val = 4, std::uint64_t seed = 3) {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / ("rass_fixture_" + name);
  fs::remove_all(dir);
  rass::datakit::ShapesConfig sc;
  sc.image_size = 32;
  sc.n_train = n_train;
  sc.n_val = n_val;
  sc.min_radius = 5;
  sc.max_radius = 9;
  const auto clean = rass::datakit::generate_shapes_dataset(sc, seed, dir / "data");
  TinyData d;
  d.manifest = rass::datakit::degrade_dataset(clean, rass::degrade::DegradeConfig{}, seed, dir / "deg");
  d.table = rass::trainer::default_mapping(d.manifest);
  d.train = rass::trainer::prepare_split(rass::datakit::load_split(d.manifest, "train"), d.manifest.class_names,
                                         d.table);
  d.val = rass::trainer::prepare_split(rass::datakit::load_split(d.manifest, "val"), d.manifest.class_names, d.table);
  return d;
}

inline rass::backbone::BackboneConfig tiny_backbone() {
  rass::backbone::BackboneConfig c;
  c.ae_widths = {8, 8, 8};
  c.denoiser_widths = {8, 16, 16};
  c.embed_dim = 16;
  return c;
}

inline rass::trainer::TrainConfig quick(rass::trainer::Stage stage, int steps, std::uint64_t seed = 0) {
  auto c = rass::trainer::TrainConfig::defaults(stage);
  c.steps = steps;
  c.batch_size = 4;
  c.seed = seed;
  c.log_every = 0;
  c.denoiser_steps = steps;
  c.min_psnr = 0.0;
  c.target_psnr = 0.0;
  c.num_queries = 4;
  c.head_dim = 8;
  c.seg_resolution = 16;
  return c;
}

inline rass::backbone::Backbone tiny_base(const TinyData& d, int steps = 3) {
  return rass::trainer::pretrain_autoencoder(d.train, d.val, tiny_backbone(), quick(rass::trainer::Stage::AE, steps))
      .model;
}

}  // namespace fixture
