// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

namespace rass {

/// Named-tensor archive used for every checkpoint kind.
///
/// Layout: 8-byte magic `RASSARC1`, little-endian u64 header length, a JSON
/// header `{meta, tensors: [{name, dtype, shape, offset, nbytes}]}`, then the
/// raw contiguous tensor bytes in name order. Writing the same archive twice
/// yields identical bytes.
struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors;

  const torch::Tensor& at(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const Archive& archive);
Archive load_archive(const std::filesystem::path& path);

}  // namespace rass
