// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "rass/datakit.hpp"
#include "rass/losses.hpp"

namespace rass::tagmap {

/// Maps a pair of strings to a similarity in [0, 1].
using Similarity = std::function<double(const std::string&, const std::string&)>;

/// Override target that removes a tag from the table.
inline const std::string kDiscard = "DISCARD";

/// Cosine similarity of character-trigram count vectors. Words are
/// lowercased and padded with one space on each side, so sim(x, x) = 1 for
/// any non-empty x.
double trigram_similarity(const std::string& a, const std::string& b);

/// Similarity backed by a list of scored pairs, e.g. scores exported from an
/// external sentence-embedding model. Lookups are symmetric, sim(x, x) = 1,
/// and unlisted pairs score 0.
class TableSimilarity {
 public:
  TableSimilarity() = default;
  explicit TableSimilarity(const std::vector<std::tuple<std::string, std::string, double>>& rows);
  /// JSON list of {a, b, score}.
  static TableSimilarity from_file(const std::filesystem::path& path);

  double operator()(const std::string& a, const std::string& b) const;

 private:
  std::map<std::pair<std::string, std::string>, double> scores_;
};

struct MappingEntry {
  std::string category;
  double score = 0.0;
};

struct MappingTable {
  std::map<std::string, MappingEntry> entries;
  double threshold = 0.5;
  std::map<std::string, std::string> overrides;  // open tag → category or DISCARD

  /// Category for `open_tag`, if retained.
  std::optional<std::string> lookup(const std::string& open_tag) const;
};

/// Maps every open tag to its most similar category. Scores at or below
/// `threshold` are discarded; equal scores resolve to the lexicographically
/// smallest category. Overrides take precedence over similarity.
MappingTable build_mapping(const std::vector<std::string>& open_tags, const std::vector<std::string>& categories,
                           const Similarity& sim, double threshold = 0.5,
                           const std::map<std::string, std::string>& overrides = {});

/// Table file: {threshold, rows: [{open_tag, category, score}], overrides: [...]}.
void save_mapping(const MappingTable& table, const std::filesystem::path& path);
MappingTable load_mapping(const std::filesystem::path& path);
/// Overrides file: JSON list of {open_tag, category}; category may be DISCARD.
std::map<std::string, std::string> load_overrides(const std::filesystem::path& path);

/// Class a tag refers to: its own class id for SEG tags, the mapped category
/// for OPEN tags, nothing if unresolved.
std::optional<int64_t> resolve_class(const datakit::TagEntry& tag, const MappingTable& table,
                                     const std::vector<std::string>& class_names);

/// Pairs each tag with the ground-truth mask it inherits. SEG tags use their
/// class id; OPEN tags go through `table`. Tags that resolve to no present
/// mask are left out. `masks` is keyed by class id; `class_names` resolves
/// category names to ids. Token indices follow the order of `tags`.
std::vector<losses::MatchedPair> attach_masks(const std::vector<datakit::TagEntry>& tags,
                                              const std::map<int64_t, torch::Tensor>& masks,
                                              const MappingTable& table,
                                              const std::vector<std::string>& class_names);

/// Binary float mask per class present in a label map (ignore pixels are 0).
std::map<int64_t, torch::Tensor> class_masks(const torch::Tensor& label_map, int64_t num_classes);

}  // namespace rass::tagmap
