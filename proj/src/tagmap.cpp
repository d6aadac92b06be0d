// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "rass/tagmap.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "rass/errors.hpp"
#include "rass/log.hpp"

using nlohmann::json;

namespace rass::tagmap {

namespace {

std::map<std::string, int> trigrams(const std::string& word) {
  std::string s = " ";
  for (unsigned char c : word) s.push_back(static_cast<char>(std::tolower(c)));
  s.push_back(' ');
  std::map<std::string, int> counts;
  for (std::size_t i = 0; i + 3 <= s.size(); ++i) ++counts[s.substr(i, 3)];
  return counts;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

}  // namespace

double trigram_similarity(const std::string& a, const std::string& b) {
  const auto ta = trigrams(a);
  const auto tb = trigrams(b);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [g, c] : ta) {
    na += static_cast<double>(c) * c;
    if (auto it = tb.find(g); it != tb.end()) dot += static_cast<double>(c) * it->second;
  }
  for (const auto& [g, c] : tb) nb += static_cast<double>(c) * c;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), 0.0, 1.0);
}

TableSimilarity::TableSimilarity(const std::vector<std::tuple<std::string, std::string, double>>& rows) {
  for (const auto& [a, b, s] : rows) {
    if (!(s >= 0.0 && s <= 1.0)) throw ValidationError("similarity score for (" + a + ", " + b + ") is outside [0, 1]");
    scores_[{a, b}] = s;
    scores_[{b, a}] = s;
  }
}

TableSimilarity TableSimilarity::from_file(const std::filesystem::path& path) {
  std::vector<std::tuple<std::string, std::string, double>> rows;
  for (const auto& r : read_json(path)) {
    rows.emplace_back(r.at("a").get<std::string>(), r.at("b").get<std::string>(), r.at("score").get<double>());
  }
  return TableSimilarity(rows);
}

double TableSimilarity::operator()(const std::string& a, const std::string& b) const {
  if (a == b) return 1.0;
  auto it = scores_.find({a, b});
  return it == scores_.end() ? 0.0 : it->second;
}

std::optional<std::string> MappingTable::lookup(const std::string& open_tag) const {
  auto it = entries.find(open_tag);
  if (it == entries.end()) return std::nullopt;
  return it->second.category;
}

MappingTable build_mapping(const std::vector<std::string>& open_tags, const std::vector<std::string>& categories,
                           const Similarity& sim, double threshold,
                           const std::map<std::string, std::string>& overrides) {
  if (categories.empty()) throw ValidationError("build_mapping needs at least one category");
  std::vector<std::string> sorted = categories;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

  MappingTable table;
  table.threshold = threshold;
  table.overrides = overrides;
  for (const auto& tag : open_tags) {
    if (auto ov = overrides.find(tag); ov != overrides.end()) {
      if (ov->second == kDiscard) continue;
      if (!std::binary_search(sorted.begin(), sorted.end(), ov->second)) {
        throw ValidationError("override maps '" + tag + "' to unknown category '" + ov->second + "'");
      }
      table.entries[tag] = {ov->second, sim(tag, ov->second)};
      continue;
    }
    const std::string* best = nullptr;
    double best_score = -1.0;
    for (const auto& c : sorted) {
      const double s = sim(tag, c);
      if (s > best_score) {
        best_score = s;
        best = &c;
      }
    }
    if (best_score > threshold) table.entries[tag] = {*best, best_score};
  }
  return table;
}

void save_mapping(const MappingTable& table, const std::filesystem::path& path) {
  json j;
  j["threshold"] = table.threshold;
  j["rows"] = json::array();
  for (const auto& [tag, e] : table.entries) {
    j["rows"].push_back({{"open_tag", tag}, {"category", e.category}, {"score", e.score}});
  }
  j["overrides"] = json::array();
  for (const auto& [tag, c] : table.overrides) j["overrides"].push_back({{"open_tag", tag}, {"category", c}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

MappingTable load_mapping(const std::filesystem::path& path) {
  const auto j = read_json(path);
  MappingTable table;
  try {
    table.threshold = j.value("threshold", 0.5);
    for (const auto& r : j.at("rows")) {
      table.entries[r.at("open_tag").get<std::string>()] = {r.at("category").get<std::string>(),
                                                            r.at("score").get<double>()};
    }
    if (j.contains("overrides")) {
      for (const auto& r : j.at("overrides")) {
        table.overrides[r.at("open_tag").get<std::string>()] = r.at("category").get<std::string>();
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return table;
}

std::map<std::string, std::string> load_overrides(const std::filesystem::path& path) {
  std::map<std::string, std::string> out;
  try {
    for (const auto& r : read_json(path)) {
      out[r.at("open_tag").get<std::string>()] = r.at("category").get<std::string>();
    }
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return out;
}

std::optional<int64_t> resolve_class(const datakit::TagEntry& tag, const MappingTable& table,
                                     const std::vector<std::string>& class_names) {
  if (tag.source == datakit::TagSource::Seg) return tag.class_id;
  if (auto category = table.lookup(tag.text)) {
    auto it = std::find(class_names.begin(), class_names.end(), *category);
    if (it != class_names.end()) return it - class_names.begin();
  }
  return std::nullopt;
}

std::vector<losses::MatchedPair> attach_masks(const std::vector<datakit::TagEntry>& tags,
                                              const std::map<int64_t, torch::Tensor>& masks,
                                              const MappingTable& table,
                                              const std::vector<std::string>& class_names) {
  std::vector<losses::MatchedPair> pairs;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const auto& t = tags[i];
    const auto cls = resolve_class(t, table, class_names);
    auto m = cls ? masks.find(*cls) : masks.end();
    if (m == masks.end()) {
      log::debug("tag '" + t.text + "' has no mask; excluded from the semantic constraint");
      continue;
    }
    pairs.push_back({t.text, static_cast<int64_t>(i), m->second});
  }
  return pairs;
}

std::map<int64_t, torch::Tensor> class_masks(const torch::Tensor& label_map, int64_t num_classes) {
  std::map<int64_t, torch::Tensor> out;
  const auto labels = label_map.to(torch::kInt64);
  for (int64_t c = 0; c < num_classes; ++c) {
    auto m = labels.eq(c);
    if (m.any().item<bool>()) out.emplace(c, m.to(torch::kFloat));
  }
  return out;
}

}  // namespace rass::tagmap
