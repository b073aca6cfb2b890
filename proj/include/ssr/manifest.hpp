/* Copyright 2026 The SSR Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Dataset manifest (manifest.json) and per-image feature bundles.
//
// Schema (schema_version 1; paths are relative to the manifest's directory):
//
//   {
//     "schema_version": 1,
//     "class_names": ["cat", "dog", ...],      // C foreground classes
//     "num_background": 2,                      // M background prompts
//     "patch_grid": [12, 12],                   // optional, else from cam_seed
//     "entries": [
//       {
//         "image_id": "img_0000",
//         "image_path": "images/img_0000.ppm",
//         "labels": [0, 2],                     // present classes, in [0, C)
//         "paths": {
//           "clip_feat": "...",  // f32 [N, d1]
//           "clip_attn": "...",  // f32 [L_c, H_c, N+1, N+1]
//           "dino_attn": "...",  // f32 [L_d, H_d, N+1, N+1]
//           "cam_seed":  "...",  // f32 [C_f, h, w], channel i <-> labels[i]
//           "text_feat": "..."   // f32 [C_f + M, d1], foreground rows first
//         },
//         "gt_path": "gt/img_0000.npy"          // optional i32 [H, W], 255 = ignore
//       }
//     ]
//   }

#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include "ssr/affinity.hpp"
#include "ssr/error.hpp"
#include "ssr/matrix.hpp"
#include "ssr/npy.hpp"
#include "ssr/tensor.hpp"

namespace ssr {

inline constexpr int kManifestSchemaVersion = 1;

inline constexpr std::array<const char*, 5> kFeatureRoles = {
    "clip_feat", "clip_attn", "dino_attn", "cam_seed", "text_feat"};

struct ManifestEntry {
  std::string image_id;
  std::filesystem::path image_path;
  std::map<std::string, std::filesystem::path> feature_paths;  // role -> absolute path
  std::vector<int> labels;
  std::optional<std::filesystem::path> gt_path;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory that relative paths resolve against
  std::vector<std::string> class_names;
  int num_background = 0;
  std::optional<std::array<int, 2>> patch_grid;
  std::vector<ManifestEntry> entries;

  int num_foreground() const noexcept { return static_cast<int>(class_names.size()); }
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  auto rel = [&](const std::filesystem::path& p) {
    return p.is_absolute() ? std::filesystem::relative(p, m.root).generic_string()
                           : p.generic_string();
  };
  nlohmann::json j;
  j["schema_version"] = kManifestSchemaVersion;
  j["class_names"] = m.class_names;
  j["num_background"] = m.num_background;
  if (m.patch_grid) j["patch_grid"] = {(*m.patch_grid)[0], (*m.patch_grid)[1]};
  j["entries"] = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json je;
    je["image_id"] = e.image_id;
    je["image_path"] = rel(e.image_path);
    je["labels"] = e.labels;
    nlohmann::json paths = nlohmann::json::object();
    for (const auto& [role, p] : e.feature_paths) paths[role] = rel(p);
    je["paths"] = paths;
    if (e.gt_path) je["gt_path"] = rel(*e.gt_path);
    j["entries"].push_back(je);
  }
  return j;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << manifest_to_json(m).dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

/// Parses and validates the whole manifest before returning; any bad entry
/// (label out of range, missing file) fails the load.
inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what(), e.byte);
  }

  DatasetManifest m;
  m.root = std::filesystem::absolute(path).parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : (m.root / fp).lexically_normal();
  };
  try {
    if (j.contains("schema_version") && j.at("schema_version").get<int>() != kManifestSchemaVersion) {
      throw DataError(path.string() + ": unsupported schema_version " +
                      j.at("schema_version").dump());
    }
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.num_background = j.at("num_background").get<int>();
    if (j.contains("patch_grid")) {
      const auto g = j.at("patch_grid").get<std::vector<int>>();
      if (g.size() != 2 || g[0] < 1 || g[1] < 1) throw DataError("patch_grid must be [h, w]");
      m.patch_grid = std::array<int, 2>{g[0], g[1]};
    }
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.image_id = je.at("image_id").get<std::string>();
      e.image_path = resolve(je.at("image_path").get<std::string>());
      e.labels = je.at("labels").get<std::vector<int>>();
      for (const auto& [role, p] : je.at("paths").items()) {
        e.feature_paths[role] = resolve(p.get<std::string>());
      }
      if (je.contains("gt_path")) e.gt_path = resolve(je.at("gt_path").get<std::string>());
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": manifest schema violation: " + e.what());
  }

  const int c = m.num_foreground();
  if (c < 1) throw DataError(path.string() + ": class_names is empty");
  if (m.num_background < 0) throw DataError(path.string() + ": negative num_background");
  auto require = [](const std::filesystem::path& p, const std::string& what) {
    if (!std::filesystem::exists(p)) throw DataError("missing " + what + ": " + p.string());
  };
  for (const auto& e : m.entries) {
    if (e.labels.empty()) throw DataError("entry " + e.image_id + " has no labels");
    for (int l : e.labels) {
      if (l < 0 || l >= c) {
        throw DataError("entry " + e.image_id + ": label " + std::to_string(l) +
                        " outside [0, " + std::to_string(c) + ")");
      }
    }
    auto sorted = e.labels;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw DataError("entry " + e.image_id + " lists a label twice");
    }
    require(e.image_path, "image for " + e.image_id);
    for (const char* role : kFeatureRoles) {
      const auto it = e.feature_paths.find(role);
      if (it == e.feature_paths.end()) {
        throw DataError("entry " + e.image_id + " lacks feature path '" + role + "'");
      }
      require(it->second, std::string(role) + " for " + e.image_id);
    }
    if (e.gt_path) require(*e.gt_path, "ground truth for " + e.image_id);
  }
  return m;
}

/// One image's inputs, converted to double precision.
struct FeatureBundle {
  std::string image_id;
  std::vector<int> labels;
  Matrix clip_feat;  // [N, d1]
  Tensor clip_attn;  // [L_c, H_c, N+1, N+1]
  Tensor dino_attn;  // [L_d, H_d, N+1, N+1]
  Matrix cam_seed;   // [C_f, N], per-channel min-max normalised
  Matrix text_feat;  // [C_f + M, d1]
  int grid_h = 0;
  int grid_w = 0;

  std::size_t num_patches() const noexcept { return clip_feat.rows(); }
};

/// Nearest-neighbour resample of a [C, h, w] stack to [C, gh*gw].
inline Matrix resample_channels(const Tensor& t, int gh, int gw) {
  const auto c = static_cast<std::size_t>(t.dim(0));
  const auto h = static_cast<std::size_t>(t.dim(1));
  const auto w = static_cast<std::size_t>(t.dim(2));
  const auto v = t.to_double();
  Matrix out(c, static_cast<std::size_t>(gh * gw));
  for (std::size_t k = 0; k < c; ++k)
    for (int y = 0; y < gh; ++y)
      for (int x = 0; x < gw; ++x) {
        const auto sy = static_cast<std::size_t>(y) * h / static_cast<std::size_t>(gh);
        const auto sx = static_cast<std::size_t>(x) * w / static_cast<std::size_t>(gw);
        out(k, static_cast<std::size_t>(y * gw + x)) = v[(k * h + sy) * w + sx];
      }
  return out;
}

inline FeatureBundle load_bundle(const DatasetManifest& m, const ManifestEntry& e) {
  auto fail = [&](const std::string& msg) -> DataError {
    return DataError("entry " + e.image_id + ": " + msg);
  };
  FeatureBundle b;
  b.image_id = e.image_id;
  b.labels = e.labels;
  const auto cf = static_cast<std::int64_t>(e.labels.size());

  b.clip_feat = Matrix::from_tensor(load_tensor(e.feature_paths.at("clip_feat")));
  const auto n = static_cast<std::int64_t>(b.clip_feat.rows());

  const Tensor cam = load_tensor(e.feature_paths.at("cam_seed"));
  if (cam.rank() != 3 || cam.dim(0) != cf) {
    throw fail("cam_seed must be [" + std::to_string(cf) + ", h, w], got " +
               shape_str(cam.shape()));
  }
  if (m.patch_grid) {
    b.grid_h = (*m.patch_grid)[0];
    b.grid_w = (*m.patch_grid)[1];
  } else {
    b.grid_h = static_cast<int>(cam.dim(1));
    b.grid_w = static_cast<int>(cam.dim(2));
  }
  if (static_cast<std::int64_t>(b.grid_h) * b.grid_w != n) {
    throw fail("patch grid " + std::to_string(b.grid_h) + "x" + std::to_string(b.grid_w) +
               " does not match " + std::to_string(n) + " patch features");
  }
  b.cam_seed = minmax_normalize_rows(resample_channels(cam, b.grid_h, b.grid_w));

  auto load_attn = [&](const char* role) {
    Tensor a = load_tensor(e.feature_paths.at(role));
    if (a.rank() != 4 || a.dim(2) != n + 1 || a.dim(3) != n + 1) {
      throw fail(std::string(role) + " must be [L, H, " + std::to_string(n + 1) + ", " +
                 std::to_string(n + 1) + "], got " + shape_str(a.shape()));
    }
    for (double v : a.to_double()) {
      if (!(v >= 0.0)) throw fail(std::string(role) + " has negative or NaN entries");
    }
    return a;
  };
  b.clip_attn = load_attn("clip_attn");
  b.dino_attn = load_attn("dino_attn");

  b.text_feat = Matrix::from_tensor(load_tensor(e.feature_paths.at("text_feat")));
  if (static_cast<std::int64_t>(b.text_feat.rows()) != cf + m.num_background ||
      b.text_feat.cols() != b.clip_feat.cols()) {
    throw fail("text_feat must be [" + std::to_string(cf + m.num_background) + ", " +
               std::to_string(b.clip_feat.cols()) + "]");
  }
  return b;
}

inline std::vector<FeatureBundle> load_all_bundles(const DatasetManifest& m) {
  std::vector<FeatureBundle> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) out.push_back(load_bundle(m, e));
  return out;
}

}  // namespace ssr
