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

// Pipeline configuration. Every tunable lives in one registry that drives
// defaults, TOML loading, command-line overrides, validation and the echoed
// resolved config. Precedence: defaults < config file < flags.

#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <variant>
#include <vector>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "ssr/cmpa.hpp"
#include "ssr/error.hpp"
#include "ssr/fixture.hpp"
#include "ssr/superpixel.hpp"

namespace ssr {

struct SlicConfig {
  int superpixels = 200;
  double compactness = 10.0;
  int iterations = 10;
  int regions = 8;
  double high_conf_thresh = 0.5;
  double ratio_thresh = 0.6;
  std::string ratio_mode = "mass";
  std::uint64_t seed = 0;
};

struct AffinityConfig {
  double w_clip = 0.4;
  double w_dino = 0.6;
  int clip_layers = 4;
  int dino_layers = 4;
  int prop_steps = 2;
  bool renormalize = false;
};

struct TrainConfig {
  AlignmentConfig align;
  std::int64_t iterations = 200;
};

struct PipelineConfig {
  FixtureConfig fixture;
  SlicConfig slic;
  AffinityConfig affinity;
  TrainConfig train;
  double bg_thresh = 0.45;
  int workers = 1;
};

/// Where a default value comes from: `reported` values are the method's
/// published settings, `chosen` values are local picks.
enum class Origin { reported, chosen };

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "size_t settings are stored as uint64");

struct ConfigField {
  std::string section;
  std::string key;
  std::variant<double*, int*, std::int64_t*, std::uint64_t*, bool*, std::string*>
      target;
  Origin origin = Origin::chosen;

  std::string path() const { return section + "." + key; }
};

namespace config_detail {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, end);
  // TOML floats need a fraction or exponent.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

template <typename T>
T parse_integer(std::string_view text, const std::string& what) {
  T v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw InvalidArgument(what + ": expected an integer, got '" + std::string(text) + "'");
  }
  return v;
}

inline double parse_double(std::string_view text, const std::string& what) {
  double v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw InvalidArgument(what + ": expected a number, got '" + std::string(text) + "'");
  }
  return v;
}

inline bool parse_bool(std::string_view text, const std::string& what) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw InvalidArgument(what + ": expected true or false, got '" + std::string(text) + "'");
}

}  // namespace config_detail

inline std::vector<ConfigField> config_fields(PipelineConfig& c) {
  using O = Origin;
  auto& a = c.train.align;
  return {
      {"fixture", "seed", &c.fixture.seed, O::chosen},
      {"fixture", "image_size", &c.fixture.image_size, O::chosen},
      {"fixture", "patch", &c.fixture.patch, O::chosen},
      {"fixture", "num_classes", &c.fixture.num_classes, O::chosen},
      {"fixture", "max_blobs", &c.fixture.max_blobs, O::chosen},
      {"fixture", "num_images", &c.fixture.num_images, O::chosen},
      {"fixture", "feat_dim", &c.fixture.feat_dim, O::chosen},
      {"fixture", "num_background", &c.fixture.num_background, O::chosen},
      {"fixture", "layers", &c.fixture.layers, O::chosen},
      {"fixture", "heads", &c.fixture.heads, O::chosen},
      {"fixture", "leakage", &c.fixture.leakage, O::chosen},
      {"fixture", "leak_bumps", &c.fixture.leak_bumps, O::chosen},
      {"slic", "superpixels", &c.slic.superpixels, O::chosen},
      {"slic", "compactness", &c.slic.compactness, O::chosen},
      {"slic", "iterations", &c.slic.iterations, O::chosen},
      {"slic", "regions", &c.slic.regions, O::chosen},
      {"slic", "high_conf_thresh", &c.slic.high_conf_thresh, O::chosen},
      {"slic", "ratio_thresh", &c.slic.ratio_thresh, O::chosen},
      {"slic", "ratio_mode", &c.slic.ratio_mode, O::chosen},
      {"slic", "seed", &c.slic.seed, O::chosen},
      {"affinity", "w_clip", &c.affinity.w_clip, O::reported},
      {"affinity", "w_dino", &c.affinity.w_dino, O::reported},
      {"affinity", "clip_layers", &c.affinity.clip_layers, O::chosen},
      {"affinity", "dino_layers", &c.affinity.dino_layers, O::chosen},
      {"affinity", "prop_steps", &c.affinity.prop_steps, O::chosen},
      {"affinity", "renormalize", &c.affinity.renormalize, O::chosen},
      {"train", "iterations", &c.train.iterations, O::chosen},
      {"train", "lr", &a.lr, O::reported},
      {"train", "weight_decay", &a.weight_decay, O::reported},
      {"train", "gamma", &a.gamma, O::reported},
      {"train", "tau_init", &a.tau_init, O::reported},
      {"train", "refresh", &a.refresh_interval, O::reported},
      {"train", "prototypes", &a.prototypes, O::chosen},
      {"train", "hidden_dim", &a.hidden_dim, O::chosen},
      {"train", "proj_dim", &a.proj_dim, O::chosen},
      {"train", "batch_images", &a.batch_images, O::chosen},
      {"train", "symmetric", &a.symmetric, O::chosen},
      {"train", "seed", &a.seed, O::chosen},
      {"labels", "bg_thresh", &c.bg_thresh, O::chosen},
      {"run", "workers", &c.workers, O::chosen},
  };
}

/// Sets one field from its textual form (a flag value).
inline void set_field(const ConfigField& f, std::string_view text) {
  using namespace config_detail;
  const auto what = f.path();
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, double>) {
          *p = parse_double(text, what);
        } else if constexpr (std::is_same_v<T, bool>) {
          *p = parse_bool(text, what);
        } else if constexpr (std::is_same_v<T, std::string>) {
          *p = std::string(text);
        } else {
          *p = parse_integer<T>(text, what);
        }
      },
      f.target);
}

inline std::string field_value(const ConfigField& f) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, double>) {
          return config_detail::format_double(*p);
        } else if constexpr (std::is_same_v<T, bool>) {
          return *p ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::string>) {
          return "\"" + *p + "\"";
        } else {
          return std::to_string(*p);
        }
      },
      f.target);
}

inline void validate(const PipelineConfig& c) {
  auto unit = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw InvalidArgument(std::string(name) + " must lie in [0, 1], got " +
                            config_detail::format_double(v));
    }
  };
  auto positive = [](auto v, const char* name) {
    if (!(v > 0)) throw InvalidArgument(std::string(name) + " must be positive");
  };
  c.fixture.validate();
  positive(c.slic.superpixels, "slic.superpixels");
  positive(c.slic.compactness, "slic.compactness");
  if (c.slic.iterations < 0) throw InvalidArgument("slic.iterations must be >= 0");
  positive(c.slic.regions, "slic.regions");
  unit(c.slic.high_conf_thresh, "slic.high_conf_thresh");
  unit(c.slic.ratio_thresh, "slic.ratio_thresh");
  if (c.slic.ratio_mode != "mass" && c.slic.ratio_mode != "count") {
    throw InvalidArgument("slic.ratio_mode must be \"mass\" or \"count\"");
  }
  unit(c.affinity.w_clip, "affinity.w_clip");
  unit(c.affinity.w_dino, "affinity.w_dino");
  if (std::abs(c.affinity.w_clip + c.affinity.w_dino - 1.0) > 1e-9) {
    throw InvalidArgument("affinity.w_clip + affinity.w_dino must equal 1");
  }
  positive(c.affinity.clip_layers, "affinity.clip_layers");
  positive(c.affinity.dino_layers, "affinity.dino_layers");
  positive(c.affinity.prop_steps, "affinity.prop_steps");
  if (c.train.iterations < 0) throw InvalidArgument("train.iterations must be >= 0");
  const auto& a = c.train.align;
  positive(a.lr, "train.lr");
  if (a.weight_decay < 0.0) throw InvalidArgument("train.weight_decay must be >= 0");
  if (a.gamma < 0.0) throw InvalidArgument("train.gamma must be >= 0");
  positive(a.tau_init, "train.tau_init");
  positive(a.refresh_interval, "train.refresh");
  positive(a.batch_images, "train.batch_images");
  // TOML integers are signed 64-bit; larger seeds could not be echoed.
  constexpr auto kMaxSeed = static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max());
  if (c.fixture.seed > kMaxSeed || c.slic.seed > kMaxSeed || a.seed > kMaxSeed) {
    throw InvalidArgument("seeds must be at most 2^63 - 1");
  }
  unit(c.bg_thresh, "labels.bg_thresh");
  positive(c.workers, "run.workers");
}

/// Overlays a TOML document. Unknown tables or keys are rejected.
inline void apply_toml(PipelineConfig& c, const toml::table& doc, const std::string& source) {
  auto fields = config_fields(c);
  for (const auto& [section, node] : doc) {
    const auto* table = node.as_table();
    if (!table) {
      throw InvalidArgument(source + ": top-level key '" + std::string(section.str()) +
                            "' must be a table");
    }
    for (const auto& [key, value] : *table) {
      const auto path = std::string(section.str()) + "." + std::string(key.str());
      auto it = std::find_if(fields.begin(), fields.end(),
                             [&](const ConfigField& f) { return f.path() == path; });
      if (it == fields.end()) throw InvalidArgument(source + ": unknown setting '" + path + "'");
      std::visit(
          [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, double>) {
              if (auto v = value.value<double>()) {
                *p = *v;
                return;
              }
            } else if constexpr (std::is_same_v<T, bool>) {
              if (auto v = value.value<bool>()) {
                *p = *v;
                return;
              }
            } else if constexpr (std::is_same_v<T, std::string>) {
              if (auto v = value.value<std::string>()) {
                *p = *v;
                return;
              }
            } else {
              if (value.is_integer()) {
                const auto v = value.as_integer()->get();
                if (v < 0 && std::is_unsigned_v<T>) {
                  throw InvalidArgument(source + ": " + path + " must be non-negative");
                }
                *p = static_cast<T>(v);
                return;
              }
            }
            throw InvalidArgument(source + ": " + path + " has the wrong type");
          },
          it->target);
    }
  }
}

inline void load_config_file(PipelineConfig& c, const std::filesystem::path& path) {
  toml::table doc;
  try {
    doc = toml::parse_file(path.string());
  } catch (const toml::parse_error& e) {
    const auto& src = e.source();
    std::ostringstream os;
    os << path.string() << ":" << src.begin.line << ":" << src.begin.column << ": "
       << e.description();
    throw FormatError(os.str(), 0);
  }
  apply_toml(c, doc, path.string());
}

/// The resolved configuration as TOML. Loading it reproduces every setting
/// that affects results. The [run] section (worker count) is left out, so
/// echoes from runs that differ only in parallelism are identical.
/// Comments tag each default's origin and flag values that differ from it.
inline std::string to_toml(PipelineConfig c) {
  PipelineConfig defaults;
  const auto base = config_fields(defaults);
  const auto fields = config_fields(c);
  std::ostringstream os;
  std::string section;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const auto& f = fields[i];
    if (f.section == "run") continue;
    if (f.section != section) {
      if (!section.empty()) os << "\n";
      section = f.section;
      os << "[" << section << "]\n";
    }
    const auto value = field_value(f);
    const auto def = field_value(base[i]);
    os << f.key << " = " << value << "  # "
       << (f.origin == Origin::reported ? "reported" : "chosen");
    if (value != def) os << ", default " << def;
    os << "\n";
  }
  return os.str();
}

inline RatioMode ratio_mode(const SlicConfig& s) {
  return s.ratio_mode == "count" ? RatioMode::count : RatioMode::mass;
}

}  // namespace ssr
