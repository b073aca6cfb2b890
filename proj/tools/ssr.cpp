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

// ssr: command-line front end.
//
//   ssr fixture      synthetic dataset + manifest
//   ssr slic         superpixels (and colour regions) for one image
//   ssr prototypes   image/text prototype banks for a manifest
//   ssr train-align  projection-head training, writes a checkpoint
//   ssr refine       superpixel-guided CAM refinement and pseudo labels
//   ssr eval         mIoU / precision / recall / confusion report
//
// Exit codes: 0 ok, 1 usage, 2 data or format error, 3 numeric failure.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ssr/cmpa.hpp"
#include "ssr/config.hpp"
#include "ssr/fixture.hpp"
#include "ssr/image.hpp"
#include "ssr/pipeline.hpp"
#include "ssr/superpixel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kJsonSchemaVersion = 1;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// Flags that override a config field, collected per subcommand.
struct FlagBinding {
  std::string field;  // section.key
  CLI::Option* option = nullptr;
  std::string value;
};

struct Command {
  CLI::App* app = nullptr;
  std::string config_path;
  bool json_out = false;
  bool verbose = false;
  std::vector<std::unique_ptr<FlagBinding>> bindings;

  void bind(const std::string& flag, const std::string& field, const std::string& help) {
    auto b = std::make_unique<FlagBinding>();
    b->field = field;
    b->option = app->add_option(flag, b->value, help + " [" + field + "]");
    bindings.push_back(std::move(b));
  }

  ssr::PipelineConfig resolve() const {
    ssr::PipelineConfig cfg;
    if (!config_path.empty()) ssr::load_config_file(cfg, config_path);
    auto fields = ssr::config_fields(cfg);
    for (const auto& b : bindings) {
      if (b->option->count() == 0) continue;
      for (const auto& f : fields)
        if (f.path() == b->field) ssr::set_field(f, b->value);
    }
    ssr::validate(cfg);
    return cfg;
  }
};

Command make_command(CLI::App& root, const std::string& name, const std::string& help) {
  Command c;
  c.app = root.add_subcommand(name, help);
  c.app->add_option("--config", c.config_path, "TOML config file");
  c.app->add_flag("--json", c.json_out, "print a JSON summary, including the resolved config");
  c.app->add_flag("-v,--verbose", c.verbose, "print the resolved config on stderr");
  return c;
}

json config_json(ssr::PipelineConfig cfg) {
  json j = json::object();
  for (const auto& f : ssr::config_fields(cfg)) {
    if (f.section == "run") continue;
    std::visit([&](auto* p) { j[f.section][f.key] = *p; }, f.target);
  }
  return j;
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  out << text;
  if (!out) throw ssr::IoError("cannot write " + path.string());
}

void echo_config(const ssr::PipelineConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  write_text(dir / "resolved_config.toml", ssr::to_toml(cfg));
}

json summary(const std::string& command, const ssr::PipelineConfig& cfg) {
  return json{{"schema_version", kJsonSchemaVersion}, {"command", command},
              {"config", config_json(cfg)}};
}

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

// --- fixture -----------------------------------------------------------------

json run_fixture(const ssr::PipelineConfig& cfg, const fs::path& out) {
  const auto m = ssr::write_fixture(cfg.fixture, out);
  echo_config(cfg, out);
  auto j = summary("fixture", cfg);
  j["manifest"] = (out / "manifest.json").generic_string();
  j["images"] = m.entries.size();
  return j;
}

// --- slic --------------------------------------------------------------------

void write_boundary_viz(const ssr::Tensor& rgb, const ssr::SuperpixelMap& sp, const fs::path& path) {
  ssr::Tensor viz = rgb;
  auto v = viz.values<std::uint8_t>();
  for (int y = 0; y < sp.height; ++y)
    for (int x = 0; x < sp.width; ++x) {
      const auto l = sp.at(y, x);
      const bool edge = (x + 1 < sp.width && sp.at(y, x + 1) != l) ||
                        (y + 1 < sp.height && sp.at(y + 1, x) != l);
      if (!edge) continue;
      const auto i = static_cast<std::size_t>((y * sp.width + x) * 3);
      v[i] = 255, v[i + 1] = 0, v[i + 2] = 0;
    }
  ssr::write_png(viz, path);
}

json run_slic(const ssr::PipelineConfig& cfg, const fs::path& image, const fs::path& out,
              const std::string& regions_out, const std::string& viz) {
  const auto rgb = ssr::load_image(image);
  const auto lab = ssr::rgb_to_lab(rgb);
  const int n = static_cast<int>(rgb.dim(0) * rgb.dim(1));
  const auto sp = ssr::slic_segment(lab, std::min(cfg.slic.superpixels, n), cfg.slic.compactness,
                                    cfg.slic.iterations);
  ensure_parent(out);
  ssr::save_tensor(sp.labels_tensor(), out);
  write_text(fs::path(out).replace_extension(".config.toml"), ssr::to_toml(cfg));
  auto j = summary("slic", cfg);
  j["superpixels"] = sp.num_superpixels;
  j["labels"] = out.generic_string();
  if (!regions_out.empty()) {
    const auto rc = ssr::cluster_superpixels(sp, std::min(cfg.slic.regions, sp.num_superpixels),
                                             cfg.slic.seed);
    ssr::Tensor regions(ssr::DType::i32, {sp.height, sp.width});
    auto r = regions.values<std::int32_t>();
    for (std::size_t p = 0; p < sp.labels.size(); ++p)
      r[p] = rc.region_of_superpixel[static_cast<std::size_t>(sp.labels[p])];
    ensure_parent(regions_out);
    ssr::save_tensor(regions, regions_out);
    j["regions"] = rc.num_regions;
    j["region_labels"] = regions_out;
  }
  if (!viz.empty()) {
    ensure_parent(viz);
    write_boundary_viz(rgb, sp, viz);
    j["viz"] = viz;
  }
  return j;
}

// --- prototypes / train-align ------------------------------------------------

std::size_t foreground_count(const ssr::DatasetManifest& m) {
  return static_cast<std::size_t>(m.num_foreground());
}

json run_prototypes(const ssr::PipelineConfig& cfg, const fs::path& manifest,
                    const std::string& checkpoint, const fs::path& out) {
  const auto m = ssr::load_manifest(manifest);
  const auto data = ssr::load_all_bundles(m);
  if (data.empty()) throw ssr::DataError("manifest has no entries");
  const auto& ac = cfg.train.align;
  ssr::AlignmentState s;
  if (!checkpoint.empty()) {
    s = ssr::load_checkpoint(checkpoint);
  } else {
    s = ssr::init_alignment(data.front().clip_feat.cols(), foreground_count(m), ac);
    ssr::calibrate_running_stats(s, data);
  }
  const auto k = ssr::prototype_count(ac, foreground_count(m));
  const auto pairs = ssr::collect_pairs(data, s);
  const auto bank = ssr::refresh_prototypes(pairs.f_image, pairs.f_text, pairs.class_of_pair, k,
                                            ac.seed);
  fs::create_directories(out);
  ssr::save_tensor(bank.image.to_tensor<double>(), out / "prototypes.image.npy");
  ssr::save_tensor(bank.text.to_tensor<double>(), out / "prototypes.text.npy");
  const auto n = static_cast<std::int64_t>(pairs.class_of_pair.size());
  std::vector<std::int32_t> cls(pairs.class_of_pair.begin(), pairs.class_of_pair.end());
  ssr::save_tensor(ssr::Tensor::from<std::int32_t>({n}, cls), out / "pairs.class.npy");
  ssr::save_tensor(ssr::Tensor::from<std::int32_t>({n}, ssr::pseudo_labels(pairs.f_image, bank.image)),
                   out / "pairs.cluster.npy");
  echo_config(cfg, out);
  auto j = summary("prototypes", cfg);
  j["pairs"] = n;
  j["k"] = k;
  j["matched_by_vote"] = bank.matched_by_vote;
  return j;
}

json run_train(const ssr::PipelineConfig& cfg, const fs::path& manifest, const fs::path& out) {
  const auto m = ssr::load_manifest(manifest);
  const auto data = ssr::load_all_bundles(m);
  ssr::TrainHistory h;
  auto s = ssr::train_align(data, foreground_count(m), cfg.train.align, cfg.train.iterations, &h);
  ssr::save_checkpoint(s, cfg.train.align, out);
  std::ostringstream csv;
  csv << "step,proto,proto_image,proto_text,seg,total\n";
  for (std::size_t i = 0; i < h.steps.size(); ++i) {
    const auto& l = h.steps[i];
    csv << i + 1 << "," << fmt(l.proto) << "," << fmt(l.proto_image) << "," << fmt(l.proto_text)
        << "," << fmt(l.seg) << "," << fmt(l.total) << "\n";
  }
  write_text(out / "history.csv", csv.str());
  echo_config(cfg, out);
  auto j = summary("train-align", cfg);
  j["iterations"] = s.iteration;
  j["initial_proto_loss"] = h.initial_eval.proto;
  j["final_proto_loss"] = h.final_eval.proto;
  j["tau"] = s.tau();
  j["checkpoint"] = out.generic_string();
  return j;
}

// --- refine / eval -----------------------------------------------------------

json run_refine_cmd(const ssr::PipelineConfig& cfg, const fs::path& manifest, const fs::path& out) {
  const auto m = ssr::load_manifest(manifest);
  const auto s = ssr::run_refine(m, cfg, out);
  echo_config(cfg, out);
  auto j = summary("refine", cfg);
  j["images"] = s.images;
  j["mask_fallbacks"] = s.mask_fallbacks;
  j["mean_kept_fraction"] = s.mean_kept_fraction;
  j["out_dir"] = out.generic_string();
  return j;
}

std::vector<std::string> parse_classes(const std::string& arg) {
  int count = 0;
  auto [ptr, ec] = std::from_chars(arg.data(), arg.data() + arg.size(), count);
  if (ec == std::errc() && ptr == arg.data() + arg.size()) {
    if (count < 1) throw ssr::InvalidArgument("--classes must be >= 1");
    std::vector<std::string> names;
    for (int c = 0; c < count; ++c) names.push_back("class_" + std::to_string(c));
    return names;
  }
  if (fs::path(arg).extension() == ".json") return ssr::load_manifest(arg).class_names;
  std::vector<std::string> names;
  std::stringstream ss(arg);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) names.push_back(item);
  if (names.empty()) throw ssr::InvalidArgument("--classes is empty");
  return names;
}

json run_eval(const ssr::PipelineConfig& cfg, const fs::path& pred, const fs::path& gt,
              const std::vector<std::string>& names, const std::string& report,
              const std::string& csv_path, const std::string& plot) {
  const auto r = ssr::evaluate_directories(pred, gt, static_cast<int>(names.size()), cfg.workers);
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json per_class = json::array();
  std::ostringstream csv;
  csv << "class,name,iou,precision,recall\n";
  for (std::size_t c = 0; c <= names.size(); ++c) {
    const std::string name = c == 0 ? "background" : names[c - 1];
    per_class.push_back({{"class", c},
                         {"name", name},
                         {"iou", num(r.metrics.per_class_iou[c])},
                         {"precision", num(r.metrics.per_class_precision[c])},
                         {"recall", num(r.metrics.per_class_recall[c])}});
    auto cell = [](double v) { return std::isnan(v) ? std::string() : fmt(v); };
    csv << c << "," << name << "," << cell(r.metrics.per_class_iou[c]) << ","
        << cell(r.metrics.per_class_precision[c]) << "," << cell(r.metrics.per_class_recall[c])
        << "\n";
  }
  auto j = summary("eval", cfg);
  j["images"] = r.images;
  j["pixels"] = r.confusion.pixel_count();
  j["miou"] = r.metrics.miou;
  j["precision"] = r.metrics.precision;
  j["recall"] = r.metrics.recall;
  j["confusion_ratio"] = r.metrics.confusion_ratio;
  j["per_class"] = per_class;
  j["confusion_matrix"] = r.confusion.matrix();
  if (!report.empty()) {
    write_text(report, j.dump(2) + "\n");
    write_text(fs::path(report).replace_extension(".config.toml"), ssr::to_toml(cfg));
  }
  if (!csv_path.empty()) write_text(csv_path, csv.str());
  if (!plot.empty()) {
    ensure_parent(plot);
    ssr::write_metrics_plot(r.metrics, plot);
  }
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Superpixel-guided CAM refinement and cross-modal prototype alignment"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand help for every subcommand");

  // fixture
  auto fx = make_command(app, "fixture", "write a synthetic dataset and manifest");
  std::string fx_out;
  fx.app->add_option("--out", fx_out, "output directory")->required();
  fx.bind("--seed", "fixture.seed", "random seed");
  fx.bind("--num-images", "fixture.num_images", "image count");
  fx.bind("--image-size", "fixture.image_size", "image side in pixels");
  fx.bind("--num-classes", "fixture.num_classes", "foreground classes");
  fx.bind("--max-blobs", "fixture.max_blobs", "classes per image, at most");
  fx.bind("--leakage", "fixture.leakage", "CAM background leakage strength");

  // slic
  auto sl = make_command(app, "slic", "segment one image into superpixels");
  std::string sl_image, sl_out, sl_regions_out, sl_viz;
  sl.app->add_option("--image", sl_image, "PNG, PPM or u8 [H,W,3] .npy")->required();
  sl.app->add_option("--out", sl_out, "superpixel labels (.npy, i32 [H,W])")->required();
  sl.app->add_option("--regions-out", sl_regions_out, "colour-region labels (.npy)");
  sl.app->add_option("--viz", sl_viz, "PNG with superpixel boundaries");
  sl.bind("--superpixels", "slic.superpixels", "target superpixel count");
  sl.bind("--compactness", "slic.compactness", "colour/space trade-off m");
  sl.bind("--iterations", "slic.iterations", "assignment/update rounds");
  sl.bind("--regions", "slic.regions", "colour clusters over superpixels");
  sl.bind("--seed", "slic.seed", "region clustering seed");

  // prototypes
  auto pr = make_command(app, "prototypes", "cluster image/text pairs into prototype banks");
  std::string pr_manifest, pr_ckpt, pr_out;
  pr.app->add_option("--manifest", pr_manifest, "manifest.json")->required();
  pr.app->add_option("--checkpoint", pr_ckpt, "train-align checkpoint directory");
  pr.app->add_option("--out", pr_out, "output directory")->required();
  pr.bind("--k", "train.prototypes", "prototypes per modality (0 = class count)");
  pr.bind("--seed", "train.seed", "random seed");

  // train-align
  auto tr = make_command(app, "train-align", "train the ISA/TSA projection heads");
  std::string tr_manifest, tr_out;
  tr.app->add_option("--manifest", tr_manifest, "manifest.json")->required();
  tr.app->add_option("--out", tr_out, "checkpoint directory")->required();
  tr.bind("--iters", "train.iterations", "training steps");
  tr.bind("--lr", "train.lr", "AdamW learning rate");
  tr.bind("--weight-decay", "train.weight_decay", "AdamW weight decay");
  tr.bind("--gamma", "train.gamma", "segmentation loss weight");
  tr.bind("--tau-init", "train.tau_init", "initial temperature");
  tr.bind("--refresh", "train.refresh", "prototype refresh interval");
  tr.bind("--k", "train.prototypes", "prototypes per modality (0 = class count)");
  tr.bind("--batch-images", "train.batch_images", "images per step");
  tr.bind("--seed", "train.seed", "random seed");
  tr.bind("--bg-thresh", "labels.bg_thresh", "background threshold for probe masks");

  // refine
  auto rf = make_command(app, "refine", "refine CAM seeds and write pseudo labels");
  std::string rf_manifest, rf_out;
  rf.app->add_option("--manifest", rf_manifest, "manifest.json")->required();
  rf.app->add_option("--out-dir", rf_out, "output directory")->default_val("refine_out");
  rf.bind("--w-clip", "affinity.w_clip", "CLIP attention weight");
  rf.bind("--w-dino", "affinity.w_dino", "DINO attention weight");
  rf.bind("--prop-steps", "affinity.prop_steps", "propagation steps");
  rf.bind("--clip-layers", "affinity.clip_layers", "last CLIP layers averaged");
  rf.bind("--dino-layers", "affinity.dino_layers", "last DINO layers averaged");
  rf.bind("--renormalize", "affinity.renormalize", "renormalise masked affinity rows");
  rf.bind("--ratio-thresh", "slic.ratio_thresh", "target-region ratio threshold");
  rf.bind("--high-thresh", "slic.high_conf_thresh", "high-confidence CAM threshold");
  rf.bind("--ratio-mode", "slic.ratio_mode", "mass or count");
  rf.bind("--superpixels", "slic.superpixels", "target superpixel count");
  rf.bind("--compactness", "slic.compactness", "SLIC compactness m");
  rf.bind("--regions", "slic.regions", "colour clusters over superpixels");
  rf.bind("--bg-thresh", "labels.bg_thresh", "background threshold");
  rf.bind("--workers", "run.workers", "worker threads");

  // eval
  auto ev = make_command(app, "eval", "score label maps against ground truth");
  std::string ev_pred, ev_gt, ev_classes, ev_report, ev_csv, ev_plot;
  ev.app->add_option("--pred-dir", ev_pred, "predicted label maps")->required();
  ev.app->add_option("--gt-dir", ev_gt, "ground-truth label maps")->required();
  ev.app->add_option("--classes", ev_classes,
                     "foreground class count, comma-separated names, or a manifest.json")
      ->required();
  ev.app->add_option("--report", ev_report, "JSON report path");
  ev.app->add_option("--csv", ev_csv, "per-class CSV path");
  ev.app->add_option("--plot", ev_plot, "PNG bar chart path");
  ev.bind("--workers", "run.workers", "worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << "\n" << app.help();
    return kUsage;
  }

  Command* active = nullptr;
  for (auto* c : {&fx, &sl, &pr, &tr, &rf, &ev})
    if (c->app->parsed()) active = c;

  ssr::PipelineConfig cfg;
  try {
    cfg = active->resolve();
  } catch (const ssr::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n\n" << active->app->help();
    return kUsage;
  }

  try {
    json result;
    if (active == &fx) {
      result = run_fixture(cfg, fx_out);
    } else if (active == &sl) {
      result = run_slic(cfg, sl_image, sl_out, sl_regions_out, sl_viz);
    } else if (active == &pr) {
      result = run_prototypes(cfg, pr_manifest, pr_ckpt, pr_out);
    } else if (active == &tr) {
      result = run_train(cfg, tr_manifest, tr_out);
    } else if (active == &rf) {
      result = run_refine_cmd(cfg, rf_manifest, rf_out);
    } else {
      result = run_eval(cfg, ev_pred, ev_gt, parse_classes(ev_classes), ev_report, ev_csv, ev_plot);
    }
    if (active->verbose) std::cerr << ssr::to_toml(cfg);
    if (active->json_out) {
      std::cout << result.dump(2) << "\n";
    } else {
      result.erase("config");
      std::cout << result.dump() << "\n";
    }
    return kOk;
  } catch (const ssr::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
}
