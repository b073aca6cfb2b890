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

#include <filesystem>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "cli_runner.hpp"
#include "ssr/npy.hpp"
#include "test_util.hpp"

namespace ssr {
namespace {

namespace fs = std::filesystem;
using testing::run_cli;

fs::path small_fixture(const fs::path& dir) {
  const auto r = run_cli({"fixture", "--out", (dir / "data").string(), "--num-images", "4",
                          "--image-size", "48", "--num-classes", "3"},
                         dir);
  EXPECT_EQ(r.exit_code, 0) << r.err;
  return dir / "data" / "manifest.json";
}

TEST(Cli, UnknownFlagIsAUsageError) {
  const auto dir = testing::scratch_dir();
  const auto r = run_cli({"refine", "--bogus"}, dir);
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST(Cli, MissingSubcommandIsAUsageError) {
  const auto r = run_cli({}, testing::scratch_dir());
  EXPECT_EQ(r.exit_code, 1);
}

TEST(Cli, MissingRequiredOptionIsAUsageError) {
  const auto r = run_cli({"refine"}, testing::scratch_dir());
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.err.find("--manifest"), std::string::npos);
}

TEST(Cli, InvalidSettingIsAUsageError) {
  const auto dir = testing::scratch_dir();
  const auto r = run_cli({"refine", "--manifest", "x.json", "--w-clip", "0.9"}, dir);
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.err.find("w_clip"), std::string::npos);
}

TEST(Cli, MissingManifestIsADataErrorNamingThePath) {
  const auto dir = testing::scratch_dir();
  const auto path = (dir / "nowhere" / "manifest.json").string();
  const auto r = run_cli({"refine", "--manifest", path, "--out-dir", (dir / "o").string()}, dir);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find(path), std::string::npos);
}

TEST(Cli, ManifestWithMissingFileIsADataErrorNamingThePath) {
  const auto dir = testing::scratch_dir();
  const auto manifest = small_fixture(dir);
  const auto victim = dir / "data" / "features" / "img_0001.dino_attn.npy";
  ASSERT_TRUE(fs::exists(victim));
  fs::remove(victim);
  const auto r = run_cli({"refine", "--manifest", manifest.string(), "--out-dir", (dir / "o").string()}, dir);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find(victim.string()), std::string::npos) << r.err;
}

TEST(Cli, CorruptTensorIsADataError) {
  const auto dir = testing::scratch_dir();
  const auto manifest = small_fixture(dir);
  testing::write_bytes(dir / "data" / "features" / "img_0000.clip_feat.npy", "not a tensor");
  const auto r = run_cli({"train-align", "--manifest", manifest.string(), "--out", (dir / "o").string(),
                          "--iters", "1"},
                         dir);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("img_0000.clip_feat.npy"), std::string::npos) << r.err;
}

TEST(Cli, DivergentTrainingIsANumericFailure) {
  const auto dir = testing::scratch_dir();
  const auto manifest = small_fixture(dir);
  const auto r = run_cli({"train-align", "--manifest", manifest.string(), "--out", (dir / "o").string(),
                          "--iters", "20", "--lr", "1e300"},
                         dir);
  EXPECT_EQ(r.exit_code, 3) << r.err;
  EXPECT_NE(r.err.find("isa.0.weight="), std::string::npos) << r.err;
}

TEST(Cli, ConfigSyntaxErrorIsADataError) {
  const auto dir = testing::scratch_dir();
  testing::write_bytes(dir / "bad.toml", "[slic\n");
  const auto r = run_cli({"fixture", "--out", (dir / "o").string(), "--config", (dir / "bad.toml").string()}, dir);
  EXPECT_EQ(r.exit_code, 2);
}

TEST(Cli, FixtureThenRefineProducesOutputs) {
  const auto dir = testing::scratch_dir();
  const auto manifest = small_fixture(dir);
  const auto out = dir / "refined";
  const auto r = run_cli({"refine", "--manifest", manifest.string(), "--out-dir", out.string(), "--json"}, dir);
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("schema_version"), 1);
  EXPECT_EQ(j.at("images"), 4);
  EXPECT_EQ(j.at("config").at("affinity").at("w_clip"), 0.4);
  for (int i = 0; i < 4; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "img_%04d", i);
    const Tensor cam = load_tensor(out / "refined_cam" / (std::string(id) + ".npy"));
    EXPECT_EQ(cam.rank(), 3u);
    const Tensor lbl = load_tensor(out / "pseudo_label" / (std::string(id) + ".npy"));
    EXPECT_EQ(lbl.dtype(), DType::i32);
  }
  EXPECT_TRUE(fs::exists(out / "resolved_config.toml"));
}

TEST(Cli, ResolvedConfigReproducesTheRun) {
  const auto dir = testing::scratch_dir();
  const auto manifest = small_fixture(dir);
  const auto a = dir / "a", b = dir / "b";
  auto r = run_cli({"train-align", "--manifest", manifest.string(), "--out", a.string(), "--iters", "6",
                    "--lr", "3e-4", "--batch-images", "2", "--seed", "11"},
                   dir);
  ASSERT_EQ(r.exit_code, 0) << r.err;
  r = run_cli({"train-align", "--manifest", manifest.string(), "--out", b.string(), "--config",
               (a / "resolved_config.toml").string()},
              dir);
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(testing::tree_difference(a, b), "");
}

TEST(Cli, FlagsOverrideConfigFile) {
  const auto dir = testing::scratch_dir();
  testing::write_bytes(dir / "c.toml", "[fixture]\nnum_images = 3\nimage_size = 40\n");
  const auto r = run_cli({"fixture", "--config", (dir / "c.toml").string(), "--num-images", "2",
                          "--out", (dir / "o").string(), "--json"},
                         dir);
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("images"), 2);
  EXPECT_EQ(j.at("config").at("fixture").at("image_size"), 40);
  const auto echo = testing::read_bytes(dir / "o" / "resolved_config.toml");
  EXPECT_NE(echo.find("num_images = 2  # chosen, default 24"), std::string::npos);
}

TEST(Cli, EvalAcceptsClassCountNamesOrManifest) {
  const auto dir = testing::scratch_dir();
  const auto manifest = small_fixture(dir);
  const auto gt = (dir / "data" / "gt").string();
  for (const std::string& classes : std::vector<std::string>{"3", "crimson,lime,azure", manifest.string()}) {
    const auto r = run_cli({"eval", "--pred-dir", gt, "--gt-dir", gt, "--classes", classes}, dir);
    ASSERT_EQ(r.exit_code, 0) << r.err;
    EXPECT_EQ(nlohmann::json::parse(r.out).at("miou"), 1.0);
  }
}

TEST(Cli, EveryCommandIsDeterministic) {
  for (const auto& c : testing::cli_determinism(testing::scratch_dir()))
    EXPECT_EQ(c.problem, "") << c.command;
}

}  // namespace
}  // namespace ssr
