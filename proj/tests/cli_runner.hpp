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

// Runs the command-line tool as a subprocess and compares output trees.

#pragma once

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

namespace ssr::testing {

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

/// Runs `ssr <args>`; stdout and stderr are captured through files in `work`.
inline CliResult run_cli(const std::vector<std::string>& args, const std::filesystem::path& work) {
  std::filesystem::create_directories(work);
  std::string cmd = shell_quote(SSR_CLI_PATH);
  for (const auto& a : args) cmd += " " + shell_quote(a);
  const auto out = work / "cli.stdout", err = work / "cli.stderr";
  cmd += " >" + shell_quote(out.string()) + " 2>" + shell_quote(err.string());
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

/// Relative path -> file bytes for every regular file under `root`.
inline std::map<std::string, std::string> read_tree(const std::filesystem::path& root) {
  std::map<std::string, std::string> files;
  if (!std::filesystem::exists(root)) return files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file())
      files[std::filesystem::relative(e.path(), root).generic_string()] = slurp(e.path());
  return files;
}

/// Empty when identical, else the first differing or unmatched file.
inline std::string tree_difference(const std::filesystem::path& a, const std::filesystem::path& b) {
  const auto ta = read_tree(a), tb = read_tree(b);
  if (ta.empty()) return "no files under " + a.string();
  for (const auto& [name, bytes] : ta) {
    const auto it = tb.find(name);
    if (it == tb.end()) return name + " missing from " + b.string();
    if (it->second != bytes) return name + " differs";
  }
  for (const auto& [name, bytes] : tb)
    if (!ta.count(name)) return name + " missing from " + a.string();
  return {};
}

struct DeterminismCheck {
  std::string command;
  std::string problem;  // empty on success
};

/// Runs every subcommand twice with the same settings (and with different
/// worker counts where the command is parallel) and compares all outputs.
inline std::vector<DeterminismCheck> cli_determinism(const std::filesystem::path& work) {
  namespace fs = std::filesystem;
  fs::remove_all(work);
  std::vector<DeterminismCheck> checks;
  auto run = [&](const std::string& name, std::vector<std::string> args) {
    const auto r = run_cli(args, work / "logs" / name);
    if (r.exit_code != 0) {
      checks.push_back({name, "exit " + std::to_string(r.exit_code) + ": " + r.err});
      return false;
    }
    return true;
  };
  auto compare = [&](const std::string& name, const fs::path& a, const fs::path& b) {
    checks.push_back({name, tree_difference(a, b)});
  };
  const std::vector<std::string> fx = {"fixture", "--seed", "3", "--num-images", "6",
                                       "--image-size", "48", "--num-classes", "3"};
  for (const char* tag : {"a", "b"}) {
    auto args = fx;
    args.insert(args.end(), {"--out", (work / "fixture" / tag).string()});
    if (!run(std::string("fixture_") + tag, args)) return checks;
  }
  compare("fixture", work / "fixture/a", work / "fixture/b");
  const auto manifest = (work / "fixture/a/manifest.json").string();
  const auto image = (work / "fixture/a/images/img_0000.ppm").string();

  for (const char* tag : {"a", "b"}) {
    const auto dir = work / "slic" / tag;
    if (!run(std::string("slic_") + tag,
             {"slic", "--image", image, "--out", (dir / "labels.npy").string(), "--regions-out",
              (dir / "regions.npy").string(), "--viz", (dir / "viz.png").string(),
              "--superpixels", "60", "--regions", "4", "--seed", "5"}))
      return checks;
  }
  compare("slic", work / "slic/a", work / "slic/b");

  for (const char* tag : {"a", "b"}) {
    if (!run(std::string("prototypes_") + tag,
             {"prototypes", "--manifest", manifest, "--out", (work / "prototypes" / tag).string(),
              "--seed", "2"}))
      return checks;
  }
  compare("prototypes", work / "prototypes/a", work / "prototypes/b");

  for (const char* tag : {"a", "b"}) {
    if (!run(std::string("train-align_") + tag,
             {"train-align", "--manifest", manifest, "--out", (work / "train" / tag).string(),
              "--iters", "12", "--lr", "1e-4", "--batch-images", "3", "--refresh", "5",
              "--seed", "4"}))
      return checks;
  }
  compare("train-align", work / "train/a", work / "train/b");

  for (const auto& [tag, workers] :
       std::vector<std::pair<std::string, std::string>>{{"w1", "1"}, {"w4", "4"}, {"w1b", "1"}}) {
    if (!run("refine_" + tag, {"refine", "--manifest", manifest, "--out-dir",
                               (work / "refine" / tag).string(), "--workers", workers}))
      return checks;
  }
  compare("refine (workers 1 vs 1)", work / "refine/w1", work / "refine/w1b");
  compare("refine (workers 1 vs 4)", work / "refine/w1", work / "refine/w4");

  for (const auto& [tag, workers] :
       std::vector<std::pair<std::string, std::string>>{{"w1", "1"}, {"w3", "3"}, {"w1b", "1"}}) {
    const auto dir = work / "eval" / tag;
    if (!run("eval_" + tag, {"eval", "--pred-dir", (work / "refine/w1/pseudo_label").string(),
                             "--gt-dir", (work / "fixture/a/gt").string(), "--classes", manifest,
                             "--report", (dir / "report.json").string(), "--csv",
                             (dir / "per_class.csv").string(), "--plot",
                             (dir / "metrics.png").string(), "--workers", workers}))
      return checks;
  }
  compare("eval (workers 1 vs 1)", work / "eval/w1", work / "eval/w1b");
  compare("eval (workers 1 vs 3)", work / "eval/w1", work / "eval/w3");
  return checks;
}

}  // namespace ssr::testing
