/*
 * Copyright 2026 The lensnet Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "lensnet/config.hpp"
#include "lensnet/dataset.hpp"
#include "lensnet/experiment.hpp"
#include "test_util.hpp"

using namespace lensnet;
using lensnet::testing::TempDir;
using json = nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = cli::run_command(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<json> json_lines(const std::string& text) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

}  // namespace

TEST(Cli, NoSubcommandPrintsUsageAndFails) {
  const auto r = run({});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST(Cli, UnknownSubcommandFails) {
  const auto r = run({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST(Cli, HelpSucceeds) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* sub : {"stats", "split", "train-detector", "train-classifier", "detect", "classify", "eval",
                          "enhance", "synth", "ablate", "crossval"})
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
}

TEST(Cli, MissingRequiredOptionFails) { EXPECT_EQ(run({"stats"}).code, 1); }

TEST(Cli, BadConfigIsValidationErrorMissingFileIsRuntimeError) {
  TempDir dir;
  lensnet::testing::write_text(dir / "bad.json", R"({"sead": 1})");
  EXPECT_EQ(run({"train-detector", "--config", (dir / "bad.json").string()}).code, 1);
  EXPECT_EQ(run({"train-detector", "--config", (dir / "missing.json").string()}).code, 2);
}

TEST(Cli, DefaultConfigParsesBack) {
  const auto r = run({"default-config"});
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(ToolkitConfig::parse(r.out).dump(), r.out);
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir();
    const auto data = (dir_->path() / "ds").string();
    synth_ = new Result(run({"synth", "--classes", "8", "--images", "40", "--dark", "--seed", "3", "--out", data}));
    ToolkitConfig c = ToolkitConfig::parse("{}");
    c.manifest = "ds/manifest.jsonl";
    c.classes = "ds/classes.txt";
    c.output_dir = "out";
    c.detector.schedule.head_epochs = 1;
    c.detector.schedule.joint_epochs = 2;
    c.detector.schedule.batch_size = 8;
    c.detector.backbone = {{"kind", "tiny"}, {"width", 8}, {"seed", 0}};
    c.classifier.train.epochs = 5;
    c.classifier.crop_size = 32;
    c.classifier.fusion.heads = 4;
    c.crossval.folds = 2;
    c.save(dir_->path() / "cfg.json");
    config_ = (dir_->path() / "cfg.json").string();
  }
  static void TearDownTestSuite() {
    delete synth_;
    delete dir_;
  }

  static inline TempDir* dir_ = nullptr;
  static inline Result* synth_ = nullptr;
  static inline std::string config_;
};

TEST_F(CliPipeline, SynthOutputPassesManifestValidation) {
  ASSERT_EQ(synth_->code, 0) << synth_->err;
  const auto classes = ClassList::load(dir_->path() / "ds" / "classes.txt");
  const auto records = load_manifest(dir_->path() / "ds" / "manifest.jsonl", &classes);
  EXPECT_EQ(records.size(), 40u);
  EXPECT_EQ(classes.size(), 8u);
}

TEST_F(CliPipeline, StatsReportsMeanSignsPerImage) {
  const auto manifest = (dir_->path() / "ds" / "manifest.jsonl").string();
  const auto table = run({"stats", "--manifest", manifest});
  ASSERT_EQ(table.code, 0);
  EXPECT_NE(table.out.find("mean signs/image"), std::string::npos);
  const auto j = json::parse(run({"stats", "--manifest", manifest, "--json"}).out);
  EXPECT_DOUBLE_EQ(j.at("mean_signs_per_image").get<double>(),
                   j.at("instances").get<double>() / j.at("images").get<double>());
}

TEST_F(CliPipeline, SplitWritesReadableFolds) {
  const auto out = (dir_->path() / "folds.json").string();
  const auto r = run({"split", "--manifest", (dir_->path() / "ds" / "manifest.jsonl").string(), "--folds", "4",
                      "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_folds(out).size(), 4u);
}

TEST_F(CliPipeline, TrainDetectEnhanceClassifyEval) {
  const auto det = (dir_->path() / "det.ckpt").string();
  const auto cls = (dir_->path() / "cls.ckpt").string();
  ASSERT_EQ(run({"train-detector", "--config", config_, "--fold", "0", "--out", det}).code, 0);
  EXPECT_EQ(json_lines(run({"train-classifier", "--config", config_, "--fold", "0", "--out", cls}).out).size(), 1u);
  const auto trace = dir_->path() / "det.ckpt.trace.jsonl";
  EXPECT_TRUE(std::filesystem::exists(trace));

  const auto image = (dir_->path() / "ds" / "images" / "scene_00002.png").string();
  const auto none = run({"detect", "--image", image, "--checkpoint", det, "--threshold", "1.0"});
  ASSERT_EQ(none.code, 0) << none.err;
  EXPECT_TRUE(json_lines(none.out).empty());

  const auto crops = (dir_->path() / "crops").string();
  const auto some =
      run({"detect", "--image", image, "--checkpoint", det, "--threshold", "0.0", "--crops", crops, "--crop-size", "32"});
  ASSERT_EQ(some.code, 0) << some.err;
  const auto lines = json_lines(some.out);
  ASSERT_FALSE(lines.empty());
  for (const auto& l : lines) {
    EXPECT_EQ(l.at("box").size(), 4u);
    EXPECT_GE(l.at("confidence").get<double>(), 0.0);
    EXPECT_LE(l.at("confidence").get<double>(), 1.0);
  }

  const auto c = run({"classify", "--crop", lines[0].at("crop").get<std::string>(), "--checkpoint", cls});
  ASSERT_EQ(c.code, 0) << c.err;
  const auto pred = json::parse(c.out);
  EXPECT_TRUE(pred.contains("class_name"));
  EXPECT_GT(pred.at("probability").get<double>(), 0.0);

  const auto enhanced = (dir_->path() / "enh.png").string();
  EXPECT_EQ(run({"enhance", "--image", image, "--out", enhanced, "--gamma", "0.5", "--alpha", "1.5"}).code, 0);
  EXPECT_EQ(read_image(enhanced).width(), 64);
  EXPECT_EQ(run({"enhance", "--image", image, "--out", enhanced, "--checkpoint", det, "--gamma", "2"}).code, 1);

  const auto report = (dir_->path() / "eval.json").string();
  const auto e = run({"eval", "--config", config_, "--fold", "0", "--detector", det, "--classifier", cls, "--json", report});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("mAP@50"), std::string::npos);
  EXPECT_NE(e.out.find("macro precision"), std::string::npos);
  std::ifstream in(report);
  const auto j = json::parse(in);
  EXPECT_TRUE(j.contains("detection"));
  EXPECT_TRUE(j.contains("classification"));
  EXPECT_EQ(run({"eval", "--config", config_}).code, 1);
}

TEST_F(CliPipeline, AblateEmitsComparisonTable) {
  auto c = ToolkitConfig::load(config_);
  c.classifier.train.epochs = 1;
  c.save(dir_->path() / "cfg_ablate.json");
  const auto out = dir_->path() / "abl";
  const auto r = run({"ablate", "--config", (dir_->path() / "cfg_ablate.json").string(), "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* v : {"full", "no_cross_attention", "no_prompts", "no_gcnn", "no_embedding_tables"})
    EXPECT_NE(r.out.find(v), std::string::npos) << v;
  EXPECT_TRUE(std::filesystem::exists(out / "ablation.svg"));
  EXPECT_TRUE(std::filesystem::exists(out / "ablation.json"));
}

TEST_F(CliPipeline, CrossvalWritesVerifiedRecord) {
  const auto out = dir_->path() / "cv";
  const auto r = run({"crossval", "--config", config_, "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("accuracy"), std::string::npos);
  EXPECT_TRUE(verify_run_dir(out));
  EXPECT_TRUE(std::filesystem::exists(out / "folds.svg"));
}
