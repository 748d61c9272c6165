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

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

#include "lensnet/dataset.hpp"
#include "lensnet/errors.hpp"
#include "test_util.hpp"

using namespace lensnet;
using lensnet::testing::TempDir;
using lensnet::testing::write_text;

namespace {

AnnotationRecord make_record(const std::string& id, std::vector<std::string> classes) {
  AnnotationRecord r;
  r.image_id = id;
  r.image_path = id + ".png";
  r.width = 100;
  r.height = 100;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const double x = 5.0 + 10.0 * static_cast<double>(i % 8);
    r.instances.push_back({{x, 10, x + 8, 20}, classes[i], {}});
  }
  return r;
}

std::vector<AnnotationRecord> random_manifest(int images, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> weights;
  for (int c = 0; c < classes; ++c) weights.push_back(1.0 / (1.0 + c));
  std::discrete_distribution<int> cls(weights.begin(), weights.end());
  std::uniform_int_distribution<int> per_image(1, 4);
  std::vector<AnnotationRecord> out;
  for (int i = 0; i < images; ++i) {
    std::vector<std::string> names;
    const int k = per_image(rng);
    for (int j = 0; j < k; ++j) names.push_back("c" + std::to_string(cls(rng)));
    out.push_back(make_record("img" + std::to_string(i), names));
  }
  return out;
}

std::string manifest_line(const std::string& id, int w, int h, const std::string& instances) {
  return R"({"image_id":")" + id + R"(","image_path":")" + id + R"(.png","width":)" + std::to_string(w) +
         R"(,"height":)" + std::to_string(h) + R"(,"instances":[)" + instances + "]}";
}

}  // namespace

TEST(Manifest, EmptyFileGivesEmptyList) {
  TempDir dir;
  write_text(dir / "m.jsonl", "");
  EXPECT_TRUE(load_manifest(dir / "m.jsonl").empty());
}

TEST(Manifest, MissingFileIsValidationError) {
  EXPECT_THROW(load_manifest("/nonexistent/m.jsonl"), ValidationError);
}

TEST(Manifest, BoxOutsideImageNamesField) {
  std::istringstream in(manifest_line("a", 100, 50, R"({"box":[10,10,120,40],"class_name":"stop"})") + "\n");
  try {
    parse_manifest(in);
    FAIL() << "expected ManifestError";
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.line(), 1u);
    EXPECT_EQ(e.field(), "instances[0].box.x_max");
    EXPECT_NE(std::string(e.what()).find("x_max"), std::string::npos);
  }
}

TEST(Manifest, TenRecordsMatchTextScan) {
  TempDir dir;
  std::mt19937_64 rng(3);
  std::ostringstream text;
  for (int i = 0; i < 10; ++i) {
    std::string inst;
    const int k = static_cast<int>(rng() % 4);
    for (int j = 0; j < k; ++j) {
      if (j) inst += ",";
      inst += R"({"box":[1,2,30,40],"class_name":"stop","attributes":["occluded"]})";
    }
    text << manifest_line("r" + std::to_string(i), 64, 64, inst) << "\n";
  }
  write_text(dir / "m.jsonl", text.str());
  const std::string s = text.str();
  std::size_t expected = 0;
  for (auto pos = s.find("\"class_name\""); pos != std::string::npos; pos = s.find("\"class_name\"", pos + 1))
    ++expected;
  const auto records = load_manifest(dir / "m.jsonl");
  ASSERT_EQ(records.size(), 10u);
  std::size_t got = 0;
  for (const auto& r : records) got += r.instances.size();
  EXPECT_EQ(got, expected);
  EXPECT_EQ(records[0].image_path, dir.path() / "r0.png");
}

TEST(Manifest, RejectsWholeFileOnAnyBadLine) {
  std::istringstream in(manifest_line("a", 10, 10, "") + "\n" + manifest_line("b", 10, 10, "") +
                        "\n{\"image_id\":\"c\"}\n");
  try {
    parse_manifest(in);
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_EQ(e.field(), "image_path");
  }
}

TEST(Manifest, SchemaViolations) {
  auto fails = [](const std::string& line, const std::string& field, const ClassList* classes = nullptr) {
    std::istringstream in(line + "\n");
    try {
      parse_manifest(in, classes);
    } catch (const ManifestError& e) {
      EXPECT_EQ(e.field(), field) << line;
      return;
    }
    ADD_FAILURE() << "accepted: " << line;
  };
  fails(R"({"image_id":"a","image_path":"a.png","width":10,"height":10,"instances":[],"extra":1})", "extra");
  fails(manifest_line("a", 0, 10, ""), "width");
  fails(manifest_line("a", 10, 10, R"({"box":[5,1,4,3],"class_name":"x"})"), "instances[0].box");
  fails(manifest_line("a", 10, 10, R"({"box":[1,1,4],"class_name":"x"})"), "instances[0].box");
  fails(manifest_line("a", 10, 10, R"({"box":[1,1,4,4],"class_name":"x","attributes":["shiny"]})"),
        "instances[0].attributes");
  fails("not json", "record");
  ClassList classes({"stop"});
  fails(manifest_line("a", 10, 10, R"({"box":[1,1,4,4],"class_name":"yield"})"), "instances[0].class_name",
        &classes);
  fails(manifest_line("a", 10, 10, "") + "\n" + manifest_line("a", 10, 10, ""), "image_id");
}

TEST(Manifest, TagsOptionalAndRoundTrip) {
  TempDir dir;
  auto r = make_record("x", {"a", "b"});
  r.tags = {"time=night"};
  r.instances[0].attributes = {"occluded"};
  auto r2 = make_record("y", {"a"});
  std::vector<AnnotationRecord> in{r, r2};
  write_manifest(in, dir / "m.jsonl");
  const auto back = load_manifest(dir / "m.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].tags, r.tags);
  EXPECT_EQ(back[0].instances[0].attributes, r.instances[0].attributes);
  EXPECT_EQ(back[1].instances[0].box, r2.instances[0].box);
  std::istringstream untagged(manifest_line("z", 10, 10, ""));
  EXPECT_TRUE(parse_manifest(untagged)[0].tags.empty());
}

TEST(ClassListTest, LoadSaveAndIndex) {
  TempDir dir;
  write_text(dir / "classes.txt", "stop\nyield\n\nspeed\n");
  auto cl = ClassList::load(dir / "classes.txt");
  ASSERT_EQ(cl.size(), 3u);
  EXPECT_EQ(*cl.index_of("speed"), 2u);
  EXPECT_FALSE(cl.index_of("none").has_value());
  cl.save(dir / "out.txt");
  EXPECT_EQ(ClassList::load(dir / "out.txt").names(), cl.names());
  EXPECT_THROW(ClassList({"a", "a"}), ValidationError);
}

TEST(Census, SingleInstance) {
  std::vector<AnnotationRecord> r{make_record("a", {"stop"})};
  EXPECT_DOUBLE_EQ(census(r).mean_instances_per_image(), 1.0);
}

TEST(Census, CountMax) {
  std::vector<AnnotationRecord> r{make_record("a", {"a", "a", "b"}), make_record("b", {"a"})};
  const auto c = census(r);
  EXPECT_EQ(c.count("a"), 3);
  EXPECT_EQ(c.count("b"), 1);
  EXPECT_EQ(c.count_max, 3);
  EXPECT_EQ(c.total_instances, 4);
}

TEST(Census, EmptyThrows) { EXPECT_THROW(census(std::vector<AnnotationRecord>{}), ValidationError); }

TEST(Census, Additivity) {
  auto all = random_manifest(60, 6, 11);
  std::vector<AnnotationRecord> a(all.begin(), all.begin() + 25);
  std::vector<AnnotationRecord> b(all.begin() + 25, all.end());
  const auto ca = census(a);
  const auto cb = census(b);
  const auto cu = census(all);
  for (const auto& [name, n] : cu.counts) EXPECT_EQ(n, ca.count(name) + cb.count(name)) << name;
  std::int64_t total = 0;
  for (const auto& [_, n] : cu.counts) total += n;
  EXPECT_EQ(total, cu.total_instances);
}

TEST(Folds, TwoFoldsFourImages) {
  std::vector<AnnotationRecord> r;
  for (int i = 0; i < 4; ++i) r.push_back(make_record("i" + std::to_string(i), {"a"}));
  const auto split = stratified_kfold(r, 2, 0);
  ASSERT_EQ(split.folds.size(), 2u);
  EXPECT_EQ(split.folds[0].image_ids.size(), 2u);
  EXPECT_EQ(split.folds[1].image_ids.size(), 2u);
}

TEST(Folds, HundredImagesWithinOneInstance) {
  const auto records = random_manifest(100, 8, 42);
  for (int k : {2, 3, 5}) {
    const auto split = stratified_kfold(records, k, 1234);
    std::map<std::string, const AnnotationRecord*> by_id;
    for (const auto& r : records) by_id[r.image_id] = &r;
    std::set<std::string> seen;
    std::map<std::string, std::vector<int>> per_fold;
    const auto total = census(records);
    for (const auto& f : split.folds) {
      for (const auto& id : f.image_ids) {
        EXPECT_TRUE(seen.insert(id).second);
        for (const auto& inst : by_id.at(id)->instances) {
          auto& v = per_fold[inst.class_name];
          v.resize(k, 0);
          ++v[f.fold_index];
        }
      }
    }
    EXPECT_EQ(seen.size(), records.size());
    double worst = 0;
    for (const auto& [name, counts] : per_fold) {
      const double target = static_cast<double>(total.count(name)) / k;
      for (int n : counts) worst = std::max(worst, std::abs(n - target));
    }
    EXPECT_LE(worst, 1.0) << "K=" << k;
    EXPECT_NEAR(split.max_class_deviation, worst, 1e-9);
  }
}

TEST(Folds, Deterministic) {
  const auto records = random_manifest(80, 5, 9);
  const auto a = stratified_kfold(records, 5, 77);
  const auto b = stratified_kfold(records, 5, 77);
  for (int f = 0; f < 5; ++f) EXPECT_EQ(a.folds[f].image_ids, b.folds[f].image_ids);
}

TEST(Folds, TooManyFolds) {
  std::vector<AnnotationRecord> r{make_record("a", {"x"}), make_record("b", {"x"})};
  EXPECT_THROW(stratified_kfold(r, 3, 0), ValidationError);
  EXPECT_THROW(stratified_kfold(r, 1, 0), ValidationError);
}

TEST(Folds, FileRoundTrip) {
  TempDir dir;
  const auto records = random_manifest(30, 3, 5);
  const auto split = stratified_kfold(records, 3, 1);
  write_folds(split.folds, dir / "folds.json");
  const auto back = read_folds(dir / "folds.json");
  ASSERT_EQ(back.size(), 3u);
  for (int f = 0; f < 3; ++f) EXPECT_EQ(back[f].image_ids, split.folds[f].image_ids);
  write_text(dir / "bad.json", R"({"0":["a"],"1":["a"]})");
  EXPECT_THROW(read_folds(dir / "bad.json"), ValidationError);
}

TEST(Crops, SquareBoxResizeOnly) {
  ImageTensor img(40, 40, 3);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = (x + y + c) / 100.0;
  const auto crop = crop_box(img, {10, 10, 30, 30}, 20);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x) EXPECT_DOUBLE_EQ(crop.at(y, x, 1), img.at(y + 10, x + 10, 1));
  EXPECT_EQ(crop_box(img, {0, 0, 40, 40}, kDefaultCropSize).width(), 224);
}

TEST(Crops, LetterboxPadsWithZeros) {
  ImageTensor img(30, 40, 3, 1.0);
  const auto crop = crop_box(img, {5, 5, 25, 15}, 20);
  ASSERT_EQ(crop.height(), 20);
  std::size_t zeros = 0;
  for (double v : crop.values()) zeros += v == 0.0;
  EXPECT_EQ(zeros, 20u * 10u * 3u);
  EXPECT_EQ(crop.at(0, 0, 0), 0.0);
  EXPECT_EQ(crop.at(10, 10, 0), 1.0);
  const auto stretched = crop_box(img, {5, 5, 25, 15}, 20, CropMode::stretch);
  EXPECT_EQ(stretched.min_value(), 1.0);
}

TEST(Crops, ClipsAndRejectsDegenerate) {
  ImageTensor img(10, 10, 3, 0.5);
  EXPECT_EQ(crop_box(img, {-5, -5, 5, 5}, 8).height(), 8);
  EXPECT_THROW(crop_box(img, {12, 0, 15, 5}, 8), ValidationError);
}

TEST(Crops, ExtractFromFiles) {
  TempDir dir;
  std::vector<AnnotationRecord> records;
  for (const std::string id : {"b", "a"}) {
    ImageTensor img(32, 48, 3, 0.25);
    write_image(img, dir / (id + ".png"));
    AnnotationRecord r;
    r.image_id = id;
    r.image_path = dir / (id + ".png");
    r.width = 48;
    r.height = 32;
    r.instances.push_back({{1, 1, 10, 30}, "x", {}});
    r.instances.push_back({{20, 5, 47.5, 20}, "y", {}});
    records.push_back(r);
  }
  const auto crops = extract_crops(records, 16);
  ASSERT_EQ(crops.size(), 4u);
  EXPECT_EQ(crops[0].image_id, "a");
  EXPECT_EQ(crops[1].instance_index, 1);
  EXPECT_EQ(crops[2].image_id, "b");
  for (const auto& c : crops) {
    EXPECT_EQ(c.crop.width(), 16);
    EXPECT_GE(c.crop.min_value(), 0.0);
    EXPECT_LE(c.crop.max_value(), 1.0);
  }
  records[0].image_path = dir / "missing.png";
  EXPECT_THROW(extract_crops(records, 16), IoError);
}
