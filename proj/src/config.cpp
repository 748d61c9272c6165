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

#include "lensnet/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "lensnet/embedding.hpp"
#include "lensnet/errors.hpp"
#include "lensnet/hash.hpp"

namespace lensnet {

using json = nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw ValidationError("unknown key '" + key + "' in " + where);
}

std::set<std::string> keys_of(const json& j) {
  std::set<std::string> out;
  for (const auto& [key, _] : j.items()) out.insert(key);
  return out;
}

template <typename T>
T section(const json& j, const std::string& where) {
  check_keys(j, keys_of(json(T{})), where);
  return j.get<T>();
}

template <typename T>
void field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json without_seed(json j) {
  j.erase("seed");
  return j;
}

}  // namespace

json to_json_value(const ToolkitConfig& c) {
  const auto& d = c.detector;
  const auto& k = c.classifier;
  return {{"manifest", c.manifest.generic_string()},
          {"classes", c.classes.generic_string()},
          {"folds", c.folds.generic_string()},
          {"output_dir", c.output_dir.generic_string()},
          {"seed", c.seed},
          {"enhance", c.enhance},
          {"augmentation", c.augmentation},
          {"detector",
           {{"schedule", without_seed(d.schedule)},
            {"backbone", d.backbone},
            {"wrapper", d.wrapper},
            {"confidence_threshold", d.detect.confidence_threshold},
            {"nms_iou", d.detect.nms_iou},
            {"crop_size", d.detect.crop_size},
            {"init_checkpoint", d.init_checkpoint.generic_string()}}},
          {"classifier",
           {{"fusion", k.fusion},
            {"train", without_seed(k.train)},
            {"provider", k.provider},
            {"variant", k.variant},
            {"crop_size", k.crop_size},
            {"augment", k.augment}}},
          {"crossval",
           {{"folds", c.crossval.folds},
            {"detector", c.crossval.detector},
            {"classifier", c.crossval.classifier},
            {"strict_zero", c.crossval.strict_zero}}}};
}

ToolkitConfig ToolkitConfig::parse(const std::string& text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  ToolkitConfig c;
  c.base_dir = base_dir;
  try {
    check_keys(j, keys_of(to_json_value(c)), "config");
    auto path_field = [&](const json& obj, const char* key, std::filesystem::path& out) {
      if (obj.contains(key)) out = obj.at(key).get<std::string>();
    };
    path_field(j, "manifest", c.manifest);
    path_field(j, "classes", c.classes);
    path_field(j, "folds", c.folds);
    path_field(j, "output_dir", c.output_dir);
    field(j, "seed", c.seed);
    if (j.contains("enhance")) c.enhance = section<EnhanceConfig>(j.at("enhance"), "enhance");
    if (j.contains("augmentation")) c.augmentation = section<AugPolicy>(j.at("augmentation"), "augmentation");
    if (j.contains("detector")) {
      const auto& d = j.at("detector");
      check_keys(d, keys_of(to_json_value(ToolkitConfig{}).at("detector")), "detector");
      if (d.contains("schedule")) {
        check_keys(d.at("schedule"), keys_of(without_seed(TrainSchedule{})), "detector.schedule");
        c.detector.schedule = d.at("schedule").get<TrainSchedule>();
      }
      field(d, "backbone", c.detector.backbone);
      field(d, "wrapper", c.detector.wrapper);
      field(d, "confidence_threshold", c.detector.detect.confidence_threshold);
      field(d, "nms_iou", c.detector.detect.nms_iou);
      field(d, "crop_size", c.detector.detect.crop_size);
      path_field(d, "init_checkpoint", c.detector.init_checkpoint);
    }
    if (j.contains("classifier")) {
      const auto& k = j.at("classifier");
      check_keys(k, keys_of(to_json_value(ToolkitConfig{}).at("classifier")), "classifier");
      if (k.contains("fusion")) c.classifier.fusion = section<FusionConfig>(k.at("fusion"), "classifier.fusion");
      if (k.contains("train")) {
        check_keys(k.at("train"), keys_of(without_seed(ClassifierTrainOptions{})), "classifier.train");
        c.classifier.train = k.at("train").get<ClassifierTrainOptions>();
      }
      field(k, "provider", c.classifier.provider);
      field(k, "variant", c.classifier.variant);
      field(k, "crop_size", c.classifier.crop_size);
      field(k, "augment", c.classifier.augment);
    }
    if (j.contains("crossval")) {
      const auto& x = j.at("crossval");
      check_keys(x, keys_of(to_json_value(ToolkitConfig{}).at("crossval")), "crossval");
      field(x, "folds", c.crossval.folds);
      field(x, "detector", c.crossval.detector);
      field(x, "classifier", c.crossval.classifier);
      field(x, "strict_zero", c.crossval.strict_zero);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

ToolkitConfig ToolkitConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.parent_path());
}

std::string ToolkitConfig::dump() const { return to_json_value(*this).dump(2) + "\n"; }

void ToolkitConfig::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write config " + path.string());
  out << dump();
}

std::string ToolkitConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(dump())));
  return buf;
}

std::filesystem::path ToolkitConfig::resolve(const std::filesystem::path& p) const {
  if (p.empty() || p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

void ToolkitConfig::validate() const {
  enhance.validate();
  augmentation.validate();
  detector.schedule.validate();
  classifier.fusion.validate(0);
  classifier_variant_from_string(classifier.variant);
  make_backbone(detector.backbone);
  const auto provider = make_provider(classifier.provider);
  classifier.fusion.validate(provider->dim());
  if (crossval.folds < 2) throw ValidationError("crossval.folds must be >= 2");
  if (classifier.crop_size < 1 || detector.detect.crop_size < 1) throw ValidationError("crop sizes must be positive");
  const auto& d = detector.detect;
  if (!(d.confidence_threshold >= 0 && d.confidence_threshold <= 1) || !(d.nms_iou >= 0 && d.nms_iou <= 1))
    throw ValidationError("detector thresholds must lie in [0, 1]");
}

void ToolkitConfig::check_paths() const {
  auto require = [&](const std::filesystem::path& p, const char* what) {
    if (p.empty()) throw ValidationError(std::string("config does not set ") + what);
    if (!std::filesystem::exists(resolve(p))) throw IoError(std::string(what) + " not found: " + resolve(p).string());
  };
  require(manifest, "manifest");
  require(classes, "classes");
  if (!folds.empty()) require(folds, "folds");
  if (!detector.init_checkpoint.empty()) require(detector.init_checkpoint, "detector.init_checkpoint");
}

std::uint64_t ToolkitConfig::stage_seed(const std::string& stage, int fold) const {
  return splitmix64(splitmix64(seed ^ fnv1a(stage)) + static_cast<std::uint64_t>(fold));
}

}  // namespace lensnet
