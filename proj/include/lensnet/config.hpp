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

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "lensnet/augmentation.hpp"
#include "lensnet/classifier.hpp"
#include "lensnet/detector.hpp"
#include "lensnet/enhancement.hpp"

namespace lensnet {

struct DetectorSection {
  TrainSchedule schedule;
  nlohmann::json backbone = {{"kind", "tiny"}, {"width", 16}, {"seed", 0}};
  /// false trains and runs the bare backbone.
  bool wrapper = true;
  /// Used when scoring mAP, so the confidence threshold is low.
  DetectOptions detect{.confidence_threshold = 0.001};
  /// Optional detector checkpoint whose backbone weights initialise training.
  std::filesystem::path init_checkpoint;
};

struct ClassifierSection {
  FusionConfig fusion;
  ClassifierTrainOptions train;
  nlohmann::json provider = {{"kind", "random_features"}, {"dim", 64}, {"seed", 0}, {"grid", 8}};
  std::string variant = "full";
  int crop_size = kDefaultCropSize;
  /// Rarity-driven crop augmentation during classifier training.
  bool augment = true;
};

struct CrossvalSection {
  int folds = 5;
  bool detector = true;
  bool classifier = true;
  /// Undefined precision/recall count as 0 in the macro means.
  bool strict_zero = false;
};

/// One document holding every knob. Relative paths resolve against the config file's directory.
/// The top-level seed drives every stage; per-section seeds are derived from it and not stored.
struct ToolkitConfig {
  std::filesystem::path manifest;
  std::filesystem::path classes;
  /// Empty: folds are generated with stratified_kfold.
  std::filesystem::path folds;
  std::filesystem::path output_dir = "runs";
  std::uint64_t seed = 0;
  EnhanceConfig enhance;
  AugPolicy augmentation;
  DetectorSection detector;
  ClassifierSection classifier;
  CrossvalSection crossval;

  /// Not serialized.
  std::filesystem::path base_dir;

  /// Unknown keys anywhere in the known sections are rejected. Throws ValidationError.
  static ToolkitConfig parse(const std::string& text, const std::filesystem::path& base_dir = {});
  static ToolkitConfig load(const std::filesystem::path& path);
  /// Canonical text: sorted keys, two-space indent, trailing newline.
  std::string dump() const;
  void save(const std::filesystem::path& path) const;
  /// FNV-1a 64 of dump(), as 16 hex digits.
  std::string hash() const;

  std::filesystem::path resolve(const std::filesystem::path& p) const;
  void validate() const;
  /// Throws IoError when manifest, classes or folds (when set) do not exist.
  void check_paths() const;

  std::uint64_t stage_seed(const std::string& stage, int fold) const;
};

nlohmann::json to_json_value(const ToolkitConfig& c);

}  // namespace lensnet
