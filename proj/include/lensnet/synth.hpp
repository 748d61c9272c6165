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
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensnet/dataset.hpp"
#include "lensnet/image.hpp"

namespace lensnet {

/// Colored geometric signs on textured backgrounds, optionally darkened into night scenes.
struct SynthOptions {
  int image_size = 64;
  int images = 100;
  /// Number of (color, shape) classes used, 1..28.
  int classes = 8;
  int min_signs = 1;
  int max_signs = 3;
  double min_sign_size = 10.0;
  double max_sign_size = 24.0;
  bool dark = true;
  /// Illumination gain range applied to the whole scene when `dark`.
  double illumination_min = 0.06;
  double illumination_max = 0.35;
  /// Exponent applied before the gain; > 1 crushes shadows further.
  double night_gamma = 1.6;
  double glare_probability = 0.5;
  double blur_probability = 0.3;
  double sensor_noise = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthOptions& o);
void from_json(const nlohmann::json& j, SynthOptions& o);

/// "<color>_<shape>" for class index 0..27; every shape appears with all seven colors.
std::string synth_class_name(int index);
std::vector<std::string> synth_class_names(int count);
/// Shape and color category indices (into the default category lists) of a synth class.
std::pair<int, int> synth_class_attributes(int index);

struct SynthScene {
  ImageTensor image;
  AnnotationRecord record;
};

/// Deterministic in (options.seed, index). The record's image_path is "images/<id>.png".
SynthScene generate_scene(const SynthOptions& options, int index);

/// Writes images/<id>.png, manifest.jsonl and classes.txt under `out_dir`; returns the records.
std::vector<AnnotationRecord> write_synthetic_dataset(const SynthOptions& options, const std::filesystem::path& out_dir);

/// Class supports of the 41-class nighttime sign dataset's evaluation report, in class-name order.
const std::vector<std::pair<std::string, std::int64_t>>& intsd_report_supports();

/// Annotation-only records shaped like the full dataset: `images` images and `instances` instances,
/// class totals proportional to intsd_report_supports() (largest remainder), 1-based long-tailed
/// signs per image. Paths point nowhere; meant for census and fold experiments.
std::vector<AnnotationRecord> intsd_shaped_records(std::uint64_t seed, int images = 6004, int instances = 14044);

}  // namespace lensnet
