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

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensnet/dataset.hpp"
#include "lensnet/image.hpp"

namespace lensnet {

/// Families in application order.
enum class AugFamily { photometric, jpeg, gaussian_noise, blur, rotation };
inline constexpr std::array<AugFamily, 5> kAugFamilies{AugFamily::photometric, AugFamily::jpeg,
                                                       AugFamily::gaussian_noise, AugFamily::blur,
                                                       AugFamily::rotation};
std::string to_string(AugFamily family);
AugFamily aug_family_from_string(const std::string& name);

struct AugRanges {
  double jitter_min = 0.7;
  double jitter_max = 1.3;
  int jpeg_quality_min = 30;
  int jpeg_quality_max = 90;
  double noise_sigma_min = 0.01;
  double noise_sigma_max = 0.05;
  double blur_sigma_min = 0.5;
  double blur_sigma_max = 2.0;
  double rotation_max_deg = 5.0;
};

struct AugPolicy {
  std::map<AugFamily, double> type_weights{{AugFamily::photometric, 1.0},
                                           {AugFamily::jpeg, 0.9},
                                           {AugFamily::gaussian_noise, 0.8},
                                           {AugFamily::blur, 0.6},
                                           {AugFamily::rotation, 0.5}};
  double p_base = 0.15;
  double p_scale = 0.75;
  double clamp_low = 0.05;
  double clamp_high = 0.95;
  AugRanges ranges;
  bool enabled = true;
  /// Forced per-family probabilities, used as-is (no clamp). Families absent here use the policy formula.
  std::map<AugFamily, double> probability_override;
  /// When set, rotation uses exactly this angle instead of sampling.
  std::optional<double> fixed_rotation_deg;

  void validate() const;
  double weight(AugFamily family) const;
  /// All families forced to probability 0.
  static AugPolicy disabled();
};

void to_json(nlohmann::json& j, const AugPolicy& p);
void from_json(const nlohmann::json& j, AugPolicy& p);

/// 1 - log(1+count)/log(1+count_max). Throws ValidationError when count_max <= 0 or count > count_max.
double rarity(std::int64_t count, std::int64_t count_max);
/// clamp(p_base + p_scale r, clamp_low, clamp_high).
double class_aug_prob(double r, const AugPolicy& policy = {});
/// clamp(p_class w_type, clamp_low, clamp_high).
double applied_aug_prob(double p_class, double w_type, const AugPolicy& policy = {});

class RarityTable {
 public:
  RarityTable() = default;
  RarityTable(const ClassCensus& census, const AugPolicy& policy);

  /// Classes missing from the census have rarity 1.
  double rarity(const std::string& class_name) const;
  double p_class(const std::string& class_name) const;
  const std::map<std::string, double>& rarities() const { return rarity_; }

 private:
  std::map<std::string, double> rarity_;
  AugPolicy policy_;
};

/// Per-family application probability for a given p_class, honouring overrides and `enabled`.
double family_probability(AugFamily family, double p_class, const AugPolicy& policy);

struct AugDraw {
  std::vector<AugFamily> applied;
  std::array<double, 3> jitter{1, 1, 1};  // brightness, contrast, saturation
  int jpeg_quality = 90;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
  double blur_sigma = 0.0;
  double rotation_deg = 0.0;

  bool has(AugFamily f) const;
};

/// Draws which families fire and their parameters, without touching pixels.
AugDraw sample_augmentations(double p_class, const AugPolicy& policy, std::uint64_t seed);

struct AugmentResult {
  ImageTensor image;
  std::vector<Box> boxes;
  AugDraw draw;
};

/// Classifier-side: p_class comes from the rarity table for `label_class`.
ImageTensor apply_augmentations(const ImageTensor& image, const std::string& label_class, const AugPolicy& policy,
                                const RarityTable& rarity_table, std::uint64_t seed);
/// Detector-side: p_class = 1; boxes follow the rotation (bounding box of rotated corners, clipped).
AugmentResult apply_scene_augmentations(const ImageTensor& image, const std::vector<Box>& boxes,
                                        const AugPolicy& policy, std::uint64_t seed);
/// Applies an already drawn set of families.
AugmentResult apply_draw(const ImageTensor& image, const std::vector<Box>& boxes, const AugDraw& draw);

/// Rotates by `degrees` counterclockwise about the image centre; bilinear, exposed area filled with 0.
ImageTensor rotate_image(const ImageTensor& image, double degrees);
ImageTensor photometric_jitter(const ImageTensor& image, double brightness, double contrast, double saturation);
/// 8-bit JPEG encode/decode round trip.
ImageTensor jpeg_roundtrip(const ImageTensor& image, int quality);
ImageTensor gaussian_noise(const ImageTensor& image, double sigma, std::uint64_t seed);
ImageTensor blur_image(const ImageTensor& image, double sigma);

/// splitmix64 mix of (seed, FNV-1a(key), epoch); order-independent per-item seeds.
std::uint64_t item_seed(std::uint64_t seed, const std::string& key, std::uint64_t epoch = 0);

}  // namespace lensnet
