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
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "lensnet/image.hpp"

namespace lensnet {

/// Corner-form box in pixels.
struct Box {
  double x_min = 0;
  double y_min = 0;
  double x_max = 0;
  double y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  bool well_formed() const { return x_min < x_max && y_min < y_max; }
  bool operator==(const Box&) const = default;
};

/// Per-instance flags carried by the annotations.
inline const std::vector<std::string>& known_attributes() {
  static const std::vector<std::string> names{"tampered",  "unknown",  "advertisement",
                                              "warning",   "occluded", "out_of_frame"};
  return names;
}

struct SignInstance {
  Box box;
  std::string class_name;
  std::set<std::string> attributes;
};

struct AnnotationRecord {
  std::string image_id;
  std::filesystem::path image_path;
  int width = 0;
  int height = 0;
  std::vector<SignInstance> instances;
  std::set<std::string> tags;
};

/// Ordered class names; position is the class index.
class ClassList {
 public:
  ClassList() = default;
  explicit ClassList(std::vector<std::string> names);

  static ClassList load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  /// Classes in order of first appearance in the records.
  static ClassList from_records(std::span<const AnnotationRecord> records);

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(std::size_t index) const { return names_.at(index); }
  std::optional<std::size_t> index_of(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

 private:
  std::vector<std::string> names_;
  std::map<std::string, std::size_t> index_;
};

/// Parses JSON-lines; relative image paths resolve against `base_dir`.
/// Any malformed line rejects the whole stream with a ManifestError naming line and field.
std::vector<AnnotationRecord> parse_manifest(std::istream& in, const ClassList* classes = nullptr,
                                             const std::filesystem::path& base_dir = {});
std::vector<AnnotationRecord> load_manifest(const std::filesystem::path& path, const ClassList* classes = nullptr);
void write_manifest(std::span<const AnnotationRecord> records, const std::filesystem::path& path);

struct ClassCensus {
  std::map<std::string, std::int64_t> counts;
  std::int64_t count_max = 0;
  std::int64_t total_images = 0;
  std::int64_t total_instances = 0;

  double mean_instances_per_image() const {
    return total_images ? static_cast<double>(total_instances) / static_cast<double>(total_images) : 0.0;
  }
  std::int64_t count(const std::string& name) const;
};

/// Throws ValidationError on an empty record list.
ClassCensus census(std::span<const AnnotationRecord> records);

struct FoldAssignment {
  int fold_index = 0;
  std::vector<std::string> image_ids;
};

struct StratifiedSplit {
  std::vector<FoldAssignment> folds;
  /// Largest |fold count - total/K| over classes and folds, in instances.
  double max_class_deviation = 0.0;
  /// Largest |fold images - images/K|.
  double max_image_deviation = 0.0;
};

/// Greedy rarest-class-first assignment followed by deterministic move/swap refinement.
StratifiedSplit stratified_kfold(std::span<const AnnotationRecord> records, int folds, std::uint64_t seed);

void write_folds(std::span<const FoldAssignment> folds, const std::filesystem::path& path);
std::vector<FoldAssignment> read_folds(const std::filesystem::path& path);

enum class CropMode { letterbox, stretch };

/// Clips to the image, letterbox-pads to square with zeros (or stretches), then bilinear-resizes.
/// Throws ValidationError if the clipped box is empty.
ImageTensor crop_box(const ImageTensor& image, const Box& box, int size, CropMode mode = CropMode::letterbox);

struct LabeledCrop {
  ImageTensor crop;
  std::string class_name;
  std::string image_id;
  int instance_index = 0;
};

inline constexpr int kDefaultCropSize = 224;

/// One crop per instance, ordered by (image_id, instance index).
std::vector<LabeledCrop> extract_crops(std::span<const AnnotationRecord> records, int image_size = kDefaultCropSize,
                                       CropMode mode = CropMode::letterbox);

}  // namespace lensnet
