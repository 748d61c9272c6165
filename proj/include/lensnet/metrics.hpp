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
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensnet/dataset.hpp"

namespace lensnet {

struct Detection {
  Box box;
  double confidence = 0.0;
  int class_index = 0;
};

double iou(const Box& a, const Box& b);

struct MatchResult {
  /// Indexed like the input detections.
  std::vector<bool> true_positive;
  /// Matched ground-truth index or -1.
  std::vector<int> matched_gt;
  int unmatched_gt = 0;
};

/// Greedy: detections by descending confidence (stable), each takes the unmatched ground truth with the
/// highest IoU, provided IoU >= tau.
MatchResult match_detections(std::span<const Detection> detections, std::span<const Box> ground_truths, double tau);

enum class ApConvention { coco101, voc_all_point };

struct ApResult {
  double ap = 0.0;
  /// True when there are no ground truths; ap is then 0.
  bool undefined = false;
};

using DetectionsByImage = std::vector<std::vector<Detection>>;
using BoxesByImage = std::vector<std::vector<Box>>;

ApResult average_precision(const DetectionsByImage& detections, const BoxesByImage& ground_truths, double tau,
                           ApConvention convention = ApConvention::coco101);
ApResult average_precision(std::span<const Detection> detections, std::span<const Box> ground_truths, double tau,
                           ApConvention convention = ApConvention::coco101);

/// {0.50, 0.55, ..., 0.95}.
std::vector<double> coco_thresholds();

/// Mean AP over the thresholds.
double map_at(const DetectionsByImage& detections, const BoxesByImage& ground_truths,
              std::span<const double> thresholds, ApConvention convention = ApConvention::coco101);

struct DetectionSummary {
  double map50 = 0.0;
  double map50_95 = 0.0;
};
DetectionSummary evaluate_detections(const DetectionsByImage& detections, const BoxesByImage& ground_truths);

struct ClassMetrics {
  std::string name;
  double precision = 0.0;
  double recall = 0.0;
  bool precision_defined = false;
  bool recall_defined = false;
  std::int64_t support = 0;
  std::int64_t predicted = 0;
};

struct ClassReport {
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double accuracy = 0.0;
  int excluded_from_precision = 0;
  int excluded_from_recall = 0;
};

/// Precision is undefined for classes never predicted, recall for classes with no support; undefined
/// entries are left out of the macro means. With `strict_zero`, they count as 0 instead, except for
/// classes that are neither present nor predicted.
ClassReport classification_report(std::span<const int> predictions, std::span<const int> targets,
                                  const ClassList& classes, bool strict_zero = false);

nlohmann::json to_json(const ClassReport& report);
/// class | precision % | recall % | support, followed by macro means and accuracy.
std::string format_report_table(const ClassReport& report);

}  // namespace lensnet
