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

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensnet/classifier.hpp"
#include "lensnet/config.hpp"
#include "lensnet/dataset.hpp"
#include "lensnet/detector.hpp"
#include "lensnet/metrics.hpp"

namespace lensnet {

/// Metric keys reported per fold, in report order.
inline const std::vector<std::string>& crossval_metric_names() {
  static const std::vector<std::string> names{"map50", "map50_95", "macro_precision", "macro_recall", "accuracy"};
  return names;
}

struct AggregateStat {
  double mean = 0.0;
  /// Sample standard deviation (n - 1); 0 for a single value.
  double std = 0.0;
  double min = 0.0;
  double max = 0.0;
  int count = 0;
};

/// Throws ValidationError on an empty input.
AggregateStat aggregate(std::span<const double> values);

struct FoldResult {
  int fold = 0;
  std::map<std::string, double> metrics;
  int train_images = 0;
  int test_images = 0;
  double seconds = 0.0;
};

struct ExperimentRecord {
  std::string config_hash;
  std::vector<FoldResult> folds;
  std::map<std::string, AggregateStat> aggregates;
  double wall_clock_seconds = 0.0;
  nlohmann::json environment;
  /// "running", "complete" or "failed: <message>".
  std::string status = "running";

  /// Recomputes `aggregates` from the stored per-fold values.
  void recompute_aggregates();
  /// Metrics only, free of timing and environment; equal for identical-seed runs.
  nlohmann::json metrics_json() const;
};

void to_json(nlohmann::json& j, const AggregateStat& a);
void from_json(const nlohmann::json& j, AggregateStat& a);
void to_json(nlohmann::json& j, const FoldResult& f);
void from_json(const nlohmann::json& j, FoldResult& f);
void to_json(nlohmann::json& j, const ExperimentRecord& r);
void from_json(const nlohmann::json& j, ExperimentRecord& r);

/// Compiler, standard library, OS, thread count and build flags.
nlohmann::json environment_descriptor();

struct Dataset {
  std::vector<AnnotationRecord> records;
  ClassList classes;
};

/// Loads manifest and class list named by the config.
Dataset load_dataset(const ToolkitConfig& config);
/// Folds from config.folds when set, otherwise stratified_kfold(records, crossval.folds, seed).
std::vector<FoldAssignment> resolve_folds(const ToolkitConfig& config, std::span<const AnnotationRecord> records);
/// (train, test): test is fold `fold`, train is every other fold. Throws ValidationError on unknown ids.
std::pair<std::vector<AnnotationRecord>, std::vector<AnnotationRecord>> split_fold(
    std::span<const AnnotationRecord> records, std::span<const FoldAssignment> folds, int fold);

struct DetectorRun {
  DetectorModel model;
  std::vector<DetectorEpoch> history;
};

DetectorRun fit_detector(const ToolkitConfig& config, std::span<const AnnotationRecord> train, int fold);
DetectionSummary evaluate_detector(const DetectorModel& model, std::span<const AnnotationRecord> test,
                                   const DetectOptions& options);

struct ClassifierRun {
  ClassifierBundle bundle;
  std::vector<ClassifierEpoch> history;
};

ClassifierRun fit_classifier(const ToolkitConfig& config, std::span<const AnnotationRecord> train,
                             const ClassList& classes, ClassifierVariant variant, int fold);
/// Ground-truth crops of `test` classified by the bundle.
ClassReport evaluate_classifier(const ClassifierBundle& bundle, std::span<const AnnotationRecord> test, int crop_size,
                                bool strict_zero);

struct CrossvalOptions {
  /// When set: config.json, record.json (rewritten after every fold) and folds.svg are written here.
  std::optional<std::filesystem::path> output_dir;
  /// Runs only the first `max_folds` folds when set.
  std::optional<int> max_folds;
  std::function<void(const std::string&)> log;
};

/// Trains and evaluates each fold in order and aggregates the five metrics. On a fold failure the
/// partial record (status "failed: ...") is written before the exception propagates.
ExperimentRecord run_crossval(const ToolkitConfig& config, const CrossvalOptions& options = {});

/// Reloads <dir>/config.json and checks its hash against <dir>/record.json.
bool verify_run_dir(const std::filesystem::path& dir);

struct AblationRow {
  std::string variant;
  ClassReport report;
  double seconds = 0.0;
};

/// Trains and evaluates every classifier variant on one fold.
std::vector<AblationRow> run_ablation(const ToolkitConfig& config, int fold,
                                      const std::function<void(const std::string&)>& log = {});
std::string format_ablation_table(std::span<const AblationRow> rows);
nlohmann::json to_json(std::span<const AblationRow> rows);

/// Per-metric box plots of the fold values.
std::string fold_boxplot_svg(const ExperimentRecord& record);
/// Accuracy, macro precision and macro recall bars per variant.
std::string ablation_bars_svg(std::span<const AblationRow> rows);

}  // namespace lensnet
