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

#include "lensnet/experiment.hpp"

#include <sys/utsname.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <Eigen/Core>

#include "lensnet/augmentation.hpp"
#include "lensnet/embedding.hpp"
#include "lensnet/errors.hpp"

namespace lensnet {

using json = nlohmann::json;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp);
    out << text;
    if (!out) throw IoError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::string fmt(double v, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<')
      out += "&lt;";
    else if (c == '>')
      out += "&gt;";
    else if (c == '&')
      out += "&amp;";
    else
      out += c;
  }
  return out;
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

// ---- records ----

AggregateStat aggregate(std::span<const double> values) {
  if (values.empty()) throw ValidationError("cannot aggregate an empty list");
  AggregateStat a;
  a.count = static_cast<int>(values.size());
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  a.std = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  a.min = *lo;
  a.max = *hi;
  return a;
}

void ExperimentRecord::recompute_aggregates() {
  std::map<std::string, std::vector<double>> by_metric;
  for (const auto& f : folds)
    for (const auto& [name, v] : f.metrics) by_metric[name].push_back(v);
  aggregates.clear();
  for (const auto& [name, values] : by_metric) aggregates[name] = aggregate(values);
}

json ExperimentRecord::metrics_json() const {
  json folds_json = json::array();
  for (const auto& f : folds) folds_json.push_back({{"fold", f.fold}, {"metrics", f.metrics}});
  return {{"config_hash", config_hash}, {"folds", folds_json}, {"aggregates", aggregates}};
}

void to_json(json& j, const AggregateStat& a) {
  j = {{"mean", a.mean}, {"std", a.std}, {"min", a.min}, {"max", a.max}, {"count", a.count}};
}

void from_json(const json& j, AggregateStat& a) {
  a.mean = j.at("mean").get<double>();
  a.std = j.at("std").get<double>();
  a.min = j.at("min").get<double>();
  a.max = j.at("max").get<double>();
  a.count = j.at("count").get<int>();
}

void to_json(json& j, const FoldResult& f) {
  j = {{"fold", f.fold},
       {"metrics", f.metrics},
       {"train_images", f.train_images},
       {"test_images", f.test_images},
       {"seconds", f.seconds}};
}

void from_json(const json& j, FoldResult& f) {
  f.fold = j.at("fold").get<int>();
  f.metrics = j.at("metrics").get<std::map<std::string, double>>();
  f.train_images = j.at("train_images").get<int>();
  f.test_images = j.at("test_images").get<int>();
  f.seconds = j.at("seconds").get<double>();
}

void to_json(json& j, const ExperimentRecord& r) {
  j = {{"config_hash", r.config_hash},
       {"folds", r.folds},
       {"aggregates", r.aggregates},
       {"wall_clock_seconds", r.wall_clock_seconds},
       {"environment", r.environment},
       {"status", r.status}};
}

void from_json(const json& j, ExperimentRecord& r) {
  r.config_hash = j.at("config_hash").get<std::string>();
  r.folds = j.at("folds").get<std::vector<FoldResult>>();
  r.aggregates = j.at("aggregates").get<std::map<std::string, AggregateStat>>();
  r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  r.environment = j.at("environment");
  r.status = j.at("status").get<std::string>();
}

json environment_descriptor() {
  json env = {{"compiler", __VERSION__},
              {"cplusplus", static_cast<long>(__cplusplus)},
              {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                            std::to_string(EIGEN_MINOR_VERSION)},
              {"hardware_threads", std::thread::hardware_concurrency()},
#ifdef NDEBUG
              {"assertions", false}
#else
              {"assertions", true}
#endif
  };
  utsname u{};
  if (uname(&u) == 0) env["os"] = std::string(u.sysname) + " " + u.release + " " + u.machine;
  return env;
}

// ---- data plumbing ----

Dataset load_dataset(const ToolkitConfig& config) {
  config.check_paths();
  Dataset d;
  d.classes = ClassList::load(config.resolve(config.classes));
  d.records = load_manifest(config.resolve(config.manifest), &d.classes);
  if (d.records.empty()) throw ValidationError("manifest has no records");
  return d;
}

std::vector<FoldAssignment> resolve_folds(const ToolkitConfig& config, std::span<const AnnotationRecord> records) {
  if (!config.folds.empty()) return read_folds(config.resolve(config.folds));
  return stratified_kfold(records, config.crossval.folds, config.stage_seed("folds", 0)).folds;
}

std::pair<std::vector<AnnotationRecord>, std::vector<AnnotationRecord>> split_fold(
    std::span<const AnnotationRecord> records, std::span<const FoldAssignment> folds, int fold) {
  const auto it = std::find_if(folds.begin(), folds.end(), [&](const FoldAssignment& f) { return f.fold_index == fold; });
  if (it == folds.end()) throw ValidationError("fold " + std::to_string(fold) + " does not exist");
  std::set<std::string> known;
  for (const auto& r : records) known.insert(r.image_id);
  std::set<std::string> test_ids;
  for (const auto& id : it->image_ids) {
    if (!known.count(id)) throw ValidationError("fold file names unknown image '" + id + "'");
    test_ids.insert(id);
  }
  std::set<std::string> assigned;
  for (const auto& f : folds) assigned.insert(f.image_ids.begin(), f.image_ids.end());
  std::pair<std::vector<AnnotationRecord>, std::vector<AnnotationRecord>> out;
  for (const auto& r : records) {
    if (test_ids.count(r.image_id))
      out.second.push_back(r);
    else if (assigned.count(r.image_id))
      out.first.push_back(r);
  }
  return out;
}

// ---- detector stage ----

DetectorRun fit_detector(const ToolkitConfig& config, std::span<const AnnotationRecord> train, int fold) {
  DetectorRun run;
  run.model.config = config.enhance;
  run.model.backbone = make_backbone(config.detector.backbone);
  if (!config.detector.init_checkpoint.empty()) {
    const auto init = load_detector(config.resolve(config.detector.init_checkpoint));
    if (init.backbone->identifier() != run.model.backbone->identifier())
      throw ValidationError("init checkpoint backbone '" + init.backbone->identifier() + "' does not match '" +
                            run.model.backbone->identifier() + "'");
    nn::load_state(run.model.backbone->parameters(), nn::state_to_json(init.backbone->parameters()));
  }
  if (config.detector.wrapper)
    run.model.head = std::make_unique<ConvParamHead>(config.enhance, config.stage_seed("enhance-head", fold));
  auto schedule = config.detector.schedule;
  schedule.seed = config.stage_seed("detector", fold);
  const auto samples = load_detection_samples(train);
  run.history = train_detector(samples, run.model.head.get(), *run.model.backbone, config.enhance, schedule,
                               config.augmentation);
  return run;
}

DetectionSummary evaluate_detector(const DetectorModel& model, std::span<const AnnotationRecord> test,
                                   const DetectOptions& options) {
  const auto samples = load_detection_samples(test);
  std::vector<ImageTensor> images;
  BoxesByImage truth;
  for (const auto& s : samples) {
    images.push_back(s.image);
    truth.push_back(s.boxes);
  }
  const auto dets = detect_batch(images, model.head.get(), *model.backbone, model.config, options);
  return evaluate_detections(dets, truth);
}

// ---- classifier stage ----

ClassifierRun fit_classifier(const ToolkitConfig& config, std::span<const AnnotationRecord> train,
                             const ClassList& classes, ClassifierVariant variant, int fold) {
  if (train.empty()) throw ValidationError("classifier training set is empty");
  ClassifierRun run;
  run.bundle.classes = classes;
  run.bundle.provider = make_provider(config.classifier.provider);
  run.bundle.prompts.compute(*run.bundle.provider);
  auto fusion = config.classifier.fusion;
  fusion.num_classes = static_cast<int>(classes.size());
  run.bundle.model = std::make_shared<FusionClassifier>(fusion, run.bundle.provider->dim(),
                                                        static_cast<int>(run.bundle.prompts.size()), variant,
                                                        config.stage_seed("classifier-init", fold));
  const auto crops = extract_crops(train, config.classifier.crop_size);
  std::vector<int> targets;
  targets.reserve(crops.size());
  for (const auto& c : crops) targets.push_back(static_cast<int>(*classes.index_of(c.class_name)));
  const auto train_census = census(train);
  std::vector<std::int64_t> counts;
  for (const auto& name : classes.names()) counts.push_back(train_census.count(name));
  const auto policy = config.classifier.augment ? config.augmentation : AugPolicy::disabled();
  const RarityTable rarity(train_census, policy);
  const auto source =
      crop_embedding_source(crops, *run.bundle.provider, policy, rarity, config.stage_seed("classifier-aug", fold));
  auto options = config.classifier.train;
  options.seed = config.stage_seed("classifier", fold);
  run.history =
      train_classifier(*run.bundle.model, run.bundle.prompts.matrix(), source, targets, counts, options);
  return run;
}

ClassReport evaluate_classifier(const ClassifierBundle& bundle, std::span<const AnnotationRecord> test, int crop_size,
                                bool strict_zero) {
  const auto crops = extract_crops(test, crop_size);
  if (crops.empty()) throw ValidationError("evaluation set has no sign instances");
  std::vector<ImageTensor> images;
  images.reserve(crops.size());
  for (const auto& c : crops) images.push_back(c.crop);
  const auto v = embed_crops(images, *bundle.provider);
  const auto predictions = predict_classes(*bundle.model, v, bundle.prompts.matrix());
  std::vector<int> targets;
  for (const auto& c : crops) {
    const auto idx = bundle.classes.index_of(c.class_name);
    if (!idx) throw ValidationError("class '" + c.class_name + "' is not known to the classifier");
    targets.push_back(static_cast<int>(*idx));
  }
  return classification_report(predictions, targets, bundle.classes, strict_zero);
}

// ---- cross-validation ----

ExperimentRecord run_crossval(const ToolkitConfig& config, const CrossvalOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
  };
  ExperimentRecord record;
  record.config_hash = config.hash();
  record.environment = environment_descriptor();

  std::optional<std::filesystem::path> dir = options.output_dir;
  auto persist = [&] {
    if (!dir) return;
    record.wall_clock_seconds = seconds_since(t0);
    write_text_file(*dir / "record.json", json(record).dump(2) + "\n");
  };
  if (dir) {
    std::filesystem::create_directories(*dir);
    write_text_file(*dir / "config.json", config.dump());
    persist();
  }

  try {
    const auto data = load_dataset(config);
    const auto folds = resolve_folds(config, data.records);
    std::vector<int> fold_ids;
    for (const auto& f : folds) fold_ids.push_back(f.fold_index);
    std::sort(fold_ids.begin(), fold_ids.end());
    if (options.max_folds && *options.max_folds < static_cast<int>(fold_ids.size()))
      fold_ids.resize(static_cast<std::size_t>(std::max(0, *options.max_folds)));
    const auto variant = classifier_variant_from_string(config.classifier.variant);

    for (int k : fold_ids) {
      const auto tf = std::chrono::steady_clock::now();
      const auto [train, test] = split_fold(data.records, folds, k);
      if (train.empty() || test.empty()) throw ValidationError("fold " + std::to_string(k) + " leaves an empty split");
      FoldResult result;
      result.fold = k;
      result.train_images = static_cast<int>(train.size());
      result.test_images = static_cast<int>(test.size());
      if (config.crossval.detector) {
        log("fold " + std::to_string(k) + ": training detector on " + std::to_string(train.size()) + " images");
        const auto det = fit_detector(config, train, k);
        const auto summary = evaluate_detector(det.model, test, config.detector.detect);
        result.metrics["map50"] = summary.map50;
        result.metrics["map50_95"] = summary.map50_95;
      }
      if (config.crossval.classifier) {
        log("fold " + std::to_string(k) + ": training classifier");
        const auto cls = fit_classifier(config, train, data.classes, variant, k);
        const auto report = evaluate_classifier(cls.bundle, test, config.classifier.crop_size,
                                                config.crossval.strict_zero);
        result.metrics["macro_precision"] = report.macro_precision;
        result.metrics["macro_recall"] = report.macro_recall;
        result.metrics["accuracy"] = report.accuracy;
      }
      result.seconds = seconds_since(tf);
      record.folds.push_back(std::move(result));
      record.recompute_aggregates();
      persist();
    }
  } catch (const std::exception& e) {
    record.status = std::string("failed: ") + e.what();
    persist();
    throw;
  }
  record.status = "complete";
  record.wall_clock_seconds = seconds_since(t0);
  if (dir) {
    persist();
    write_text_file(*dir / "folds.svg", fold_boxplot_svg(record));
  }
  return record;
}

bool verify_run_dir(const std::filesystem::path& dir) {
  const auto config = ToolkitConfig::load(dir / "config.json");
  std::ifstream in(dir / "record.json");
  if (!in) throw IoError("cannot open " + (dir / "record.json").string());
  const auto record = json::parse(in).get<ExperimentRecord>();
  std::ifstream raw(dir / "config.json", std::ios::binary);
  std::stringstream ss;
  ss << raw.rdbuf();
  return record.config_hash == config.hash() && ss.str() == config.dump();
}

// ---- ablations ----

std::vector<AblationRow> run_ablation(const ToolkitConfig& config, int fold,
                                      const std::function<void(const std::string&)>& log) {
  const auto data = load_dataset(config);
  const auto folds = resolve_folds(config, data.records);
  const auto [train, test] = split_fold(data.records, folds, fold);
  std::vector<AblationRow> rows;
  for (auto variant : all_classifier_variants()) {
    if (log) log("ablation: " + to_string(variant));
    const auto t0 = std::chrono::steady_clock::now();
    const auto run = fit_classifier(config, train, data.classes, variant, fold);
    rows.push_back({to_string(variant),
                    evaluate_classifier(run.bundle, test, config.classifier.crop_size, config.crossval.strict_zero),
                    seconds_since(t0)});
  }
  return rows;
}

std::string format_ablation_table(std::span<const AblationRow> rows) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-22s %10s %10s %10s %12s\n", "variant", "A.P. %", "A.R. %", "Acc %",
                "vs full (pp)");
  out << line;
  double full = std::nan("");
  for (const auto& r : rows)
    if (r.variant == "full") full = r.report.accuracy;
  for (const auto& r : rows) {
    const double delta = std::isnan(full) ? 0.0 : 100.0 * (r.report.accuracy - full);
    std::snprintf(line, sizeof line, "%-22s %10.2f %10.2f %10.2f %+12.2f\n", r.variant.c_str(),
                  100.0 * r.report.macro_precision, 100.0 * r.report.macro_recall, 100.0 * r.report.accuracy, delta);
    out << line;
  }
  return out.str();
}

json to_json(std::span<const AblationRow> rows) {
  json out = json::array();
  for (const auto& r : rows)
    out.push_back({{"variant", r.variant},
                   {"macro_precision", r.report.macro_precision},
                   {"macro_recall", r.report.macro_recall},
                   {"accuracy", r.report.accuracy},
                   {"seconds", r.seconds}});
  return out;
}

// ---- plots ----

std::string fold_boxplot_svg(const ExperimentRecord& record) {
  std::vector<std::pair<std::string, std::vector<double>>> series;
  for (const auto& name : crossval_metric_names()) {
    std::vector<double> v;
    for (const auto& f : record.folds)
      if (auto it = f.metrics.find(name); it != f.metrics.end()) v.push_back(100.0 * it->second);
    if (!v.empty()) series.emplace_back(name, std::move(v));
  }
  const int slot = 110;
  const int left = 50;
  const int top = 30;
  const int height = 260;
  const int width = left + slot * static_cast<int>(std::max<std::size_t>(series.size(), 1)) + 20;
  auto y = [&](double v) { return top + height * (1.0 - v / 100.0); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << top + height + 50
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<text x=\"" << left << "\" y=\"16\">Per-fold metrics (%), config " << record.config_hash << "</text>\n";
  for (int t = 0; t <= 100; t += 20) {
    s << "<line x1=\"" << left << "\" x2=\"" << width - 10 << "\" y1=\"" << fmt(y(t), 1) << "\" y2=\"" << fmt(y(t), 1)
      << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << left - 28 << "\" y=\"" << fmt(y(t) + 4, 1) << "\">" << t << "</text>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& [name, v] = series[i];
    const double cx = left + slot * (static_cast<double>(i) + 0.5);
    const double q1 = quantile(v, 0.25);
    const double q2 = quantile(v, 0.5);
    const double q3 = quantile(v, 0.75);
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    s << "<line x1=\"" << fmt(cx, 1) << "\" x2=\"" << fmt(cx, 1) << "\" y1=\"" << fmt(y(*lo), 2) << "\" y2=\""
      << fmt(y(*hi), 2) << "\" stroke=\"#333\"/>\n";
    s << "<rect x=\"" << fmt(cx - 25, 1) << "\" y=\"" << fmt(y(q3), 2) << "\" width=\"50\" height=\""
      << fmt(std::max(y(q1) - y(q3), 0.5), 2) << "\" fill=\"#9ecae1\" stroke=\"#333\"/>\n";
    s << "<line x1=\"" << fmt(cx - 25, 1) << "\" x2=\"" << fmt(cx + 25, 1) << "\" y1=\"" << fmt(y(q2), 2)
      << "\" y2=\"" << fmt(y(q2), 2) << "\" stroke=\"#d62728\" stroke-width=\"2\"/>\n";
    for (double p : v)
      s << "<circle cx=\"" << fmt(cx, 1) << "\" cy=\"" << fmt(y(p), 2) << "\" r=\"2.5\" fill=\"#333\"/>\n";
    s << "<text x=\"" << fmt(cx, 1) << "\" y=\"" << top + height + 18 << "\" text-anchor=\"middle\">"
      << svg_escape(name) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string ablation_bars_svg(std::span<const AblationRow> rows) {
  const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c"};
  const char* labels[] = {"A.P.", "A.R.", "Acc"};
  const int slot = 130;
  const int left = 50;
  const int top = 40;
  const int height = 260;
  const int width = left + slot * static_cast<int>(std::max<std::size_t>(rows.size(), 1)) + 20;
  auto y = [&](double v) { return top + height * (1.0 - v / 100.0); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << top + height + 50
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int i = 0; i < 3; ++i)
    s << "<rect x=\"" << left + 70 * i << "\" y=\"8\" width=\"10\" height=\"10\" fill=\"" << colors[i]
      << "\"/><text x=\"" << left + 70 * i + 14 << "\" y=\"17\">" << labels[i] << "</text>\n";
  for (int t = 0; t <= 100; t += 20)
    s << "<text x=\"" << left - 28 << "\" y=\"" << fmt(y(t) + 4, 1) << "\">" << t << "</text>\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i].report;
    const double values[] = {100 * r.macro_precision, 100 * r.macro_recall, 100 * r.accuracy};
    for (int b = 0; b < 3; ++b) {
      const double x = left + slot * static_cast<double>(i) + 15 + 32 * b;
      s << "<rect x=\"" << fmt(x, 1) << "\" y=\"" << fmt(y(values[b]), 2) << "\" width=\"28\" height=\""
        << fmt(y(0) - y(values[b]), 2) << "\" fill=\"" << colors[b] << "\"/>\n";
    }
    s << "<text x=\"" << fmt(left + slot * (static_cast<double>(i) + 0.5), 1) << "\" y=\"" << top + height + 18
      << "\" text-anchor=\"middle\">" << svg_escape(rows[i].variant) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace lensnet
