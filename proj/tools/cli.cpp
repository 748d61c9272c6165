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

#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>

#include <nlohmann/json.hpp>

#include "lensnet/augmentation.hpp"
#include "lensnet/classifier.hpp"
#include "lensnet/config.hpp"
#include "lensnet/dataset.hpp"
#include "lensnet/detector.hpp"
#include "lensnet/enhancement.hpp"
#include "lensnet/errors.hpp"
#include "lensnet/experiment.hpp"
#include "lensnet/image.hpp"
#include "lensnet/metrics.hpp"
#include "lensnet/synth.hpp"

namespace lensnet::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

json box_json(const Box& b) { return json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

std::string census_table(const ClassCensus& c, const AugPolicy& policy) {
  std::string out;
  char line[200];
  std::snprintf(line, sizeof line, "%-32s %8s %8s %8s %8s\n", "class", "count", "share %", "rarity", "p_class");
  out += line;
  const RarityTable rarity(c, policy);
  for (const auto& [name, n] : c.counts) {
    std::snprintf(line, sizeof line, "%-32s %8lld %8.2f %8.4f %8.4f\n", name.c_str(), static_cast<long long>(n),
                  100.0 * static_cast<double>(n) / static_cast<double>(c.total_instances), rarity.rarity(name),
                  rarity.p_class(name));
    out += line;
  }
  std::snprintf(line, sizeof line,
                "images: %lld\ninstances: %lld\nclasses: %zu\ncount_max: %lld\nmean signs/image: %.4f\n",
                static_cast<long long>(c.total_images), static_cast<long long>(c.total_instances), c.counts.size(),
                static_cast<long long>(c.count_max), c.mean_instances_per_image());
  out += line;
  return out;
}

struct Context {
  std::ostream& out;
  std::ostream& err;
};

ToolkitConfig load_config(const std::string& path) { return ToolkitConfig::load(path); }

fs::path output_dir(const ToolkitConfig& c) { return c.resolve(c.output_dir); }

// Records the model trains on: every fold but `fold`, or everything when fold < 0.
std::vector<AnnotationRecord> training_records(const ToolkitConfig& c, const Dataset& data, int fold) {
  if (fold < 0) return data.records;
  const auto folds = resolve_folds(c, data.records);
  return split_fold(data.records, folds, fold).first;
}

std::vector<AnnotationRecord> held_out_records(const ToolkitConfig& c, const Dataset& data, int fold) {
  const auto folds = resolve_folds(c, data.records);
  return split_fold(data.records, folds, fold).second;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Context ctx{out, err};
  CLI::App app{"Nighttime traffic sign detection and classification toolkit", "lensnet"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  std::function<void()> action;

  // stats
  std::string stats_manifest;
  std::string stats_classes;
  bool stats_json = false;
  auto* stats = app.add_subcommand("stats", "Class census of a manifest");
  stats->add_option("--manifest", stats_manifest, "JSON-lines manifest")->required();
  stats->add_option("--classes", stats_classes, "Class list (validates class names)");
  stats->add_flag("--json", stats_json, "Emit JSON instead of a table");
  stats->callback([&] {
    action = [&] {
      std::optional<ClassList> classes;
      if (!stats_classes.empty()) classes = ClassList::load(stats_classes);
      const auto records = load_manifest(stats_manifest, classes ? &*classes : nullptr);
      const auto c = census(records);
      if (stats_json) {
        ctx.out << json({{"counts", c.counts},
                         {"count_max", c.count_max},
                         {"images", c.total_images},
                         {"instances", c.total_instances},
                         {"mean_signs_per_image", c.mean_instances_per_image()}})
                       .dump(2)
                << "\n";
      } else {
        ctx.out << census_table(c, AugPolicy{});
      }
    };
  });

  // split
  std::string split_manifest;
  std::string split_out;
  int split_k = 5;
  std::uint64_t split_seed = 0;
  auto* split = app.add_subcommand("split", "Stratified k-fold split of a manifest");
  split->add_option("--manifest", split_manifest, "JSON-lines manifest")->required();
  split->add_option("--folds", split_k, "Number of folds")->capture_default_str();
  split->add_option("--seed", split_seed, "Seed")->capture_default_str();
  split->add_option("--out", split_out, "Fold file to write")->required();
  split->callback([&] {
    action = [&] {
      const auto records = load_manifest(split_manifest);
      const auto s = stratified_kfold(records, split_k, split_seed);
      write_folds(s.folds, split_out);
      ctx.out << json({{"folds", split_k},
                       {"max_class_deviation", s.max_class_deviation},
                       {"max_image_deviation", s.max_image_deviation},
                       {"out", split_out}})
                     .dump()
              << "\n";
    };
  });

  // train-detector
  std::string td_config;
  int td_fold = -1;
  std::string td_out;
  auto* td = app.add_subcommand("train-detector", "Train the enhancement-wrapped detector");
  td->add_option("--config", td_config, "Toolkit config")->required();
  td->add_option("--fold", td_fold, "Held-out fold (-1 trains on every image)")->capture_default_str();
  td->add_option("--out", td_out, "Checkpoint path (default <output_dir>/detector-fold<k>.ckpt)");
  td->callback([&] {
    action = [&] {
      const auto c = load_config(td_config);
      const auto data = load_dataset(c);
      const auto train = training_records(c, data, td_fold);
      const auto run = fit_detector(c, train, std::max(td_fold, 0));
      const fs::path path =
          td_out.empty() ? output_dir(c) / ("detector-fold" + std::to_string(td_fold) + ".ckpt") : fs::path(td_out);
      save_detector(run.model, path);
      std::string trace;
      for (const auto& e : run.history) {
        trace += json({{"phase", e.phase},
                       {"epoch", e.epoch},
                       {"total_loss", e.total_loss},
                       {"detect_loss", e.detect_loss},
                       {"preproc_loss", e.preproc_loss}})
                     .dump() +
                 "\n";
      }
      write_file(path.string() + ".trace.jsonl", trace);
      ctx.out << json({{"checkpoint", path.string()}, {"epochs", run.history.size()}, {"images", train.size()}})
                     .dump()
              << "\n";
    };
  });

  // train-classifier
  std::string tc_config;
  int tc_fold = -1;
  std::string tc_variant;
  std::string tc_out;
  auto* tc = app.add_subcommand("train-classifier", "Train the fusion classifier on ground-truth crops");
  tc->add_option("--config", tc_config, "Toolkit config")->required();
  tc->add_option("--fold", tc_fold, "Held-out fold (-1 trains on every image)")->capture_default_str();
  tc->add_option("--variant", tc_variant, "full | no_cross_attention | no_prompts | no_gcnn | no_embedding_tables");
  tc->add_option("--out", tc_out, "Checkpoint path (default <output_dir>/classifier-fold<k>.ckpt)");
  tc->callback([&] {
    action = [&] {
      const auto c = load_config(tc_config);
      const auto variant = classifier_variant_from_string(tc_variant.empty() ? c.classifier.variant : tc_variant);
      const auto data = load_dataset(c);
      const auto train = training_records(c, data, tc_fold);
      const auto run = fit_classifier(c, train, data.classes, variant, std::max(tc_fold, 0));
      const fs::path path =
          tc_out.empty() ? output_dir(c) / ("classifier-fold" + std::to_string(tc_fold) + ".ckpt") : fs::path(tc_out);
      save_classifier(run.bundle, path);
      std::string trace;
      for (const auto& e : run.history)
        trace += json({{"epoch", e.epoch}, {"loss", e.loss}, {"accuracy", e.accuracy}}).dump() + "\n";
      write_file(path.string() + ".trace.jsonl", trace);
      ctx.out << json({{"checkpoint", path.string()},
                       {"variant", to_string(variant)},
                       {"epochs", run.history.size()},
                       {"final_accuracy", run.history.empty() ? 0.0 : run.history.back().accuracy}})
                     .dump()
              << "\n";
    };
  });

  // detect
  std::string dt_image;
  std::string dt_checkpoint;
  std::optional<double> dt_threshold;
  std::optional<double> dt_nms;
  std::string dt_crops;
  int dt_crop_size = kDefaultCropSize;
  auto* dt = app.add_subcommand("detect", "Detect signs in an image; one JSON line per detection");
  dt->add_option("--image", dt_image, "Input image")->required();
  dt->add_option("--checkpoint", dt_checkpoint, "Detector checkpoint")->required();
  dt->add_option("--threshold", dt_threshold, "Confidence threshold (default 0.25)");
  dt->add_option("--nms", dt_nms, "NMS IoU threshold (default 0.5)");
  dt->add_option("--crops", dt_crops, "Directory to write crop PNGs to");
  dt->add_option("--crop-size", dt_crop_size, "Crop side in pixels")->capture_default_str();
  dt->callback([&] {
    action = [&] {
      const auto model = load_detector(dt_checkpoint);
      const auto image = read_image(dt_image);
      DetectOptions opt;
      if (dt_threshold) opt.confidence_threshold = *dt_threshold;
      if (dt_nms) opt.nms_iou = *dt_nms;
      opt.crop_size = dt_crop_size;
      const auto signs = detect(image, model.head.get(), *model.backbone, model.config, opt);
      for (std::size_t i = 0; i < signs.size(); ++i) {
        json line = {{"image", dt_image},
                     {"box", box_json(signs[i].detection.box)},
                     {"confidence", signs[i].detection.confidence},
                     {"class_index", signs[i].detection.class_index}};
        if (!dt_crops.empty()) {
          const auto path = fs::path(dt_crops) / (fs::path(dt_image).stem().string() + "_" + std::to_string(i) + ".png");
          fs::create_directories(dt_crops);
          write_image(signs[i].crop, path);
          line["crop"] = path.string();
        }
        ctx.out << line.dump() << "\n";
      }
    };
  });

  // classify
  std::string cl_crop;
  std::string cl_checkpoint;
  int cl_top = 1;
  auto* cl = app.add_subcommand("classify", "Classify a sign crop");
  cl->add_option("--crop", cl_crop, "Crop image")->required();
  cl->add_option("--checkpoint", cl_checkpoint, "Classifier checkpoint")->required();
  cl->add_option("--top", cl_top, "Also list the top-k classes")->capture_default_str();
  cl->callback([&] {
    action = [&] {
      const auto bundle = load_classifier(cl_checkpoint);
      const auto crop = read_image(cl_crop);
      const auto logits = classify(crop, bundle);
      const double mx = *std::max_element(logits.begin(), logits.end());
      std::vector<double> p(logits.size());
      double z = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
      for (auto& v : p) v /= z;
      std::vector<std::size_t> order(p.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
      json result = {{"class_name", bundle.classes.name(order[0])}, {"probability", p[order[0]]}};
      if (cl_top > 1) {
        json top = json::array();
        for (int i = 0; i < std::min<int>(cl_top, static_cast<int>(order.size())); ++i)
          top.push_back({{"class_name", bundle.classes.name(order[i])}, {"probability", p[order[i]]}});
        result["top"] = top;
      }
      ctx.out << result.dump() << "\n";
    };
  });

  // eval
  std::string ev_config;
  int ev_fold = 0;
  std::string ev_detector;
  std::string ev_classifier;
  std::string ev_json;
  bool ev_strict = false;
  auto* ev = app.add_subcommand("eval", "Evaluate checkpoints on a held-out fold");
  ev->add_option("--config", ev_config, "Toolkit config")->required();
  ev->add_option("--fold", ev_fold, "Fold to evaluate on")->capture_default_str();
  ev->add_option("--detector", ev_detector, "Detector checkpoint (mAP@50, mAP@50:95)");
  ev->add_option("--classifier", ev_classifier, "Classifier checkpoint (per-class report)");
  ev->add_option("--json", ev_json, "Write the JSON report here");
  ev->add_flag("--strict-zero", ev_strict, "Count undefined precision/recall as 0");
  ev->callback([&] {
    action = [&] {
      if (ev_detector.empty() && ev_classifier.empty())
        throw ValidationError("eval needs --detector and/or --classifier");
      const auto c = load_config(ev_config);
      const auto data = load_dataset(c);
      const auto test = held_out_records(c, data, ev_fold);
      json report = {{"fold", ev_fold}, {"images", test.size()}};
      if (!ev_detector.empty()) {
        const auto model = load_detector(ev_detector);
        const auto s = evaluate_detector(model, test, c.detector.detect);
        report["detection"] = {{"map50", s.map50}, {"map50_95", s.map50_95}};
        char line[128];
        std::snprintf(line, sizeof line, "mAP@50: %.2f%%  mAP@50:95: %.2f%%\n", 100 * s.map50, 100 * s.map50_95);
        ctx.out << line;
      }
      if (!ev_classifier.empty()) {
        const auto bundle = load_classifier(ev_classifier);
        const auto r = evaluate_classifier(bundle, test, c.classifier.crop_size, ev_strict || c.crossval.strict_zero);
        report["classification"] = to_json(r);
        ctx.out << format_report_table(r);
      }
      if (!ev_json.empty()) write_file(ev_json, report.dump(2) + "\n");
    };
  });

  // enhance
  std::string en_image;
  std::string en_out;
  std::string en_checkpoint;
  std::optional<double> en_gamma;
  std::optional<double> en_alpha;
  std::optional<double> en_zeta;
  auto* en = app.add_subcommand("enhance", "Apply the differentiable enhancement to an image");
  en->add_option("--image", en_image, "Input image")->required();
  en->add_option("--out", en_out, "Output image")->required();
  en->add_option("--checkpoint", en_checkpoint, "Detector checkpoint whose head predicts the parameters");
  en->add_option("--gamma", en_gamma, "Fixed gamma");
  en->add_option("--alpha", en_alpha, "Fixed alpha");
  en->add_option("--zeta", en_zeta, "Fixed zeta");
  en->callback([&] {
    action = [&] {
      const auto image = read_image(en_image);
      EnhanceConfig config;
      EnhanceParams params = config.defaults;
      const bool fixed = en_gamma || en_alpha || en_zeta;
      if (!en_checkpoint.empty()) {
        if (fixed) throw ValidationError("use either --checkpoint or fixed parameters, not both");
        const auto model = load_detector(en_checkpoint);
        if (!model.head) throw ValidationError("checkpoint has no enhancement head");
        config = model.config;
        ag::NoGradGuard guard;
        const std::vector<ImageTensor> one{image};
        params = params_from_tensor(predict_params(to_batch(one), *model.head, config))[0];
      } else {
        if (en_gamma) params.gamma = *en_gamma;
        if (en_alpha) params.alpha = *en_alpha;
        if (en_zeta) params.zeta = *en_zeta;
      }
      write_image(enhance(image, params, config), en_out);
      ctx.out << json({{"out", en_out}, {"params", params}}).dump() << "\n";
    };
  });

  // synth
  SynthOptions sy;
  std::string sy_out;
  bool sy_day = false;
  auto* syc = app.add_subcommand("synth", "Generate a synthetic sign dataset");
  syc->add_option("--out", sy_out, "Output directory")->required();
  syc->add_option("--classes", sy.classes, "Number of classes (1-28)")->capture_default_str();
  syc->add_option("--images", sy.images, "Number of images")->capture_default_str();
  syc->add_option("--size", sy.image_size, "Image side in pixels")->capture_default_str();
  syc->add_option("--seed", sy.seed, "Seed")->capture_default_str();
  syc->add_flag("--dark", sy.dark, "Night scenes (default)");
  syc->add_flag("--day", sy_day, "Day scenes");
  syc->callback([&] {
    action = [&] {
      if (sy_day) sy.dark = false;
      sy.validate();
      const auto records = write_synthetic_dataset(sy, sy_out);
      const ClassList classes = ClassList::load(fs::path(sy_out) / "classes.txt");
      const auto loaded = load_manifest(fs::path(sy_out) / "manifest.jsonl", &classes);
      ctx.out << json({{"out", sy_out}, {"images", loaded.size()}, {"instances", census(loaded).total_instances}})
                     .dump()
              << "\n";
    };
  });

  // ablate
  std::string ab_config;
  int ab_fold = 0;
  std::string ab_out;
  auto* ab = app.add_subcommand("ablate", "Train and evaluate every classifier ablation variant");
  ab->add_option("--config", ab_config, "Toolkit config")->required();
  ab->add_option("--fold", ab_fold, "Held-out fold")->capture_default_str();
  ab->add_option("--out", ab_out, "Output directory (default <output_dir>/ablation)");
  ab->callback([&] {
    action = [&] {
      const auto c = load_config(ab_config);
      const auto rows = run_ablation(c, ab_fold, [&](const std::string& m) { ctx.err << m << "\n"; });
      const fs::path dir = ab_out.empty() ? output_dir(c) / "ablation" : fs::path(ab_out);
      write_file(dir / "ablation.json", to_json(std::span<const AblationRow>(rows)).dump(2) + "\n");
      write_file(dir / "ablation.svg", ablation_bars_svg(rows));
      write_file(dir / "config.json", c.dump());
      ctx.out << format_ablation_table(rows);
    };
  });

  // crossval
  std::string cv_config;
  std::string cv_out;
  std::optional<int> cv_max;
  auto* cv = app.add_subcommand("crossval", "Stratified k-fold cross-validation of detector and classifier");
  cv->add_option("--config", cv_config, "Toolkit config")->required();
  cv->add_option("--out", cv_out, "Run directory (default <output_dir>/crossval-<config hash>)");
  cv->add_option("--max-folds", cv_max, "Run only the first n folds");
  cv->callback([&] {
    action = [&] {
      const auto c = load_config(cv_config);
      CrossvalOptions opt;
      opt.output_dir = cv_out.empty() ? output_dir(c) / ("crossval-" + c.hash()) : fs::path(cv_out);
      opt.max_folds = cv_max;
      opt.log = [&](const std::string& m) { ctx.err << m << "\n"; };
      const auto record = run_crossval(c, opt);
      char line[160];
      std::snprintf(line, sizeof line, "%-16s %10s %10s %10s %10s\n", "metric", "mean %", "std", "min %", "max %");
      ctx.out << line;
      for (const auto& name : crossval_metric_names()) {
        const auto it = record.aggregates.find(name);
        if (it == record.aggregates.end()) continue;
        const auto& a = it->second;
        std::snprintf(line, sizeof line, "%-16s %10.2f %10.2f %10.2f %10.2f\n", name.c_str(), 100 * a.mean,
                      100 * a.std, 100 * a.min, 100 * a.max);
        ctx.out << line;
      }
      ctx.out << "record: " << (*opt.output_dir / "record.json").string() << "\n";
    };
  });

  // default-config
  auto* dc = app.add_subcommand("default-config", "Print the default config document");
  dc->callback([&] { action = [&] { ctx.out << ToolkitConfig{}.dump(); }; });

  std::vector<std::string> argv_storage{"lensnet"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_storage) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return kExitValidation;
  }

  try {
    if (action) action();
    return kExitOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace lensnet::cli
