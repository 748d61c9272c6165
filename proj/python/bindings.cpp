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

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cli.hpp"
#include "lensnet/augmentation.hpp"
#include "lensnet/classifier.hpp"
#include "lensnet/config.hpp"
#include "lensnet/dataset.hpp"
#include "lensnet/detector.hpp"
#include "lensnet/enhancement.hpp"
#include "lensnet/errors.hpp"
#include "lensnet/metrics.hpp"
#include "lensnet/synth.hpp"

namespace py = pybind11;
using namespace lensnet;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using BoxTuple = std::tuple<double, double, double, double>;

ImageTensor to_image(const Array& a) {
  if (a.ndim() != 3) throw ValidationError("expected an H x W x C array");
  const auto h = static_cast<int>(a.shape(0));
  const auto w = static_cast<int>(a.shape(1));
  const auto c = static_cast<int>(a.shape(2));
  return ImageTensor(h, w, c, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const ImageTensor& img) {
  Array out({img.height(), img.width(), img.channels()});
  std::copy(img.values().begin(), img.values().end(), out.mutable_data());
  return out;
}

Box to_box(const BoxTuple& t) { return {std::get<0>(t), std::get<1>(t), std::get<2>(t), std::get<3>(t)}; }

BoxTuple from_box(const Box& b) { return {b.x_min, b.y_min, b.x_max, b.y_max}; }

// Per image: (x_min, y_min, x_max, y_max, confidence) tuples.
DetectionsByImage to_detections(const std::vector<std::vector<std::tuple<double, double, double, double, double>>>& in) {
  DetectionsByImage out;
  for (const auto& image : in) {
    std::vector<Detection> d;
    for (const auto& [x0, y0, x1, y1, conf] : image) d.push_back({{x0, y0, x1, y1}, conf, 0});
    out.push_back(std::move(d));
  }
  return out;
}

BoxesByImage to_boxes(const std::vector<std::vector<BoxTuple>>& in) {
  BoxesByImage out;
  for (const auto& image : in) {
    std::vector<Box> b;
    for (const auto& t : image) b.push_back(to_box(t));
    out.push_back(std::move(b));
  }
  return out;
}

py::dict census_dict(const ClassCensus& c) {
  py::dict d;
  d["counts"] = c.counts;
  d["count_max"] = c.count_max;
  d["images"] = c.total_images;
  d["instances"] = c.total_instances;
  d["mean_signs_per_image"] = c.mean_instances_per_image();
  return d;
}

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json py_to_json(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

class Detector {
 public:
  explicit Detector(const std::filesystem::path& path) : model_(load_detector(path)) {}

  py::list detect(const Array& image, double threshold, double nms_iou) const {
    DetectOptions options;
    options.confidence_threshold = threshold;
    options.nms_iou = nms_iou;
    const auto signs = lensnet::detect(to_image(image), model_.head.get(), *model_.backbone, model_.config, options);
    py::list out;
    for (const auto& s : signs) {
      py::dict d;
      d["box"] = from_box(s.detection.box);
      d["confidence"] = s.detection.confidence;
      d["crop"] = to_array(s.crop);
      out.append(d);
    }
    return out;
  }

  py::object enhance_params(const Array& image) const {
    if (!model_.head) return py::none();
    const auto img = to_image(image);
    if (const auto fixed = model_.head->fixed_params()) return py::cast(fixed->as_array());
    return py::cast(scale_params(predict_raw_params(img, *model_.head, model_.config), model_.config).as_array());
  }

  std::string identifier() const { return model_.backbone->identifier(); }
  bool wrapped() const { return model_.head != nullptr; }

 private:
  DetectorModel model_;
};

class Classifier {
 public:
  explicit Classifier(const std::filesystem::path& path) : bundle_(load_classifier(path)) {}

  py::dict classify(const Array& crop) const {
    const auto p = classify_top1(to_image(crop), bundle_);
    py::dict d;
    d["class_name"] = p.class_name;
    d["class_index"] = p.class_index;
    d["probability"] = p.probability;
    return d;
  }

  std::vector<double> logits(const Array& crop) const { return lensnet::classify(to_image(crop), bundle_); }
  std::vector<std::string> class_names() const { return bundle_.classes.names(); }

 private:
  ClassifierBundle bundle_;
};

}  // namespace

PYBIND11_MODULE(_lensnet, m) {
  m.doc() = "Nighttime traffic sign detection and classification toolkit";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  m.def(
      "enhance",
      [](const Array& image, double gamma, double alpha, double zeta) {
        return to_array(lensnet::enhance(to_image(image), EnhanceParams{gamma, alpha, zeta}, EnhanceConfig{}));
      },
      py::arg("image"), py::arg("gamma") = 1.0, py::arg("alpha") = 1.0, py::arg("zeta") = 0.0,
      "Unsharp mask then gamma/brightness on an H x W x 3 array in [0, 1].");
  m.def(
      "scale_params", [](std::array<double, 3> z) { return scale_params(z, EnhanceConfig{}).as_array(); },
      py::arg("z_raw"), "Maps raw scores to (gamma, alpha, zeta) within the default ranges.");
  m.def(
      "preproc_loss",
      [](const std::vector<std::array<double, 3>>& params) {
        std::vector<EnhanceParams> p;
        for (const auto& a : params) p.push_back({a[0], a[1], a[2]});
        return preproc_loss(p, EnhanceConfig{});
      },
      py::arg("params"));

  m.def("rarity", &rarity, py::arg("count"), py::arg("count_max"));
  m.def(
      "class_aug_prob", [](double r) { return class_aug_prob(r); }, py::arg("rarity"));
  m.def(
      "applied_aug_prob", [](double p, double w) { return applied_aug_prob(p, w); }, py::arg("p_class"),
      py::arg("family_weight"));

  m.def(
      "class_alpha_weights", [](const std::vector<std::int64_t>& counts) { return class_alpha_weights(counts); },
      py::arg("counts"));
  m.def(
      "focal_loss",
      [](const Array& logits, const std::vector<int>& targets, const std::vector<double>& alpha, double gamma) {
        if (logits.ndim() != 2) throw ValidationError("logits must be B x N");
        const auto t = ag::Tensor::from({logits.shape(0), logits.shape(1)},
                                        std::vector<double>(logits.data(), logits.data() + logits.size()));
        return focal_loss(t, targets, alpha, gamma).item();
      },
      py::arg("logits"), py::arg("targets"), py::arg("alpha"), py::arg("gamma") = 2.0);

  m.def(
      "iou", [](const BoxTuple& a, const BoxTuple& b) { return iou(to_box(a), to_box(b)); }, py::arg("a"), py::arg("b"));
  m.def(
      "average_precision",
      [](const std::vector<std::vector<std::tuple<double, double, double, double, double>>>& detections,
         const std::vector<std::vector<BoxTuple>>& ground_truths, double tau) {
        return average_precision(to_detections(detections), to_boxes(ground_truths), tau).ap;
      },
      py::arg("detections"), py::arg("ground_truths"), py::arg("tau") = 0.5,
      "101-point AP; detections are per-image (x_min, y_min, x_max, y_max, confidence) tuples.");
  m.def(
      "evaluate_detections",
      [](const std::vector<std::vector<std::tuple<double, double, double, double, double>>>& detections,
         const std::vector<std::vector<BoxTuple>>& ground_truths) {
        const auto s = evaluate_detections(to_detections(detections), to_boxes(ground_truths));
        py::dict d;
        d["map50"] = s.map50;
        d["map50_95"] = s.map50_95;
        return d;
      },
      py::arg("detections"), py::arg("ground_truths"));

  m.def(
      "census", [](const std::filesystem::path& manifest) { return census_dict(census(load_manifest(manifest))); },
      py::arg("manifest"));
  m.def(
      "stratified_kfold",
      [](const std::filesystem::path& manifest, int folds, std::uint64_t seed) {
        std::vector<std::vector<std::string>> out;
        for (auto& f : stratified_kfold(load_manifest(manifest), folds, seed).folds) out.push_back(f.image_ids);
        return out;
      },
      py::arg("manifest"), py::arg("folds") = 5, py::arg("seed") = 0);
  m.def(
      "write_synthetic_dataset",
      [](const std::filesystem::path& out_dir, const py::dict& options) {
        const auto opts = py_to_json(options).get<SynthOptions>();
        return write_synthetic_dataset(opts, out_dir).size();
      },
      py::arg("out_dir"), py::arg("options") = py::dict(),
      "Writes images, manifest.jsonl and classes.txt; returns the number of images.");

  m.def(
      "read_image", [](const std::filesystem::path& path) { return to_array(read_image(path)); }, py::arg("path"));
  m.def(
      "write_image", [](const Array& image, const std::filesystem::path& path) { write_image(to_image(image), path); },
      py::arg("image"), py::arg("path"));

  m.def("default_config", [] { return json_to_py(to_json_value(ToolkitConfig{})); });

  py::class_<Detector>(m, "Detector")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def("detect", &Detector::detect, py::arg("image"), py::arg("threshold") = 0.25, py::arg("nms_iou") = 0.5)
      .def("enhance_params", &Detector::enhance_params, py::arg("image"))
      .def_property_readonly("identifier", &Detector::identifier)
      .def_property_readonly("wrapped", &Detector::wrapped);

  py::class_<Classifier>(m, "Classifier")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def("classify", &Classifier::classify, py::arg("crop"))
      .def("logits", &Classifier::logits, py::arg("crop"))
      .def_property_readonly("class_names", &Classifier::class_names);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out;
        std::ostringstream err;
        const int code = cli::run_command(args, out, err);
        return std::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a CLI subcommand in-process; returns (exit_code, stdout, stderr).");
}
