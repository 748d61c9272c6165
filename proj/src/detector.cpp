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

#include "lensnet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "lensnet/errors.hpp"
#include "lensnet/hash.hpp"

namespace lensnet {

using json = nlohmann::json;

namespace {

constexpr int kChannels = 6;  // objectness, centerness, l, t, r, b
constexpr double kMaxLogDistance = 8.0;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

ImageTensor pad_to_multiple(const ImageTensor& image, int multiple) {
  const int h = (image.height() + multiple - 1) / multiple * multiple;
  const int w = (image.width() + multiple - 1) / multiple * multiple;
  if (h == image.height() && w == image.width()) return image;
  ImageTensor out(h, w, image.channels(), 0.0);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < image.channels(); ++c) out.at(y, x, c) = image.at(y, x, c);
  return out;
}

Box clip_box(const Box& b, double width, double height) {
  return {std::clamp(b.x_min, 0.0, width), std::clamp(b.y_min, 0.0, height), std::clamp(b.x_max, 0.0, width),
          std::clamp(b.y_max, 0.0, height)};
}

}  // namespace

// ---- reference backbone ----

TinyDetector::TinyDetector(int width, std::uint64_t seed) : width_(width), seed_(seed) {
  if (width < 1) throw ValidationError("detector width must be positive");
  std::mt19937_64 rng(splitmix64(seed ^ 0xde7ec7ULL));
  c1_ = nn::Conv2d(3, width, 3, 2, 1, rng);
  c2_ = nn::Conv2d(width, 2 * width, 3, 2, 1, rng);
  c3_ = nn::Conv2d(2 * width, 2 * width, 3, 1, 1, rng);
  c4_ = nn::Conv2d(2 * width, 2 * width, 3, 1, 1, rng);
  head_ = nn::Conv2d(2 * width, kChannels, 1, 1, 0, rng);
  auto bias = head_.bias.mutable_data();
  std::fill(bias.begin(), bias.end(), 0.0);
  bias[0] = -2.0;
}

ag::Tensor TinyDetector::forward(const ag::Tensor& images) const {
  if (images.ndim() != 4 || images.dim(1) != 3) throw ValidationError("detector expects images [N,3,H,W]");
  if (images.dim(2) % kStride != 0 || images.dim(3) % kStride != 0)
    throw ValidationError("detector input size must be a multiple of " + std::to_string(kStride));
  auto x = ag::relu(c1_.forward(images));
  x = ag::relu(c2_.forward(x));
  x = ag::relu(c3_.forward(x));
  x = ag::relu(c4_.forward(x));
  return head_.forward(x);
}

ag::Tensor TinyDetector::loss(const ag::Tensor& predictions, const BoxesByImage& ground_truths) const {
  const auto n = predictions.dim(0);
  const auto gh = predictions.dim(2);
  const auto gw = predictions.dim(3);
  if (static_cast<std::int64_t>(ground_truths.size()) != n)
    throw ValidationError("detector loss: ground-truth list does not match the batch");
  const auto cells = gh * gw;
  std::vector<double> obj_t(static_cast<std::size_t>(n * cells), 0.0);
  std::vector<double> ctr_t(obj_t.size(), 0.0);
  std::vector<double> pos(obj_t.size(), 0.0);
  std::vector<double> box_t(static_cast<std::size_t>(n * 4 * cells), 0.0);
  std::int64_t positives = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t y = 0; y < gh; ++y) {
      for (std::int64_t x = 0; x < gw; ++x) {
        const double cx = (x + 0.5) * kStride;
        const double cy = (y + 0.5) * kStride;
        const Box* best = nullptr;
        for (const auto& b : ground_truths[i]) {
          if (cx > b.x_min && cx < b.x_max && cy > b.y_min && cy < b.y_max && (!best || b.area() < best->area()))
            best = &b;
        }
        if (!best) continue;
        const std::size_t k = static_cast<std::size_t>(i * cells + y * gw + x);
        const std::array<double, 4> d{cx - best->x_min, cy - best->y_min, best->x_max - cx, best->y_max - cy};
        obj_t[k] = 1.0;
        pos[k] = 1.0;
        ctr_t[k] = std::sqrt(std::min(d[0], d[2]) / std::max(d[0], d[2]) * std::min(d[1], d[3]) /
                             std::max(d[1], d[3]));
        for (int s = 0; s < 4; ++s)
          box_t[static_cast<std::size_t>((i * 4 + s) * cells + y * gw + x)] = std::log(d[s] / kStride);
        ++positives;
      }
    }
  }
  const auto negatives = n * cells - positives;
  std::vector<double> obj_w(obj_t.size());
  for (std::size_t k = 0; k < obj_w.size(); ++k)
    obj_w[k] = pos[k] > 0 ? 1.0 / static_cast<double>(positives) : 1.0 / static_cast<double>(negatives);

  const ag::Shape one{n, 1, gh, gw};
  const auto obj_logits = ag::slice(predictions, 1, 0, 1);
  auto loss = ag::sum(ag::mul(ag::bce_with_logits(obj_logits, ag::Tensor::from(one, obj_t)),
                              ag::Tensor::from(one, std::move(obj_w))));
  if (positives > 0) {
    const double inv = 1.0 / static_cast<double>(positives);
    std::vector<double> pos_w(pos.size());
    std::transform(pos.begin(), pos.end(), pos_w.begin(), [&](double p) { return p * inv; });
    const auto ctr_logits = ag::slice(predictions, 1, 1, 2);
    const auto ctr = ag::sum(ag::mul(ag::bce_with_logits(ctr_logits, ag::Tensor::from(one, ctr_t)),
                                     ag::Tensor::from(one, pos_w)));
    const auto box_raw = ag::slice(predictions, 1, 2, 6);
    const auto box = ag::sum(ag::mul(ag::abs(ag::sub(box_raw, ag::Tensor::from({n, 4, gh, gw}, box_t))),
                                     ag::Tensor::from(one, pos_w)));
    loss = ag::add(loss, ag::add(ctr, ag::mul_scalar(box, 0.25)));
  }
  return loss;
}

DetectionsByImage TinyDetector::decode(const ag::Tensor& predictions, double confidence_threshold,
                                       double nms_iou) const {
  const auto n = predictions.dim(0);
  const auto gh = predictions.dim(2);
  const auto gw = predictions.dim(3);
  const auto cells = gh * gw;
  const auto p = predictions.data();
  const double height = static_cast<double>(gh * kStride);
  const double width = static_cast<double>(gw * kStride);
  DetectionsByImage out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<Detection> candidates;
    const double* base = p.data() + i * kChannels * cells;
    for (std::int64_t y = 0; y < gh; ++y) {
      for (std::int64_t x = 0; x < gw; ++x) {
        const auto k = y * gw + x;
        const double score = std::sqrt(sigmoid(base[k]) * sigmoid(base[cells + k]));
        if (!(score > confidence_threshold)) continue;
        const double cx = (x + 0.5) * kStride;
        const double cy = (y + 0.5) * kStride;
        auto dist = [&](int s) { return kStride * std::exp(std::min(base[(2 + s) * cells + k], kMaxLogDistance)); };
        const Box b = clip_box({cx - dist(0), cy - dist(1), cx + dist(2), cy + dist(3)}, width, height);
        if (!b.well_formed()) continue;
        candidates.push_back({b, score, 0});
      }
    }
    out[i] = non_max_suppression(std::move(candidates), nms_iou);
  }
  return out;
}

nn::ParameterList TinyDetector::parameters() const {
  nn::ParameterList out;
  nn::append(out, "c1.", c1_.parameters());
  nn::append(out, "c2.", c2_.parameters());
  nn::append(out, "c3.", c3_.parameters());
  nn::append(out, "c4.", c4_.parameters());
  nn::append(out, "head.", head_.parameters());
  return out;
}

std::string TinyDetector::identifier() const { return "tiny-fcos(width=" + std::to_string(width_) + ")"; }

json TinyDetector::spec() const { return {{"kind", "tiny"}, {"width", width_}, {"seed", seed_}}; }

std::unique_ptr<DetectorBackbone> make_backbone(const json& spec) {
  try {
    const auto kind = spec.at("kind").get<std::string>();
    if (kind == "tiny")
      return std::make_unique<TinyDetector>(spec.value("width", 16), spec.value("seed", std::uint64_t{0}));
    throw ValidationError("unknown detector backbone kind '" + kind + "'");
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad backbone spec: ") + e.what());
  }
}

std::vector<Detection> non_max_suppression(std::vector<Detection> detections, double iou_threshold) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  std::vector<Detection> kept;
  for (const auto& d : detections) {
    const bool suppressed =
        std::any_of(kept.begin(), kept.end(), [&](const Detection& k) { return iou(k.box, d.box) > iou_threshold; });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// ---- wrapper ----

WrappedOutput wrapped_forward(const ag::Tensor& images, const ParamHead* head, const DetectorBackbone& backbone,
                              const EnhanceConfig& config) {
  WrappedOutput out;
  if (head) {
    out.params = predict_params(images, *head, config);
    out.enhanced = enhance(images, out.params, config);
  } else {
    out.enhanced = images;
  }
  out.predictions = backbone.forward(out.enhanced);
  return out;
}

ag::Tensor total_loss(const ag::Tensor& detect_loss, const ag::Tensor& params, const EnhanceConfig& config) {
  if (!params.defined()) return detect_loss;
  return ag::add(detect_loss, preproc_loss(params, config));
}

void TrainSchedule::validate() const {
  if (head_epochs < 0 || joint_epochs < 0) throw ValidationError("detector epoch counts must be >= 0");
  if (batch_size < 1) throw ValidationError("detector batch_size must be >= 1");
  if (!(head_learning_rate > 0) || !(joint_learning_rate > 0))
    throw ValidationError("detector learning rates must be positive");
  if (weight_decay < 0) throw ValidationError("detector weight_decay must be >= 0");
}

void to_json(json& j, const TrainSchedule& s) {
  j = {{"head_epochs", s.head_epochs},
       {"joint_epochs", s.joint_epochs},
       {"batch_size", s.batch_size},
       {"head_learning_rate", s.head_learning_rate},
       {"joint_learning_rate", s.joint_learning_rate},
       {"weight_decay", s.weight_decay},
       {"seed", s.seed}};
}

void from_json(const json& j, TrainSchedule& s) {
  auto field = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  field("head_epochs", s.head_epochs);
  field("joint_epochs", s.joint_epochs);
  field("batch_size", s.batch_size);
  field("head_learning_rate", s.head_learning_rate);
  field("joint_learning_rate", s.joint_learning_rate);
  field("weight_decay", s.weight_decay);
  field("seed", s.seed);
  s.validate();
}

std::vector<DetectorEpoch> train_detector(std::span<const DetectionSample> data, ParamHead* head,
                                          DetectorBackbone& backbone, const EnhanceConfig& config,
                                          const TrainSchedule& schedule, const AugPolicy& augmentation) {
  schedule.validate();
  config.validate();
  if (data.empty()) throw ValidationError("detector training set is empty");
  const int multiple = backbone.input_multiple();

  std::mt19937_64 rng(splitmix64(schedule.seed));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<DetectorEpoch> history;
  int global_epoch = 0;

  auto run_phase = [&](int phase, int epochs, double lr) {
    if (epochs == 0) return;
    std::vector<ag::Tensor> trainable;
    if (head) {
      auto hp = nn::tensors(head->parameters());
      trainable.insert(trainable.end(), hp.begin(), hp.end());
    }
    const bool backbone_trains = phase == 1 || !head;
    backbone.set_trainable(backbone_trains);
    if (backbone_trains) {
      auto bp = nn::tensors(backbone.parameters());
      trainable.insert(trainable.end(), bp.begin(), bp.end());
    }
    nn::AdamW opt(trainable, {lr, 0.9, 0.999, 1e-8, schedule.weight_decay});
    for (int e = 0; e < epochs; ++e, ++global_epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      DetectorEpoch rec{phase, global_epoch, 0.0, 0.0, 0.0};
      for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
        const std::size_t stop = std::min(order.size(), start + schedule.batch_size);
        std::vector<ImageTensor> images;
        BoxesByImage boxes;
        for (std::size_t k = start; k < stop; ++k) {
          const auto& s = data[order[k]];
          auto aug = apply_scene_augmentations(
              s.image, s.boxes, augmentation,
              item_seed(schedule.seed, "scene#" + std::to_string(order[k]), static_cast<std::uint64_t>(global_epoch)));
          images.push_back(pad_to_multiple(aug.image, multiple));
          boxes.push_back(std::move(aug.boxes));
        }
        const auto out = wrapped_forward(to_batch(images), head, backbone, config);
        const auto ld = backbone.loss(out.predictions, boxes);
        auto lt = total_loss(ld, out.params, config);
        if (!std::isfinite(lt.item()))
          throw TrainingError("detector loss became non-finite in phase " + std::to_string(phase) + ", epoch " +
                              std::to_string(global_epoch) + " (detect loss " + std::to_string(ld.item()) + ")");
        opt.zero_grad();
        lt.backward();
        opt.step();
        const double w = static_cast<double>(stop - start);
        rec.total_loss += lt.item() * w;
        rec.detect_loss += ld.item() * w;
        rec.preproc_loss += (lt.item() - ld.item()) * w;
      }
      const double total = static_cast<double>(data.size());
      rec.total_loss /= total;
      rec.detect_loss /= total;
      rec.preproc_loss /= total;
      history.push_back(rec);
    }
    opt.zero_grad();
  };

  run_phase(0, schedule.head_epochs, schedule.head_learning_rate);
  run_phase(1, schedule.joint_epochs, schedule.joint_learning_rate);
  backbone.set_trainable(true);
  return history;
}

double evaluate_detector_loss(std::span<const DetectionSample> data, const ParamHead* head,
                              const DetectorBackbone& backbone, const EnhanceConfig& config, int batch_size) {
  if (data.empty()) throw ValidationError("empty evaluation set");
  ag::NoGradGuard guard;
  double sum = 0.0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t stop = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<ImageTensor> images;
    BoxesByImage boxes;
    for (std::size_t k = start; k < stop; ++k) {
      images.push_back(pad_to_multiple(data[k].image, backbone.input_multiple()));
      boxes.push_back(data[k].boxes);
    }
    const auto out = wrapped_forward(to_batch(images), head, backbone, config);
    sum += total_loss(backbone.loss(out.predictions, boxes), out.params, config).item() *
           static_cast<double>(stop - start);
  }
  return sum / static_cast<double>(data.size());
}

// ---- inference ----

DetectionsByImage detect_batch(std::span<const ImageTensor> images, const ParamHead* head,
                               const DetectorBackbone& backbone, const EnhanceConfig& config,
                               const DetectOptions& options, int batch_size) {
  ag::NoGradGuard guard;
  DetectionsByImage out;
  const int multiple = backbone.input_multiple();
  std::size_t start = 0;
  while (start < images.size()) {
    std::size_t stop = start + 1;
    while (stop < images.size() && stop - start < static_cast<std::size_t>(batch_size) &&
           images[stop].height() == images[start].height() && images[stop].width() == images[start].width())
      ++stop;
    std::vector<ImageTensor> padded;
    for (std::size_t k = start; k < stop; ++k) padded.push_back(pad_to_multiple(images[k], multiple));
    const auto res = wrapped_forward(to_batch(padded), head, backbone, config);
    auto dets = backbone.decode(res.predictions, options.confidence_threshold, options.nms_iou);
    for (std::size_t k = start; k < stop; ++k) {
      std::vector<Detection> kept;
      for (auto d : dets[k - start]) {
        d.box = clip_box(d.box, images[k].width(), images[k].height());
        if (d.box.well_formed()) kept.push_back(d);
      }
      out.push_back(std::move(kept));
    }
    start = stop;
  }
  return out;
}

std::vector<DetectedSign> detect(const ImageTensor& image, const ParamHead* head, const DetectorBackbone& backbone,
                                 const EnhanceConfig& config, const DetectOptions& options) {
  const std::vector<ImageTensor> one{image};
  const auto dets = detect_batch(one, head, backbone, config, options, 1);
  std::vector<DetectedSign> out;
  for (const auto& d : dets[0]) out.push_back({d, crop_box(image, d.box, options.crop_size)});
  return out;
}

// ---- persistence ----

void save_detector(const DetectorModel& model, const std::filesystem::path& path) {
  if (!model.backbone) throw ValidationError("detector model has no backbone");
  json head = nullptr;
  if (model.head) {
    const auto id = model.head->identifier();
    if (auto fixed = model.head->fixed_params())
      head = {{"identifier", id}, {"params", *fixed}};
    else if (id == "conv3-mlp")
      head = {{"identifier", id}, {"state", nn::state_to_json(model.head->parameters())}};
    else
      throw ValidationError("parameter head '" + id + "' cannot be saved");
  }
  const json j = {{"format", "lensnet-detector"},
                  {"version", 1},
                  {"backbone", model.backbone->spec()},
                  {"backbone_identifier", model.backbone->identifier()},
                  {"backbone_state", nn::state_to_json(model.backbone->parameters())},
                  {"head", head},
                  {"enhance", model.config}};
  const auto bytes = json::to_cbor(j);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

DetectorModel load_detector(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  json j;
  try {
    j = json::from_cbor(bytes);
  } catch (const json::exception& e) {
    throw ValidationError("checkpoint " + path.string() + " is not a valid container: " + e.what());
  }
  try {
    if (j.at("format") != "lensnet-detector") throw ValidationError("checkpoint is not a detector checkpoint");
    DetectorModel m;
    m.config = j.at("enhance").get<EnhanceConfig>();
    m.backbone = make_backbone(j.at("backbone"));
    nn::load_state(m.backbone->parameters(), j.at("backbone_state"));
    const auto& head = j.at("head");
    if (!head.is_null()) {
      const auto id = head.at("identifier").get<std::string>();
      if (id == "fixed") {
        m.head = std::make_unique<FixedParamHead>(head.at("params").get<EnhanceParams>());
      } else if (id == "conv3-mlp") {
        m.head = std::make_unique<ConvParamHead>(m.config, 0);
        nn::load_state(m.head->parameters(), head.at("state"));
      } else {
        throw ValidationError("unknown parameter head '" + id + "' in checkpoint");
      }
    }
    return m;
  } catch (const json::exception& e) {
    throw ValidationError("malformed detector checkpoint: " + std::string(e.what()));
  }
}

std::vector<DetectionSample> load_detection_samples(std::span<const AnnotationRecord> records) {
  std::vector<DetectionSample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    DetectionSample s;
    s.image = read_image(r.image_path);
    if (s.image.width() != r.width || s.image.height() != r.height)
      throw ValidationError("image " + r.image_path.string() + " does not match its manifest dimensions");
    for (const auto& inst : r.instances) s.boxes.push_back(inst.box);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace lensnet
