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
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensnet/augmentation.hpp"
#include "lensnet/autograd.hpp"
#include "lensnet/dataset.hpp"
#include "lensnet/enhancement.hpp"
#include "lensnet/metrics.hpp"
#include "lensnet/nn.hpp"

namespace lensnet {

/// Single-stage, class-agnostic detector consumed by the enhancement wrapper.
class DetectorBackbone {
 public:
  virtual ~DetectorBackbone() = default;
  /// images [N,3,H,W] -> raw prediction tensor.
  virtual ag::Tensor forward(const ag::Tensor& images) const = 0;
  /// Scalar detection loss against per-image boxes in input pixel coordinates.
  virtual ag::Tensor loss(const ag::Tensor& predictions, const BoxesByImage& ground_truths) const = 0;
  /// Scored, non-max-suppressed boxes per image.
  virtual DetectionsByImage decode(const ag::Tensor& predictions, double confidence_threshold,
                                   double nms_iou) const = 0;
  virtual nn::ParameterList parameters() const = 0;
  virtual std::string identifier() const = 0;
  virtual nlohmann::json spec() const = 0;
  /// Input height and width must be multiples of this.
  virtual int input_multiple() const { return 1; }

  void set_trainable(bool trainable) const { nn::set_trainable(parameters(), trainable); }
};

/// Anchor-free reference detector: four 3x3 conv blocks (two with stride 2) to a stride-4 grid, and a
/// 1x1 head emitting objectness, centerness and log box distances (l, t, r, b) per cell. A cell is
/// positive when its centre lies inside a box (smallest box wins).
class TinyDetector final : public DetectorBackbone {
 public:
  static constexpr int kStride = 4;

  explicit TinyDetector(int width = 16, std::uint64_t seed = 0);

  ag::Tensor forward(const ag::Tensor& images) const override;
  ag::Tensor loss(const ag::Tensor& predictions, const BoxesByImage& ground_truths) const override;
  DetectionsByImage decode(const ag::Tensor& predictions, double confidence_threshold,
                           double nms_iou) const override;
  nn::ParameterList parameters() const override;
  std::string identifier() const override;
  nlohmann::json spec() const override;
  int input_multiple() const override { return kStride; }

 private:
  int width_;
  std::uint64_t seed_;
  nn::Conv2d c1_;
  nn::Conv2d c2_;
  nn::Conv2d c3_;
  nn::Conv2d c4_;
  nn::Conv2d head_;
};

/// {"kind": "tiny", "width": w, "seed": s}. Throws ValidationError.
std::unique_ptr<DetectorBackbone> make_backbone(const nlohmann::json& spec);

/// Greedy NMS by descending confidence (stable).
std::vector<Detection> non_max_suppression(std::vector<Detection> detections, double iou_threshold);

struct WrappedOutput {
  ag::Tensor predictions;
  /// Scaled enhancement parameters [N,3]; undefined without a head.
  ag::Tensor params;
  ag::Tensor enhanced;
};

/// predict params -> enhance -> backbone. With a null head the images go to the backbone untouched.
WrappedOutput wrapped_forward(const ag::Tensor& images, const ParamHead* head, const DetectorBackbone& backbone,
                              const EnhanceConfig& config);

/// L_detect + L_preproc(params); just L_detect when params is undefined.
ag::Tensor total_loss(const ag::Tensor& detect_loss, const ag::Tensor& params, const EnhanceConfig& config);

struct TrainSchedule {
  int head_epochs = 10;
  int joint_epochs = 50;
  int batch_size = 32;
  double head_learning_rate = 1e-3;
  double joint_learning_rate = 1e-4;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainSchedule& s);
void from_json(const nlohmann::json& j, TrainSchedule& s);

struct DetectionSample {
  ImageTensor image;
  std::vector<Box> boxes;
};

struct DetectorEpoch {
  int phase = 0;
  int epoch = 0;
  double total_loss = 0.0;
  double detect_loss = 0.0;
  double preproc_loss = 0.0;
};

/// Phase 0 trains the head with the backbone frozen; phase 1 trains both. Scene augmentation
/// (p_class = 1) is applied before the wrapper. Without a head, phase 0 trains the backbone so
/// that wrapped and unwrapped runs get the same number of updates.
/// Images are zero-padded at the bottom and right to the backbone's input multiple; a batch must share one size.
std::vector<DetectorEpoch> train_detector(std::span<const DetectionSample> data, ParamHead* head,
                                          DetectorBackbone& backbone, const EnhanceConfig& config,
                                          const TrainSchedule& schedule, const AugPolicy& augmentation);

/// Mean L_total over the data without augmentation or gradients.
double evaluate_detector_loss(std::span<const DetectionSample> data, const ParamHead* head,
                              const DetectorBackbone& backbone, const EnhanceConfig& config, int batch_size = 32);

struct DetectOptions {
  double confidence_threshold = 0.25;
  double nms_iou = 0.5;
  int crop_size = kDefaultCropSize;
};

struct DetectedSign {
  Detection detection;
  ImageTensor crop;
};

/// Pads to the backbone's input multiple, runs the wrapped detector and crops each detection from
/// the original image with crop_box().
std::vector<DetectedSign> detect(const ImageTensor& image, const ParamHead* head, const DetectorBackbone& backbone,
                                 const EnhanceConfig& config, const DetectOptions& options = {});
/// Detections for many images (no crops), batched.
DetectionsByImage detect_batch(std::span<const ImageTensor> images, const ParamHead* head,
                               const DetectorBackbone& backbone, const EnhanceConfig& config,
                               const DetectOptions& options = {}, int batch_size = 32);

struct DetectorModel {
  std::unique_ptr<ParamHead> head;  // null for an unwrapped detector
  std::unique_ptr<DetectorBackbone> backbone;
  EnhanceConfig config;
};

/// CBOR container: backbone spec and weights, head identifier and weights, EnhanceConfig.
void save_detector(const DetectorModel& model, const std::filesystem::path& path);
DetectorModel load_detector(const std::filesystem::path& path);

/// Loads images for records (paths resolved by the manifest loader).
std::vector<DetectionSample> load_detection_samples(std::span<const AnnotationRecord> records);

}  // namespace lensnet
