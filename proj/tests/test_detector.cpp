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

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lensnet/detector.hpp"
#include "lensnet/errors.hpp"
#include "lensnet/synth.hpp"
#include "test_util.hpp"

using namespace lensnet;

namespace {

ImageTensor interior_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  ImageTensor img(h, w, 3);
  for (auto& v : img.values()) v = u(rng);
  return img;
}

std::vector<DetectionSample> synth_samples(int count, std::uint64_t seed, bool dark = true) {
  SynthOptions o;
  o.images = count;
  o.seed = seed;
  o.dark = dark;
  std::vector<DetectionSample> out;
  for (int i = 0; i < count; ++i) {
    auto scene = generate_scene(o, i);
    DetectionSample s{std::move(scene.image), {}};
    for (const auto& inst : scene.record.instances) s.boxes.push_back(inst.box);
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
std::vector<double> pixels(const T& values) {
  return {values.begin(), values.end()};
}

std::vector<std::vector<double>> snapshot(const nn::ParameterList& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) {
    const auto d = p.tensor.data();
    out.emplace_back(d.begin(), d.end());
  }
  return out;
}

TrainSchedule small_schedule(int head, int joint) {
  TrainSchedule s;
  s.head_epochs = head;
  s.joint_epochs = joint;
  s.batch_size = 16;
  s.seed = 3;
  return s;
}

}  // namespace

TEST(TotalLoss, GammaTwoAddsOneThousandth) {
  EnhanceConfig cfg;
  const std::vector<EnhanceParams> p{{2.0, 1.0, 0.0}};
  const auto lt = total_loss(ag::Tensor::full({}, 1.0), params_to_tensor(p), cfg);
  EXPECT_NEAR(lt.item(), 1.0 + 0.001 * 1.0 * 1.0, 1e-12);
}

TEST(TotalLoss, DefaultsAddNothing) {
  EnhanceConfig cfg;
  const std::vector<EnhanceParams> p{cfg.defaults, cfg.defaults};
  EXPECT_EQ(total_loss(ag::Tensor::full({}, 0.7), params_to_tensor(p), cfg).item(), 0.7);
}

TEST(TotalLoss, ZeroLambdasAddNothing) {
  EnhanceConfig cfg;
  cfg.lambda_gamma = cfg.lambda_alpha = cfg.lambda_zeta = 0.0;
  const std::vector<EnhanceParams> p{{2.7, 0.4, 1.1}, {0.5, 3.0, 0.2}};
  EXPECT_EQ(total_loss(ag::Tensor::full({}, 2.5), params_to_tensor(p), cfg).item(), 2.5);
}

TEST(TotalLoss, DecomposesIntoDetectAndPreproc) {
  EnhanceConfig cfg;
  const std::vector<EnhanceParams> p{{2.7, 0.4, 1.1}, {0.5, 3.0, 0.2}};
  const auto params = params_to_tensor(p);
  const auto ld = ag::Tensor::full({}, 1.25);
  const double diff = total_loss(ld, params, cfg).item() - ld.item();
  EXPECT_NEAR(diff, preproc_loss(params, cfg).item(), 1e-15);
  EXPECT_NEAR(diff, preproc_loss(p, cfg), 1e-15);
}

TEST(WrappedForward, DefaultParamsMatchBackbone) {
  EnhanceConfig cfg;
  TinyDetector backbone(8, 1);
  FixedParamHead head(cfg.defaults);
  const auto images = to_batch(std::vector<ImageTensor>{interior_image(16, 16, 1), interior_image(16, 16, 2)});
  const auto wrapped = wrapped_forward(images, &head, backbone, cfg);
  const auto direct = backbone.forward(images);
  const auto a = wrapped.predictions.data();
  const auto b = direct.data();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(WrappedForward, BatchShapes) {
  EnhanceConfig cfg;
  TinyDetector backbone(8, 1);
  ConvParamHead head(cfg, 4);
  const auto images = to_batch(std::vector<ImageTensor>{interior_image(16, 24, 1), interior_image(16, 24, 2)});
  const auto out = wrapped_forward(images, &head, backbone, cfg);
  EXPECT_EQ(out.params.shape(), (ag::Shape{2, 3}));
  EXPECT_EQ(out.enhanced.shape(), images.shape());
  EXPECT_EQ(out.predictions.shape(), (ag::Shape{2, 6, 4, 6}));
}

TEST(WrappedForward, NullHeadPassesImagesThrough) {
  EnhanceConfig cfg;
  TinyDetector backbone(8, 1);
  const auto images = to_batch(std::vector<ImageTensor>{interior_image(8, 8, 5)});
  const auto out = wrapped_forward(images, nullptr, backbone, cfg);
  EXPECT_FALSE(out.params.defined());
  EXPECT_EQ(out.enhanced.data()[3], images.data()[3]);
}

TEST(WrappedForward, HeadGradientIsNonzeroAndMatchesFiniteDifference) {
  EnhanceConfig cfg;
  TinyDetector backbone(8, 1);
  ConvParamHead head(cfg, 4);
  const auto samples = synth_samples(2, 11);
  const auto images = to_batch(std::vector<ImageTensor>{samples[0].image, samples[1].image});
  const BoxesByImage boxes{samples[0].boxes, samples[1].boxes};
  auto objective = [&] {
    const auto out = wrapped_forward(images, &head, backbone, cfg);
    return total_loss(backbone.loss(out.predictions, boxes), out.params, cfg);
  };
  const auto params = head.parameters();
  for (auto p : params) p.tensor.zero_grad();
  objective().backward();
  // Last-layer bias of the head drives gamma directly.
  auto probe = params.back().tensor;
  const double analytic = probe.grad()[0];
  auto values = probe.mutable_data();
  const double orig = values[0];
  const double h = 1e-5;
  double plus;
  double minus;
  {
    ag::NoGradGuard guard;
    values[0] = orig + h;
    plus = objective().item();
    values[0] = orig - h;
    minus = objective().item();
    values[0] = orig;
  }
  const double numeric = (plus - minus) / (2 * h);
  EXPECT_GT(std::abs(numeric), 1e-8);
  EXPECT_GT(std::abs(analytic), 1e-8);
  EXPECT_NEAR(analytic, numeric, 1e-3 * std::max(std::abs(numeric), 1e-6));
}

TEST(TinyDetector, LossIsFiniteWithAndWithoutBoxes) {
  TinyDetector backbone(8, 2);
  const auto images = to_batch(std::vector<ImageTensor>{interior_image(16, 16, 1), interior_image(16, 16, 2)});
  const auto preds = backbone.forward(images);
  const BoxesByImage boxes{{{2, 2, 12, 12}}, {}};
  EXPECT_TRUE(std::isfinite(backbone.loss(preds, boxes).item()));
  EXPECT_TRUE(std::isfinite(backbone.loss(preds, BoxesByImage{{}, {}}).item()));
  EXPECT_THROW(backbone.loss(preds, BoxesByImage{{}}), ValidationError);
}

TEST(TinyDetector, LossGradientReachesInputImages) {
  TinyDetector backbone(4, 2);
  auto images = to_batch(std::vector<ImageTensor>{interior_image(8, 8, 1)});
  images.set_requires_grad(true);
  backbone.loss(backbone.forward(images), BoxesByImage{{{1, 1, 7, 7}}}).backward();
  double norm = 0.0;
  for (double g : images.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(TinyDetector, RejectsSizesOffTheStride) {
  TinyDetector backbone(4, 2);
  EXPECT_THROW(backbone.forward(to_batch(std::vector<ImageTensor>{interior_image(10, 8, 1)})), ValidationError);
}

TEST(TinyDetector, DecodeRecoversEncodedBox) {
  TinyDetector backbone(4, 0);
  // Hand-built prediction grid with one confident cell at (y=2, x=3) on a 32x32 input.
  const std::int64_t g = 8;
  std::vector<double> v(6 * g * g, -30.0);
  for (std::int64_t k = 2 * g * g; k < 6 * g * g; ++k) v[k] = 0.0;
  const auto cell = 2 * g + 3;
  v[cell] = 30.0;
  v[g * g + cell] = 30.0;
  const double cx = 14.0;
  const double cy = 10.0;
  const Box truth{5.0, 4.0, 20.0, 18.0};
  const std::array<double, 4> d{cx - truth.x_min, cy - truth.y_min, truth.x_max - cx, truth.y_max - cy};
  for (int s = 0; s < 4; ++s) v[(2 + s) * g * g + cell] = std::log(d[s] / 4.0);
  const auto dets = backbone.decode(ag::Tensor::from({1, 6, g, g}, v), 0.5, 0.5);
  ASSERT_EQ(dets.size(), 1u);
  ASSERT_EQ(dets[0].size(), 1u);
  EXPECT_NEAR(dets[0][0].box.x_min, truth.x_min, 1e-9);
  EXPECT_NEAR(dets[0][0].box.y_min, truth.y_min, 1e-9);
  EXPECT_NEAR(dets[0][0].box.x_max, truth.x_max, 1e-9);
  EXPECT_NEAR(dets[0][0].box.y_max, truth.y_max, 1e-9);
  EXPECT_GE(dets[0][0].confidence, 0.0);
  EXPECT_LE(dets[0][0].confidence, 1.0);
}

TEST(Nms, SuppressesOverlapsKeepsDisjoint) {
  std::vector<Detection> dets{{{0, 0, 10, 10}, 0.6, 0}, {{1, 1, 10, 10}, 0.9, 0}, {{20, 20, 30, 30}, 0.5, 0}};
  const auto kept = non_max_suppression(dets, 0.5);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].confidence, 0.9);
  EXPECT_EQ(kept[1].confidence, 0.5);
}

TEST(TrainDetector, ZeroEpochsLeaveParametersUnchanged) {
  EnhanceConfig cfg;
  TinyDetector backbone(4, 1);
  ConvParamHead head(cfg, 1);
  const auto data = synth_samples(4, 1);
  const auto before_b = snapshot(backbone.parameters());
  const auto before_h = snapshot(head.parameters());
  const auto hist = train_detector(data, &head, backbone, cfg, small_schedule(0, 0), AugPolicy{});
  EXPECT_TRUE(hist.empty());
  EXPECT_EQ(snapshot(backbone.parameters()), before_b);
  EXPECT_EQ(snapshot(head.parameters()), before_h);
}

TEST(TrainDetector, PhaseZeroFreezesBackboneBitwise) {
  EnhanceConfig cfg;
  TinyDetector backbone(4, 1);
  ConvParamHead head(cfg, 1);
  const auto data = synth_samples(8, 2);
  const auto before_b = snapshot(backbone.parameters());
  const auto before_h = snapshot(head.parameters());
  const auto hist = train_detector(data, &head, backbone, cfg, small_schedule(3, 0), AugPolicy{});
  ASSERT_EQ(hist.size(), 3u);
  for (const auto& e : hist) EXPECT_EQ(e.phase, 0);
  EXPECT_EQ(snapshot(backbone.parameters()), before_b);
  EXPECT_NE(snapshot(head.parameters()), before_h);
  for (const auto& p : backbone.parameters()) EXPECT_TRUE(p.tensor.requires_grad());
}

TEST(TrainDetector, PhaseOneUpdatesBackbone) {
  EnhanceConfig cfg;
  TinyDetector backbone(4, 1);
  ConvParamHead head(cfg, 1);
  const auto data = synth_samples(4, 2);
  const auto before_b = snapshot(backbone.parameters());
  const auto hist = train_detector(data, &head, backbone, cfg, small_schedule(1, 1), AugPolicy{});
  ASSERT_EQ(hist.size(), 2u);
  EXPECT_EQ(hist[0].phase, 0);
  EXPECT_EQ(hist[1].phase, 1);
  EXPECT_NE(snapshot(backbone.parameters()), before_b);
}

TEST(TrainDetector, IdenticalSeedsGiveIdenticalTraces) {
  EnhanceConfig cfg;
  const auto data = synth_samples(6, 4);
  auto run = [&] {
    TinyDetector backbone(4, 9);
    ConvParamHead head(cfg, 9);
    return train_detector(data, &head, backbone, cfg, small_schedule(1, 2), AugPolicy{});
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].total_loss, b[i].total_loss);
    EXPECT_EQ(a[i].preproc_loss, b[i].preproc_loss);
  }
}

TEST(TrainDetector, RejectsEmptyDataAndBadSchedules) {
  EnhanceConfig cfg;
  TinyDetector backbone(4, 1);
  EXPECT_THROW(train_detector({}, nullptr, backbone, cfg, small_schedule(1, 1), AugPolicy{}), ValidationError);
  const auto data = synth_samples(1, 1);
  EXPECT_THROW(train_detector(data, nullptr, backbone, cfg, small_schedule(-1, 1), AugPolicy{}), ValidationError);
}

TEST(TrainDetector, NonFiniteLossAbortsWithDiagnostic) {
  EnhanceConfig cfg;
  TinyDetector backbone(4, 1);
  backbone.parameters().back().tensor.mutable_data()[0] = std::nan("");
  const auto data = synth_samples(2, 1);
  try {
    train_detector(data, nullptr, backbone, cfg, small_schedule(0, 1), AugPolicy{});
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("phase 1"), std::string::npos);
  }
}

TEST(TrainSchedule, JsonRoundTrip) {
  TrainSchedule s = small_schedule(2, 7);
  s.joint_learning_rate = 5e-4;
  const nlohmann::json j = s;
  const auto back = j.get<TrainSchedule>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_THROW((nlohmann::json{{"batch_size", 0}}.get<TrainSchedule>()), ValidationError);
}

class TrainedDetector : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new std::vector<DetectionSample>(synth_samples(50, 21));
    backbone_ = new TinyDetector(16, 5);
    head_ = new ConvParamHead(cfg_, 5);
    initial_ = evaluate_detector_loss(*data_, head_, *backbone_, cfg_);
    TrainSchedule s;
    s.seed = 5;
    s.batch_size = 16;
    history_ = new std::vector<DetectorEpoch>(train_detector(*data_, head_, *backbone_, cfg_, s, AugPolicy{}));
    final_ = evaluate_detector_loss(*data_, head_, *backbone_, cfg_);
  }
  static void TearDownTestSuite() {
    delete data_;
    delete backbone_;
    delete head_;
    delete history_;
  }

  static inline EnhanceConfig cfg_{};
  static inline std::vector<DetectionSample>* data_ = nullptr;
  static inline TinyDetector* backbone_ = nullptr;
  static inline ConvParamHead* head_ = nullptr;
  static inline std::vector<DetectorEpoch>* history_ = nullptr;
  static inline double initial_ = 0.0;
  static inline double final_ = 0.0;
};

TEST_F(TrainedDetector, FinalLossBelowInitial) {
  ASSERT_EQ(history_->size(), 60u);
  EXPECT_LT(final_, initial_);
  EXPECT_LT(history_->back().total_loss, history_->front().total_loss);
}

TEST_F(TrainedDetector, ThresholdOneReturnsNothing) {
  DetectOptions opt;
  opt.confidence_threshold = 1.0;
  EXPECT_TRUE(detect((*data_)[0].image, head_, *backbone_, cfg_, opt).empty());
}

TEST_F(TrainedDetector, BlankImageYieldsNoDetectionsAtHalf) {
  DetectOptions opt;
  opt.confidence_threshold = 0.5;
  for (double level : {0.0, 0.02, 0.3}) {
    const ImageTensor blank(64, 64, 3, level);
    EXPECT_TRUE(detect(blank, head_, *backbone_, cfg_, opt).empty()) << "level " << level;
  }
}

TEST_F(TrainedDetector, CropsMatchDetectionBoxes) {
  DetectOptions opt;
  opt.confidence_threshold = 0.05;
  opt.crop_size = 32;
  std::size_t seen = 0;
  for (int i = 0; i < 5; ++i) {
    const auto& image = (*data_)[i].image;
    for (const auto& sign : detect(image, head_, *backbone_, cfg_, opt)) {
      ++seen;
      const auto expected = crop_box(image, sign.detection.box, opt.crop_size);
      EXPECT_EQ(pixels(sign.crop.values()), pixels(expected.values()));
      EXPECT_TRUE(sign.detection.box.well_formed());
      EXPECT_GE(sign.detection.confidence, 0.0);
      EXPECT_LE(sign.detection.confidence, 1.0);
    }
  }
  EXPECT_GT(seen, 0u);
}

TEST_F(TrainedDetector, DetectionIsDeterministicAndHandlesOddSizes) {
  const auto& source = (*data_)[1].image;
  ImageTensor odd(58, 61, 3);
  for (int y = 0; y < 58; ++y)
    for (int x = 0; x < 61; ++x)
      for (int c = 0; c < 3; ++c) odd.at(y, x, c) = source.at(y, x, c);
  DetectOptions opt;
  opt.confidence_threshold = 0.05;
  const auto a = detect(odd, head_, *backbone_, cfg_, opt);
  const auto b = detect(odd, head_, *backbone_, cfg_, opt);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].detection.confidence, b[i].detection.confidence);
    EXPECT_LE(a[i].detection.box.x_max, 61.0);
    EXPECT_LE(a[i].detection.box.y_max, 58.0);
  }
}

TEST_F(TrainedDetector, CheckpointRoundTrip) {
  lensnet::testing::TempDir dir;
  DetectorModel model;
  model.config = cfg_;
  model.backbone = std::make_unique<TinyDetector>(16, 5);
  model.head = std::make_unique<ConvParamHead>(cfg_, 5);
  nn::load_state(model.backbone->parameters(), nn::state_to_json(backbone_->parameters()));
  nn::load_state(model.head->parameters(), nn::state_to_json(head_->parameters()));
  save_detector(model, dir / "det.ckpt");
  const auto loaded = load_detector(dir / "det.ckpt");
  EXPECT_EQ(loaded.backbone->identifier(), backbone_->identifier());
  EXPECT_EQ(snapshot(loaded.backbone->parameters()), snapshot(backbone_->parameters()));
  EXPECT_EQ(snapshot(loaded.head->parameters()), snapshot(head_->parameters()));
  const auto images = to_batch(std::vector<ImageTensor>{(*data_)[2].image});
  ag::NoGradGuard guard;
  EXPECT_EQ(wrapped_forward(images, loaded.head.get(), *loaded.backbone, loaded.config).predictions.data()[7],
            wrapped_forward(images, head_, *backbone_, cfg_).predictions.data()[7]);
}

TEST(DetectorCheckpoint, FixedAndNullHeads) {
  lensnet::testing::TempDir dir;
  DetectorModel fixed;
  fixed.backbone = std::make_unique<TinyDetector>(4, 2);
  fixed.head = std::make_unique<FixedParamHead>(EnhanceParams{1.5, 2.0, 0.1});
  save_detector(fixed, dir / "fixed.ckpt");
  const auto a = load_detector(dir / "fixed.ckpt");
  ASSERT_TRUE(a.head);
  EXPECT_EQ(*a.head->fixed_params(), (EnhanceParams{1.5, 2.0, 0.1}));

  DetectorModel bare;
  bare.backbone = std::make_unique<TinyDetector>(4, 2);
  save_detector(bare, dir / "bare.ckpt");
  EXPECT_FALSE(load_detector(dir / "bare.ckpt").head);

  lensnet::testing::write_text(dir / "junk.ckpt", "not a checkpoint");
  EXPECT_THROW(load_detector(dir / "junk.ckpt"), ValidationError);
  EXPECT_THROW(load_detector(dir / "missing.ckpt"), IoError);
}

TEST(Synth, ScenesAreDeterministicAndBoxesValid) {
  SynthOptions o;
  o.seed = 9;
  const auto a = generate_scene(o, 3);
  const auto b = generate_scene(o, 3);
  EXPECT_EQ(pixels(a.image.values()), pixels(b.image.values()));
  ASSERT_GE(a.record.instances.size(), 1u);
  ASSERT_LE(a.record.instances.size(), 3u);
  for (const auto& inst : a.record.instances) {
    EXPECT_TRUE(inst.box.well_formed());
    EXPECT_GE(inst.box.x_min, 0.0);
    EXPECT_LE(inst.box.x_max, 64.0);
  }
  EXPECT_NE(pixels(generate_scene(o, 4).image.values()), pixels(a.image.values()));
}

TEST(Synth, DarkScenesAreDarkerThanDayScenes) {
  SynthOptions night;
  SynthOptions day;
  day.dark = false;
  double sum_night = 0.0;
  double sum_day = 0.0;
  for (int i = 0; i < 10; ++i) {
    for (double v : generate_scene(night, i).image.values()) sum_night += v;
    for (double v : generate_scene(day, i).image.values()) sum_day += v;
  }
  EXPECT_LT(sum_night, 0.5 * sum_day);
}

TEST(Synth, ClassNamesCoverEveryPairOnce) {
  std::set<std::pair<int, int>> pairs;
  for (int i = 0; i < 28; ++i) pairs.insert(synth_class_attributes(i));
  EXPECT_EQ(pairs.size(), 28u);
  EXPECT_EQ(synth_class_names(8).size(), 8u);
}

TEST(Synth, WrittenDatasetLoadsBack) {
  lensnet::testing::TempDir dir;
  SynthOptions o;
  o.images = 6;
  o.seed = 2;
  const auto written = write_synthetic_dataset(o, dir.path());
  const auto classes = ClassList::load(dir / "classes.txt");
  const auto loaded = load_manifest(dir / "manifest.jsonl", &classes);
  ASSERT_EQ(loaded.size(), 6u);
  const auto samples = load_detection_samples(loaded);
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_EQ(loaded[i].image_id, written[i].image_id);
    EXPECT_EQ(samples[i].boxes.size(), written[i].instances.size());
    EXPECT_EQ(samples[i].image.width(), 64);
  }
}

TEST(Synth, OptionsValidate) {
  SynthOptions o;
  o.classes = 29;
  EXPECT_THROW(o.validate(), ValidationError);
  const nlohmann::json j = SynthOptions{};
  EXPECT_EQ(nlohmann::json(j.get<SynthOptions>()), j);
}

TEST(Synth, IntsdShapedRecordsMatchTotals) {
  const auto records = intsd_shaped_records(1);
  const auto c = census(records);
  EXPECT_EQ(c.total_images, 6004);
  EXPECT_EQ(c.total_instances, 14044);
  EXPECT_EQ(c.counts.size(), 41u);
  EXPECT_DOUBLE_EQ(c.mean_instances_per_image(), 14044.0 / 6004.0);
  std::int64_t supports = 0;
  for (const auto& [name, n] : intsd_report_supports()) supports += n;
  EXPECT_EQ(supports, 12535);
}
