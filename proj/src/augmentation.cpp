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

#include "lensnet/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "lensnet/enhancement.hpp"
#include "lensnet/errors.hpp"
#include "lensnet/hash.hpp"

namespace lensnet {

using nlohmann::json;

std::string to_string(AugFamily family) {
  switch (family) {
    case AugFamily::photometric: return "photometric";
    case AugFamily::jpeg: return "jpeg";
    case AugFamily::gaussian_noise: return "gaussian_noise";
    case AugFamily::blur: return "blur";
    case AugFamily::rotation: return "rotation";
  }
  return "unknown";
}

AugFamily aug_family_from_string(const std::string& name) {
  for (auto f : kAugFamilies)
    if (to_string(f) == name) return f;
  throw ValidationError("unknown augmentation family '" + name + "'");
}

void AugPolicy::validate() const {
  for (auto f : kAugFamilies) {
    const double w = weight(f);
    if (!(w > 0 && w <= 1)) throw ValidationError("augmentation weight for " + to_string(f) + " must lie in (0, 1]");
  }
  if (!(clamp_low >= 0 && clamp_low < clamp_high && clamp_high <= 1))
    throw ValidationError("augmentation clamp bounds must satisfy 0 <= low < high <= 1");
  if (!(p_base >= 0 && p_scale >= 0)) throw ValidationError("p_base and p_scale must be nonnegative");
  const auto& r = ranges;
  if (!(r.jitter_min > 0 && r.jitter_min <= r.jitter_max)) throw ValidationError("invalid jitter range");
  if (!(r.jpeg_quality_min >= 1 && r.jpeg_quality_min <= r.jpeg_quality_max && r.jpeg_quality_max <= 100))
    throw ValidationError("invalid JPEG quality range");
  if (!(r.noise_sigma_min >= 0 && r.noise_sigma_min <= r.noise_sigma_max)) throw ValidationError("invalid noise range");
  if (!(r.blur_sigma_min > 0 && r.blur_sigma_min <= r.blur_sigma_max)) throw ValidationError("invalid blur range");
  if (!(r.rotation_max_deg >= 0)) throw ValidationError("invalid rotation range");
  for (const auto& [f, p] : probability_override)
    if (!(p >= 0 && p <= 1)) throw ValidationError("probability override for " + to_string(f) + " outside [0, 1]");
}

double AugPolicy::weight(AugFamily family) const {
  auto it = type_weights.find(family);
  if (it == type_weights.end()) throw ValidationError("no weight for augmentation family " + to_string(family));
  return it->second;
}

AugPolicy AugPolicy::disabled() {
  AugPolicy p;
  for (auto f : kAugFamilies) p.probability_override[f] = 0.0;
  return p;
}

void to_json(json& j, const AugPolicy& p) {
  json weights = json::object();
  for (const auto& [f, w] : p.type_weights) weights[to_string(f)] = w;
  const auto& r = p.ranges;
  j = {{"type_weights", weights},
       {"p_base", p.p_base},
       {"p_scale", p.p_scale},
       {"clamp_low", p.clamp_low},
       {"clamp_high", p.clamp_high},
       {"enabled", p.enabled},
       {"ranges",
        {{"jitter", {r.jitter_min, r.jitter_max}},
         {"jpeg_quality", {r.jpeg_quality_min, r.jpeg_quality_max}},
         {"noise_sigma", {r.noise_sigma_min, r.noise_sigma_max}},
         {"blur_sigma", {r.blur_sigma_min, r.blur_sigma_max}},
         {"rotation_max_deg", r.rotation_max_deg}}}};
}

void from_json(const json& j, AugPolicy& p) {
  if (j.contains("type_weights"))
    for (const auto& [name, w] : j.at("type_weights").items()) p.type_weights[aug_family_from_string(name)] = w;
  auto scalar = [&](const json& obj, const char* key, auto& out) {
    if (obj.contains(key)) out = obj.at(key).get<std::decay_t<decltype(out)>>();
  };
  scalar(j, "p_base", p.p_base);
  scalar(j, "p_scale", p.p_scale);
  scalar(j, "clamp_low", p.clamp_low);
  scalar(j, "clamp_high", p.clamp_high);
  scalar(j, "enabled", p.enabled);
  if (j.contains("ranges")) {
    const auto& r = j.at("ranges");
    auto pair = [&](const char* key, auto& lo, auto& hi) {
      if (!r.contains(key)) return;
      const auto& v = r.at(key);
      if (!v.is_array() || v.size() != 2) throw ValidationError(std::string("augmentation.ranges.") + key + " must be a pair");
      lo = v[0].get<std::decay_t<decltype(lo)>>();
      hi = v[1].get<std::decay_t<decltype(hi)>>();
    };
    pair("jitter", p.ranges.jitter_min, p.ranges.jitter_max);
    pair("jpeg_quality", p.ranges.jpeg_quality_min, p.ranges.jpeg_quality_max);
    pair("noise_sigma", p.ranges.noise_sigma_min, p.ranges.noise_sigma_max);
    pair("blur_sigma", p.ranges.blur_sigma_min, p.ranges.blur_sigma_max);
    scalar(r, "rotation_max_deg", p.ranges.rotation_max_deg);
  }
  p.validate();
}

// ---- probabilities ----

double rarity(std::int64_t count, std::int64_t count_max) {
  if (count_max <= 0) throw ValidationError("rarity needs count_max > 0");
  if (count < 0 || count > count_max) throw ValidationError("rarity needs 0 <= count <= count_max");
  return 1.0 - std::log1p(static_cast<double>(count)) / std::log1p(static_cast<double>(count_max));
}

double class_aug_prob(double r, const AugPolicy& policy) {
  return std::clamp(policy.p_base + policy.p_scale * r, policy.clamp_low, policy.clamp_high);
}

double applied_aug_prob(double p_class, double w_type, const AugPolicy& policy) {
  return std::clamp(p_class * w_type, policy.clamp_low, policy.clamp_high);
}

RarityTable::RarityTable(const ClassCensus& census, const AugPolicy& policy) : policy_(policy) {
  for (const auto& [name, n] : census.counts) rarity_[name] = lensnet::rarity(n, census.count_max);
}

double RarityTable::rarity(const std::string& class_name) const {
  auto it = rarity_.find(class_name);
  return it == rarity_.end() ? 1.0 : it->second;
}

double RarityTable::p_class(const std::string& class_name) const {
  return class_aug_prob(rarity(class_name), policy_);
}

double family_probability(AugFamily family, double p_class, const AugPolicy& policy) {
  if (auto it = policy.probability_override.find(family); it != policy.probability_override.end()) return it->second;
  if (!policy.enabled) return 0.0;
  return applied_aug_prob(p_class, policy.weight(family), policy);
}

bool AugDraw::has(AugFamily f) const { return std::find(applied.begin(), applied.end(), f) != applied.end(); }

AugDraw sample_augmentations(double p_class, const AugPolicy& policy, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AugDraw d;
  for (auto f : kAugFamilies) {
    const double u = unit(rng);
    if (u < family_probability(f, p_class, policy)) d.applied.push_back(f);
  }
  const auto& r = policy.ranges;
  std::uniform_real_distribution<double> jitter(r.jitter_min, r.jitter_max);
  for (auto& j : d.jitter) j = jitter(rng);
  d.jpeg_quality = std::uniform_int_distribution<int>(r.jpeg_quality_min, r.jpeg_quality_max)(rng);
  d.noise_sigma = std::uniform_real_distribution<double>(r.noise_sigma_min, r.noise_sigma_max)(rng);
  d.noise_seed = rng();
  d.blur_sigma = std::uniform_real_distribution<double>(r.blur_sigma_min, r.blur_sigma_max)(rng);
  d.rotation_deg = std::uniform_real_distribution<double>(-r.rotation_max_deg, r.rotation_max_deg)(rng);
  if (policy.fixed_rotation_deg) d.rotation_deg = *policy.fixed_rotation_deg;
  if (!d.has(AugFamily::photometric)) d.jitter = {1, 1, 1};
  return d;
}

// ---- pixel transforms ----

ImageTensor photometric_jitter(const ImageTensor& image, double brightness, double contrast, double saturation) {
  ImageTensor out = image;
  for (auto& v : out.values()) v *= brightness;
  if (image.channels() == 3) {
    double mean = 0.0;
    for (int y = 0; y < out.height(); ++y)
      for (int x = 0; x < out.width(); ++x)
        mean += 0.299 * out.at(y, x, 0) + 0.587 * out.at(y, x, 1) + 0.114 * out.at(y, x, 2);
    mean /= std::max<std::size_t>(1, static_cast<std::size_t>(out.height()) * out.width());
    for (auto& v : out.values()) v = mean + contrast * (v - mean);
    for (int y = 0; y < out.height(); ++y)
      for (int x = 0; x < out.width(); ++x) {
        const double g = 0.299 * out.at(y, x, 0) + 0.587 * out.at(y, x, 1) + 0.114 * out.at(y, x, 2);
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = g + saturation * (out.at(y, x, c) - g);
      }
  }
  out.clamp();
  return out;
}

ImageTensor jpeg_roundtrip(const ImageTensor& image, int quality) {
  if (image.channels() != 3) throw ValidationError("JPEG round trip expects 3 channels");
  cv::Mat bgr(image.height(), image.width(), CV_8UC3);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < 3; ++c)
        row[x][2 - c] = static_cast<unsigned char>(std::lround(std::clamp(image.at(y, x, c), 0.0, 1.0) * 255.0));
  }
  std::vector<unsigned char> buffer;
  if (!cv::imencode(".jpg", bgr, buffer, {cv::IMWRITE_JPEG_QUALITY, quality}))
    throw IoError("JPEG encoding failed");
  cv::Mat decoded = cv::imdecode(buffer, cv::IMREAD_COLOR);
  if (decoded.empty()) throw IoError("JPEG decoding failed");
  ImageTensor out(image.height(), image.width(), 3);
  for (int y = 0; y < out.height(); ++y) {
    const auto* row = decoded.ptr<cv::Vec3b>(y);
    for (int x = 0; x < out.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = row[x][2 - c] / 255.0;
  }
  return out;
}

ImageTensor gaussian_noise(const ImageTensor& image, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  ImageTensor out = image;
  for (auto& v : out.values()) v += n(rng);
  out.clamp();
  return out;
}

ImageTensor blur_image(const ImageTensor& image, double sigma) {
  ag::NoGradGuard guard;
  auto t = ag::Tensor::from({1, image.channels(), image.height(), image.width()}, image.to_planar());
  auto out = from_batch(gaussian_blur(t, sigma), 0);
  out.clamp();
  return out;
}

namespace {

double sample_zero_fill(const ImageTensor& img, double sx, double sy, int c) {
  const int x0 = static_cast<int>(std::floor(sx));
  const int y0 = static_cast<int>(std::floor(sy));
  const double fx = sx - x0;
  const double fy = sy - y0;
  auto px = [&](int y, int x) {
    return (x < 0 || y < 0 || x >= img.width() || y >= img.height()) ? 0.0 : img.at(y, x, c);
  };
  return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
         fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
}

}  // namespace

ImageTensor rotate_image(const ImageTensor& image, double degrees) {
  const double t = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(t);
  const double sn = std::sin(t);
  const double cx = (image.width() - 1) / 2.0;
  const double cy = (image.height() - 1) / 2.0;
  ImageTensor out(image.height(), image.width(), image.channels(), 0.0);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      const double dx = x - cx;
      const double dy = y - cy;
      const double sx = cx + dx * cs - dy * sn;
      const double sy = cy + dx * sn + dy * cs;
      for (int c = 0; c < image.channels(); ++c) out.at(y, x, c) = sample_zero_fill(image, sx, sy, c);
    }
  out.clamp();
  return out;
}

namespace {

std::optional<Box> rotate_box(const Box& b, double degrees, int width, int height) {
  const double t = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(t);
  const double sn = std::sin(t);
  const double cx = width / 2.0;
  const double cy = height / 2.0;
  double x_lo = 1e300, x_hi = -1e300, y_lo = 1e300, y_hi = -1e300;
  for (double u : {b.x_min, b.x_max})
    for (double v : {b.y_min, b.y_max}) {
      const double dx = u - cx;
      const double dy = v - cy;
      const double nx = cx + dx * cs + dy * sn;
      const double ny = cy - dx * sn + dy * cs;
      x_lo = std::min(x_lo, nx);
      x_hi = std::max(x_hi, nx);
      y_lo = std::min(y_lo, ny);
      y_hi = std::max(y_hi, ny);
    }
  Box r{std::max(0.0, x_lo), std::max(0.0, y_lo), std::min<double>(width, x_hi), std::min<double>(height, y_hi)};
  if (r.width() < 1.0 || r.height() < 1.0) return std::nullopt;
  return r;
}

}  // namespace

AugmentResult apply_draw(const ImageTensor& image, const std::vector<Box>& boxes, const AugDraw& draw) {
  AugmentResult out{image, boxes, draw};
  for (auto f : kAugFamilies) {
    if (!draw.has(f)) continue;
    switch (f) {
      case AugFamily::photometric:
        out.image = photometric_jitter(out.image, draw.jitter[0], draw.jitter[1], draw.jitter[2]);
        break;
      case AugFamily::jpeg: out.image = jpeg_roundtrip(out.image, draw.jpeg_quality); break;
      case AugFamily::gaussian_noise: out.image = gaussian_noise(out.image, draw.noise_sigma, draw.noise_seed); break;
      case AugFamily::blur: out.image = blur_image(out.image, draw.blur_sigma); break;
      case AugFamily::rotation: {
        out.image = rotate_image(out.image, draw.rotation_deg);
        std::vector<Box> rotated;
        for (const auto& b : out.boxes)
          if (auto r = rotate_box(b, draw.rotation_deg, image.width(), image.height())) rotated.push_back(*r);
        out.boxes = std::move(rotated);
        break;
      }
    }
  }
  out.image.clamp();
  return out;
}

ImageTensor apply_augmentations(const ImageTensor& image, const std::string& label_class, const AugPolicy& policy,
                                const RarityTable& rarity_table, std::uint64_t seed) {
  const auto draw = sample_augmentations(rarity_table.p_class(label_class), policy, seed);
  return apply_draw(image, {}, draw).image;
}

AugmentResult apply_scene_augmentations(const ImageTensor& image, const std::vector<Box>& boxes,
                                        const AugPolicy& policy, std::uint64_t seed) {
  return apply_draw(image, boxes, sample_augmentations(1.0, policy, seed));
}

std::uint64_t item_seed(std::uint64_t seed, const std::string& key, std::uint64_t epoch) {
  return splitmix64(splitmix64(splitmix64(seed) ^ fnv1a(key)) ^ epoch);
}

}  // namespace lensnet
