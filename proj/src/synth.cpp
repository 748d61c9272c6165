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

#include "lensnet/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "lensnet/augmentation.hpp"
#include "lensnet/classifier.hpp"
#include "lensnet/errors.hpp"
#include "lensnet/hash.hpp"
#include "lensnet/metrics.hpp"

namespace lensnet {
namespace {

using Rgb = std::array<double, 3>;

constexpr std::array<Rgb, 7> kPalette{{{0.85, 0.10, 0.10},
                                       {0.10, 0.25, 0.80},
                                       {0.10, 0.60, 0.25},
                                       {0.95, 0.85, 0.10},
                                       {0.92, 0.92, 0.92},
                                       {0.08, 0.08, 0.08},
                                       {0.95, 0.50, 0.10}}};

enum Shape { kCircle = 0, kRectangle = 1, kOctagon = 2, kTriangle = 3 };

// Half extents of the shape's bounding box for "radius" r.
std::pair<double, double> half_extent(int shape, double r) {
  switch (shape) {
    case kRectangle: return {r, 0.7 * r};
    case kTriangle: return {r, 0.9 * r};
    default: return {r, r};
  }
}

bool inside(int shape, double dx, double dy, double r) {
  switch (shape) {
    case kCircle: return dx * dx + dy * dy <= r * r;
    case kRectangle: return std::abs(dx) <= r && std::abs(dy) <= 0.7 * r;
    case kOctagon:
      return std::abs(dx) <= r && std::abs(dy) <= r && std::abs(dx) + std::abs(dy) <= r * std::sqrt(2.0);
    case kTriangle: {
      // Apex at (0, -0.9r), base from (-r, 0.9r) to (r, 0.9r).
      if (dy > 0.9 * r || dy < -0.9 * r) return false;
      const double half_width = r * (dy + 0.9 * r) / (1.8 * r);
      return std::abs(dx) <= half_width;
    }
  }
  return false;
}

ImageTensor background(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  constexpr int kGrid = 5;
  std::array<double, kGrid * kGrid> coarse{};
  for (auto& v : coarse) v = u(rng) - 0.5;
  const Rgb tint{0.25 + 0.35 * u(rng), 0.25 + 0.35 * u(rng), 0.25 + 0.35 * u(rng)};
  const double slope = 0.3 * (u(rng) - 0.5);
  std::normal_distribution<double> grain(0.0, 0.03);
  ImageTensor img(size, size, 3);
  for (int y = 0; y < size; ++y) {
    const double gy = static_cast<double>(y) / size * (kGrid - 1);
    const int y0 = std::min(kGrid - 2, static_cast<int>(gy));
    const double fy = gy - y0;
    for (int x = 0; x < size; ++x) {
      const double gx = static_cast<double>(x) / size * (kGrid - 1);
      const int x0 = std::min(kGrid - 2, static_cast<int>(gx));
      const double fx = gx - x0;
      const double low = (1 - fy) * ((1 - fx) * coarse[y0 * kGrid + x0] + fx * coarse[y0 * kGrid + x0 + 1]) +
                         fy * ((1 - fx) * coarse[(y0 + 1) * kGrid + x0] + fx * coarse[(y0 + 1) * kGrid + x0 + 1]);
      const double shade = 0.3 * low + slope * (static_cast<double>(y) / size - 0.5);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = tint[c] + shade + grain(rng);
    }
  }
  img.clamp();
  return img;
}

// Paints the sign with 4x4 supersampling; returns the per-pixel coverage.
std::vector<double> paint_sign(ImageTensor& img, int shape, const Rgb& color, double cx, double cy, double r,
                               const Rgb& mark) {
  const int size = img.width();
  std::vector<double> coverage(static_cast<std::size_t>(size) * size, 0.0);
  const auto [hx, hy] = half_extent(shape, r);
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - hx)));
  const int x1 = std::min(size - 1, static_cast<int>(std::ceil(cx + hx)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - hy)));
  const int y1 = std::min(img.height() - 1, static_cast<int>(std::ceil(cy + hy)));
  const double mark_r = 0.3 * r;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      int hits = 0;
      int mark_hits = 0;
      for (int sy = 0; sy < 4; ++sy) {
        for (int sx = 0; sx < 4; ++sx) {
          const double dx = x + (sx + 0.5) / 4.0 - cx;
          const double dy = y + (sy + 0.5) / 4.0 - cy;
          if (inside(shape, dx, dy, r)) {
            ++hits;
            if (std::abs(dx) <= mark_r && std::abs(dy) <= 0.4 * mark_r) ++mark_hits;
          }
        }
      }
      if (hits == 0) continue;
      const double a = hits / 16.0;
      const double m = mark_hits / 16.0;
      coverage[static_cast<std::size_t>(y) * size + x] = a;
      for (int c = 0; c < 3; ++c) {
        const double fill = (a - m) * color[c] + m * mark[c];
        img.at(y, x, c) = (1 - a) * img.at(y, x, c) + fill;
      }
    }
  }
  return coverage;
}

}  // namespace

void SynthOptions::validate() const {
  if (image_size < 16) throw ValidationError("synth.image_size must be >= 16");
  if (images < 1) throw ValidationError("synth.images must be >= 1");
  if (classes < 1 || classes > 28) throw ValidationError("synth.classes must be in [1, 28]");
  if (min_signs < 0 || max_signs < min_signs) throw ValidationError("synth sign counts must satisfy 0 <= min <= max");
  if (!(min_sign_size >= 4.0) || max_sign_size < min_sign_size || max_sign_size > image_size)
    throw ValidationError("synth sign sizes must satisfy 4 <= min <= max <= image_size");
  if (!(illumination_min > 0) || illumination_max < illumination_min || illumination_max > 1)
    throw ValidationError("synth illumination range must lie in (0, 1]");
  if (!(night_gamma > 0)) throw ValidationError("synth.night_gamma must be positive");
  for (double p : {glare_probability, blur_probability})
    if (!(p >= 0 && p <= 1)) throw ValidationError("synth probabilities must lie in [0, 1]");
  if (sensor_noise < 0) throw ValidationError("synth.sensor_noise must be nonnegative");
}

void to_json(nlohmann::json& j, const SynthOptions& o) {
  j = {{"image_size", o.image_size},
       {"images", o.images},
       {"classes", o.classes},
       {"min_signs", o.min_signs},
       {"max_signs", o.max_signs},
       {"min_sign_size", o.min_sign_size},
       {"max_sign_size", o.max_sign_size},
       {"dark", o.dark},
       {"illumination_min", o.illumination_min},
       {"illumination_max", o.illumination_max},
       {"night_gamma", o.night_gamma},
       {"glare_probability", o.glare_probability},
       {"blur_probability", o.blur_probability},
       {"sensor_noise", o.sensor_noise},
       {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, SynthOptions& o) {
  auto field = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  field("image_size", o.image_size);
  field("images", o.images);
  field("classes", o.classes);
  field("min_signs", o.min_signs);
  field("max_signs", o.max_signs);
  field("min_sign_size", o.min_sign_size);
  field("max_sign_size", o.max_sign_size);
  field("dark", o.dark);
  field("illumination_min", o.illumination_min);
  field("illumination_max", o.illumination_max);
  field("night_gamma", o.night_gamma);
  field("glare_probability", o.glare_probability);
  field("blur_probability", o.blur_probability);
  field("sensor_noise", o.sensor_noise);
  field("seed", o.seed);
  o.validate();
}

std::pair<int, int> synth_class_attributes(int index) {
  if (index < 0 || index >= 28) throw ValidationError("synth class index must be in [0, 28)");
  const int shape = index % 4;
  const int color = (5 * (index / 4) + shape) % 7;
  return {shape, color};
}

std::string synth_class_name(int index) {
  const auto [shape, color] = synth_class_attributes(index);
  return default_color_categories()[color] + "_" + default_shape_categories()[shape];
}

std::vector<std::string> synth_class_names(int count) {
  std::vector<std::string> names;
  for (int i = 0; i < count; ++i) names.push_back(synth_class_name(i));
  return names;
}

SynthScene generate_scene(const SynthOptions& options, int index) {
  options.validate();
  std::mt19937_64 rng(splitmix64(options.seed ^ splitmix64(static_cast<std::uint64_t>(index) + 1)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int size = options.image_size;

  SynthScene scene;
  scene.image = background(size, rng);
  char id[32];
  std::snprintf(id, sizeof(id), "scene_%05d", index);
  scene.record.image_id = id;
  scene.record.image_path = std::string("images/") + id + ".png";
  scene.record.width = size;
  scene.record.height = size;
  scene.record.tags = {"synthetic", options.dark ? "night" : "day"};

  std::uniform_int_distribution<int> count_dist(options.min_signs, options.max_signs);
  std::uniform_int_distribution<int> class_dist(0, options.classes - 1);
  const int count = count_dist(rng);
  std::vector<double> sign_mask(static_cast<std::size_t>(size) * size, 0.0);
  for (int s = 0; s < count; ++s) {
    const int cls = class_dist(rng);
    const auto [shape, color] = synth_class_attributes(cls);
    const double r = 0.5 * (options.min_sign_size + u(rng) * (options.max_sign_size - options.min_sign_size));
    const auto [hx, hy] = half_extent(shape, r);
    Box box;
    bool placed = false;
    double cx = 0;
    double cy = 0;
    for (int attempt = 0; attempt < 30 && !placed; ++attempt) {
      cx = hx + u(rng) * (size - 2 * hx);
      cy = hy + u(rng) * (size - 2 * hy);
      box = {cx - hx, cy - hy, cx + hx, cy + hy};
      placed = std::none_of(scene.record.instances.begin(), scene.record.instances.end(),
                            [&](const SignInstance& other) { return iou(other.box, box) > 0.05; });
    }
    if (!placed) continue;
    const Rgb mark = color == 4 || color == 3 ? Rgb{0.05, 0.05, 0.05} : Rgb{0.95, 0.95, 0.95};
    const auto cov = paint_sign(scene.image, shape, kPalette[color], cx, cy, r, mark);
    for (std::size_t i = 0; i < cov.size(); ++i) sign_mask[i] = std::max(sign_mask[i], cov[i]);
    scene.record.instances.push_back({box, synth_class_name(cls), {}});
  }

  if (options.dark) {
    const double gain = options.illumination_min + u(rng) * (options.illumination_max - options.illumination_min);
    const double reflect = 1.0 + 0.6 * u(rng);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double boost = 1.0 + (reflect - 1.0) * sign_mask[static_cast<std::size_t>(y) * size + x];
        for (int c = 0; c < 3; ++c)
          scene.image.at(y, x, c) = gain * boost * std::pow(scene.image.at(y, x, c), options.night_gamma);
      }
    if (u(rng) < options.glare_probability) {
      const int blobs = 1 + static_cast<int>(u(rng) * 2);
      for (int k = 0; k < blobs; ++k) {
        const double gx = u(rng) * size;
        const double gy = u(rng) * size;
        const double radius = 2.0 + u(rng) * 0.12 * size;
        const double amp = 0.4 + 0.6 * u(rng);
        const Rgb warm{1.0, 0.85, 0.6};
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) {
            const double d2 = (x - gx) * (x - gx) + (y - gy) * (y - gy);
            const double g = amp * std::exp(-d2 / (2 * radius * radius));
            for (int c = 0; c < 3; ++c) scene.image.at(y, x, c) += g * warm[c];
          }
      }
    }
    scene.image.clamp();
  }
  if (u(rng) < options.blur_probability) scene.image = blur_image(scene.image, 0.6 + 0.6 * u(rng));
  if (options.sensor_noise > 0) {
    std::normal_distribution<double> noise(0.0, options.sensor_noise);
    for (auto& v : scene.image.values()) v += noise(rng);
  }
  scene.image.clamp();
  return scene;
}

std::vector<AnnotationRecord> write_synthetic_dataset(const SynthOptions& options, const std::filesystem::path& out_dir) {
  options.validate();
  std::filesystem::create_directories(out_dir / "images");
  std::vector<AnnotationRecord> records;
  for (int i = 0; i < options.images; ++i) {
    auto scene = generate_scene(options, i);
    write_image(scene.image, out_dir / scene.record.image_path);
    records.push_back(std::move(scene.record));
  }
  write_manifest(records, out_dir / "manifest.jsonl");
  ClassList(synth_class_names(options.classes)).save(out_dir / "classes.txt");
  return records;
}

const std::vector<std::pair<std::string, std::int64_t>>& intsd_report_supports() {
  static const std::vector<std::pair<std::string, std::int64_t>> supports{
      {"accident", 102},         {"advertisement", 3836},     {"airport", 3},
      {"blow_horn", 2},          {"bus_stop", 117},           {"cattle", 22},
      {"compulsory_left", 62},   {"compulsory_right", 31},    {"cross_road", 2},
      {"direction", 2777},       {"fuel", 51},                {"gap", 164},
      {"give_way", 59},          {"go_slow", 77},             {"hospital", 46},
      {"left_curve", 527},       {"men_at_work", 50},         {"narrow_road_ahead", 2},
      {"no_entry", 56},          {"no_overtaking", 199},      {"no_parking", 188},
      {"no_stop_no_stand", 148}, {"parking", 21},             {"pedestrian_crossing", 322},
      {"right_curve", 451},      {"round_about", 68},         {"school", 74},
      {"side_road_left", 200},   {"side_road_right", 3},      {"signal", 32},
      {"speed", 814},            {"speed_breaker", 108},      {"steep_ascent", 8},
      {"steep_descent", 33},     {"stop", 71},                {"t_intersection", 19},
      {"tampered", 258},         {"u_turn", 73},              {"unknown", 1400},
      {"warning", 34},           {"wide_road_ahead", 25}};
  return supports;
}

std::vector<AnnotationRecord> intsd_shaped_records(std::uint64_t seed, int images, int instances) {
  if (images < 1 || instances < images) throw ValidationError("need images >= 1 and instances >= images");
  const auto& supports = intsd_report_supports();
  std::int64_t support_total = 0;
  for (const auto& s : supports) support_total += s.second;

  // Largest-remainder apportionment of `instances` across classes.
  std::vector<std::int64_t> totals;
  std::vector<std::pair<double, std::size_t>> remainders;
  std::int64_t assigned = 0;
  for (std::size_t c = 0; c < supports.size(); ++c) {
    const double exact = static_cast<double>(instances) * supports[c].second / support_total;
    totals.push_back(static_cast<std::int64_t>(std::floor(exact)));
    assigned += totals.back();
    remainders.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::int64_t k = 0; k < instances - assigned; ++k) ++totals[remainders[k].second];

  std::mt19937_64 rng(splitmix64(seed ^ 0x17575dULL));
  std::vector<std::string> labels;
  labels.reserve(static_cast<std::size_t>(instances));
  for (std::size_t c = 0; c < supports.size(); ++c)
    for (std::int64_t k = 0; k < totals[c]; ++k) labels.push_back(supports[c].first);
  std::shuffle(labels.begin(), labels.end(), rng);

  // 1 + geometric signs per image, then nudged to the exact total.
  const double mean = static_cast<double>(instances) / images;
  std::geometric_distribution<int> extra(1.0 / mean);
  std::vector<int> per_image(static_cast<std::size_t>(images));
  std::int64_t sum = 0;
  for (auto& k : per_image) sum += (k = 1 + std::min(extra(rng), 24));
  std::uniform_int_distribution<int> pick(0, images - 1);
  while (sum != instances) {
    auto& k = per_image[pick(rng)];
    if (sum > instances && k > 1) {
      --k;
      --sum;
    } else if (sum < instances && k < 25) {
      ++k;
      ++sum;
    }
  }

  constexpr int kWidth = 1920;
  constexpr int kHeight = 1080;
  std::exponential_distribution<double> side_dist(1.0 / 60.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<AnnotationRecord> records;
  records.reserve(static_cast<std::size_t>(images));
  std::size_t next = 0;
  for (int i = 0; i < images; ++i) {
    AnnotationRecord r;
    char id[32];
    std::snprintf(id, sizeof(id), "intsd_%05d", i);
    r.image_id = id;
    r.image_path = std::string("images/") + id + ".jpg";
    r.width = kWidth;
    r.height = kHeight;
    for (int k = 0; k < per_image[i]; ++k) {
      const double side = std::min(600.0, 16.0 + side_dist(rng));
      const double x = u(rng) * (kWidth - side);
      const double y = u(rng) * (kHeight - side);
      r.instances.push_back({{x, y, x + side, y + side}, labels[next++], {}});
    }
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace lensnet
