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

#include "lensnet/augmentation.hpp"
#include "lensnet/errors.hpp"

using namespace lensnet;

namespace {

ImageTensor textured(int h, int w) {
  ImageTensor img(h, w, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = 0.5 + 0.4 * std::sin(0.3 * x + 0.7 * y + c);
  return img;
}

// Inverse affine map as a homogeneous 3x3 product T(c) R(theta) T(-c), sampled with tent weights.
ImageTensor reference_rotation(const ImageTensor& in, double degrees) {
  const double th = degrees * M_PI / 180.0;
  const double cx = 0.5 * (in.width() - 1);
  const double cy = 0.5 * (in.height() - 1);
  const double t1[3][3] = {{1, 0, cx}, {0, 1, cy}, {0, 0, 1}};
  const double r[3][3] = {{std::cos(th), -std::sin(th), 0}, {std::sin(th), std::cos(th), 0}, {0, 0, 1}};
  const double t2[3][3] = {{1, 0, -cx}, {0, 1, -cy}, {0, 0, 1}};
  double tmp[3][3] = {};
  double m[3][3] = {};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) tmp[i][j] += r[i][k] * t2[k][j];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) m[i][j] += t1[i][k] * tmp[k][j];
  ImageTensor out(in.height(), in.width(), in.channels(), 0.0);
  for (int y = 0; y < in.height(); ++y)
    for (int x = 0; x < in.width(); ++x) {
      const double sx = m[0][0] * x + m[0][1] * y + m[0][2];
      const double sy = m[1][0] * x + m[1][1] * y + m[1][2];
      for (int c = 0; c < in.channels(); ++c) {
        double acc = 0.0;
        for (int yy = 0; yy < in.height(); ++yy) {
          const double wy = std::max(0.0, 1.0 - std::abs(sy - yy));
          if (wy == 0.0) continue;
          for (int xx = 0; xx < in.width(); ++xx) {
            const double wx = std::max(0.0, 1.0 - std::abs(sx - xx));
            acc += wx * wy * in.at(yy, xx, c);
          }
        }
        out.at(y, x, c) = acc;
      }
    }
  return out;
}

}  // namespace

TEST(Rarity, Endpoints) {
  EXPECT_EQ(rarity(4204, 4204), 0.0);
  EXPECT_EQ(rarity(0, 4204), 1.0);
  EXPECT_THROW(rarity(0, 0), ValidationError);
  EXPECT_THROW(rarity(5, 4), ValidationError);
}

TEST(Rarity, RareClassFixture) {
  const double expected = 1.0 - std::log(23.0) / std::log(4205.0);
  EXPECT_NEAR(rarity(22, 4204), expected, 1e-15);
  EXPECT_NEAR(rarity(22, 4204), 0.62, 0.005);
}

TEST(Rarity, Monotone) {
  for (int a = 0; a < 500; ++a) EXPECT_GE(rarity(a, 500), rarity(a + 1 > 500 ? 500 : a + 1, 500));
}

TEST(ClassAugProb, Cases) {
  EXPECT_NEAR(class_aug_prob(0.62), 0.615, 1e-12);
  EXPECT_NEAR(class_aug_prob(0.0), 0.15, 1e-15);
  EXPECT_NEAR(class_aug_prob(1.0), 0.90, 1e-15);
}

TEST(AppliedAugProb, Cases) {
  EXPECT_NEAR(applied_aug_prob(0.61, 0.9), 0.549, 1e-12);
  EXPECT_EQ(applied_aug_prob(0.15, 0.3), 0.05);
  EXPECT_EQ(applied_aug_prob(0.95, 1.0), 0.95);
}

TEST(AppliedAugProb, AlwaysWithinClampBounds) {
  AugPolicy policy;
  for (int n = 0; n <= 100; ++n) {
    const double pc = class_aug_prob(rarity(n, 100));
    for (auto f : kAugFamilies) {
      const double p = family_probability(f, pc, policy);
      EXPECT_GE(p, 0.05);
      EXPECT_LE(p, 0.95);
    }
  }
}

TEST(Augment, AllForcedOffIsIdentity) {
  const auto img = textured(20, 24);
  RarityTable table;
  EXPECT_EQ(apply_augmentations(img, "x", AugPolicy::disabled(), table, 99), img);
}

TEST(Augment, ForcedRotationMatchesReference) {
  const auto img = textured(17, 23);
  auto policy = AugPolicy::disabled();
  policy.probability_override[AugFamily::rotation] = 1.0;
  policy.fixed_rotation_deg = 5.0;
  RarityTable table;
  const auto out = apply_augmentations(img, "x", policy, table, 3);
  const auto ref = reference_rotation(img, 5.0);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.values()[i], ref.values()[i], 1e-12);
  EXPECT_EQ(rotate_image(img, 45.0).at(0, 0, 0), 0.0);
}

TEST(Augment, Deterministic) {
  const auto img = textured(32, 32);
  AugPolicy policy;
  ClassCensus c;
  c.counts = {{"a", 3}, {"b", 100}};
  c.count_max = 100;
  RarityTable table(c, policy);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto a = apply_augmentations(img, "a", policy, table, s);
    const auto b = apply_augmentations(img, "a", policy, table, s);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.height(), 32);
    EXPECT_GE(a.min_value(), 0.0);
    EXPECT_LE(a.max_value(), 1.0);
  }
}

TEST(Augment, EmpiricalFrequency) {
  AugPolicy policy;
  for (double pc : {0.15, 0.615, 0.9}) {
    std::map<AugFamily, int> hits;
    constexpr int kTrials = 100000;
    for (int i = 0; i < kTrials; ++i)
      for (auto f : sample_augmentations(pc, policy, item_seed(17, "img", i)).applied) ++hits[f];
    for (auto f : kAugFamilies) {
      const double expected = applied_aug_prob(pc, policy.weight(f));
      EXPECT_NEAR(hits[f] / static_cast<double>(kTrials), expected, 0.01) << to_string(f) << " p_class=" << pc;
    }
  }
}

TEST(Augment, DisabledPolicy) {
  AugPolicy policy;
  policy.enabled = false;
  for (int s = 0; s < 50; ++s) EXPECT_TRUE(sample_augmentations(0.9, policy, s).applied.empty());
}

TEST(Augment, SceneRotationMovesBoxes) {
  const auto img = textured(40, 40);
  auto policy = AugPolicy::disabled();
  policy.probability_override[AugFamily::rotation] = 1.0;
  policy.fixed_rotation_deg = 90.0;
  const auto r = apply_scene_augmentations(img, {{0, 0, 10, 20}}, policy, 1);
  ASSERT_EQ(r.boxes.size(), 1u);
  EXPECT_NEAR(r.boxes[0].x_min, 0.0, 1e-9);
  EXPECT_NEAR(r.boxes[0].x_max, 20.0, 1e-9);
  EXPECT_NEAR(r.boxes[0].y_min, 30.0, 1e-9);
  EXPECT_NEAR(r.boxes[0].y_max, 40.0, 1e-9);
  policy.fixed_rotation_deg = 0.0;
  const auto same = apply_scene_augmentations(img, {{3, 4, 10, 20}}, policy, 1);
  EXPECT_EQ(same.boxes[0], (Box{3, 4, 10, 20}));
  EXPECT_EQ(same.image, img);
}

TEST(Augment, FamiliesPreserveShapeAndRange) {
  const auto img = textured(24, 30);
  for (const auto& out : {photometric_jitter(img, 1.3, 0.7, 1.3), jpeg_roundtrip(img, 30),
                          gaussian_noise(img, 0.05, 4), blur_image(img, 2.0)}) {
    EXPECT_EQ(out.height(), 24);
    EXPECT_EQ(out.width(), 30);
    EXPECT_GE(out.min_value(), 0.0);
    EXPECT_LE(out.max_value(), 1.0);
  }
  EXPECT_EQ(photometric_jitter(img, 1, 1, 1).values().size(), img.size());
  ImageTensor smooth(24, 30, 3);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 30; ++x)
      for (int c = 0; c < 3; ++c) smooth.at(y, x, c) = 0.2 + 0.02 * x + 0.01 * y;
  const auto j = jpeg_roundtrip(smooth, 90);
  double err = 0;
  for (std::size_t i = 0; i < smooth.size(); ++i) err += std::abs(j.values()[i] - smooth.values()[i]);
  EXPECT_LT(err / smooth.size(), 0.01);
}

TEST(Augment, ItemSeedsDiffer) {
  EXPECT_NE(item_seed(1, "a"), item_seed(1, "b"));
  EXPECT_NE(item_seed(1, "a", 0), item_seed(1, "a", 1));
  EXPECT_EQ(item_seed(5, "q", 2), item_seed(5, "q", 2));
}

TEST(AugPolicyTest, JsonRoundTrip) {
  AugPolicy p;
  p.p_base = 0.2;
  p.ranges.jpeg_quality_min = 40;
  nlohmann::json j = p;
  const auto back = j.get<AugPolicy>();
  EXPECT_EQ(nlohmann::json(back).dump(), j.dump());
  j["type_weights"]["blur"] = 0.0;
  EXPECT_THROW(j.get<AugPolicy>(), ValidationError);
}

TEST(RarityTableTest, FromCensus) {
  ClassCensus c;
  c.counts = {{"common", 4204}, {"rare", 22}};
  c.count_max = 4204;
  RarityTable t(c, {});
  EXPECT_EQ(t.rarity("common"), 0.0);
  EXPECT_NEAR(t.p_class("common"), 0.15, 1e-15);
  EXPECT_NEAR(t.p_class("rare"), 0.15 + 0.75 * rarity(22, 4204), 1e-15);
  EXPECT_EQ(t.rarity("unseen"), 1.0);
}
