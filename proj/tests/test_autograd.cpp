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

#include "gradcheck.hpp"
#include "lensnet/autograd.hpp"
#include "lensnet/nn.hpp"

namespace ag = lensnet::ag;
using lensnet::testing::grad_check;

namespace {

std::mt19937_64 rng(7);

ag::Tensor rnd(ag::Shape s, double lo = -1, double hi = 1) { return ag::Tensor::uniform(std::move(s), lo, hi, rng); }

}  // namespace

TEST(Autograd, BroadcastAddForward) {
  auto a = ag::Tensor::from({2, 1}, {1, 2});
  auto b = ag::Tensor::from({3}, {10, 20, 30});
  auto c = a + b;
  ASSERT_EQ(c.shape(), (ag::Shape{2, 3}));
  EXPECT_EQ(c.to_vector(), (std::vector<double>{11, 21, 31, 12, 22, 32}));
}

TEST(Autograd, ElementwiseGradients) {
  auto r = grad_check(
      [](const auto& in) {
        auto x = in[0];
        auto y = in[1];
        auto z = ag::mul(ag::tanh(x), ag::exp(y)) + ag::div(ag::sigmoid(x), ag::add_scalar(ag::square(y), 1.0)) +
                 ag::gelu(x * y) + ag::log(ag::add_scalar(ag::square(x), 0.5)) + ag::pow_scalar(ag::abs(y), 1.5);
        return ag::sum(z);
      },
      {rnd({3, 4}), rnd({1, 4}, 0.2, 1.0)});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Autograd, ReductionsAndShapes) {
  auto r = grad_check(
      [](const auto& in) {
        auto x = in[0];
        auto p = ag::permute(x, {2, 0, 1});
        auto s = ag::sum_dim(p, 1, true) * ag::mean_dim(p, 2, true);
        auto c = ag::concat({ag::reshape(s, {-1}), ag::slice(ag::reshape(x, {-1}), 0, 2, 7)}, 0);
        auto st = ag::stack({c, ag::square(c)}, 1);
        return ag::mean(st);
      },
      {rnd({2, 3, 4})});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Autograd, MatmulBatchBroadcast) {
  auto r = grad_check([](const auto& in) { return ag::sum(ag::square(ag::matmul(in[0], in[1]))); },
                      {rnd({2, 3, 4}), rnd({4, 5})});
  EXPECT_LT(r.max_rel_error, 1e-6);
  auto a = ag::Tensor::from({1, 2}, {1, 2});
  auto b = ag::Tensor::from({2, 2}, {3, 4, 5, 6});
  EXPECT_EQ(ag::matmul(a, b).to_vector(), (std::vector<double>{13, 16}));
}

TEST(Autograd, SoftmaxLogSoftmaxLayerNorm) {
  auto r = grad_check(
      [](const auto& in) {
        auto w = ag::Tensor::from({5}, {1, -2, 3, 0.5, 2});
        auto s = ag::softmax(in[0]) * w;
        auto l = ag::log_softmax(in[0]);
        auto n = ag::layer_norm(in[0], in[1], in[2]);
        return ag::sum(s) + ag::mean(l) + ag::sum(ag::square(n) * w);
      },
      {rnd({3, 5}), rnd({5}), rnd({5})});
  EXPECT_LT(r.max_rel_error, 1e-5);
  auto sm = ag::softmax(ag::Tensor::from({1, 1}, {3.7}));
  EXPECT_EQ(sm.item(), 1.0);
}

TEST(Autograd, Conv2dMatchesDirectSum) {
  auto x = rnd({1, 2, 5, 5});
  auto w = rnd({3, 2, 3, 3});
  auto b = rnd({3});
  auto y = ag::conv2d(x, w, b, 2, 1);
  ASSERT_EQ(y.shape(), (ag::Shape{1, 3, 3, 3}));
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = b.at({o});
        for (int c = 0; c < 2; ++c)
          for (int ki = 0; ki < 3; ++ki)
            for (int kj = 0; kj < 3; ++kj) {
              const int yy = i * 2 - 1 + ki;
              const int xx = j * 2 - 1 + kj;
              if (yy < 0 || xx < 0 || yy >= 5 || xx >= 5) continue;
              acc += x.at({0, c, yy, xx}) * w.at({o, c, ki, kj});
            }
        EXPECT_NEAR(y.at({0, o, i, j}), acc, 1e-12);
      }
  auto r = grad_check([](const auto& in) { return ag::sum(ag::square(ag::conv2d(in[0], in[1], in[2], 2, 1))); },
                      {rnd({2, 2, 5, 4}), rnd({3, 2, 3, 3}), rnd({3})});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Autograd, ResizeBilinear) {
  auto x = ag::Tensor::from({1, 1, 2, 2}, {0, 1, 2, 3});
  auto same = ag::resize_bilinear(x, 2, 2);
  EXPECT_EQ(same.to_vector(), x.to_vector());
  auto up = ag::resize_bilinear(x, 4, 4);
  EXPECT_NEAR(up.at({0, 0, 0, 0}), 0.0, 1e-12);
  EXPECT_NEAR(up.at({0, 0, 1, 1}), 0.75, 1e-12);
  auto r = grad_check([](const auto& in) { return ag::sum(ag::square(ag::resize_bilinear(in[0], 3, 7))); },
                      {rnd({1, 2, 5, 4})});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Autograd, BceWithLogits) {
  auto l = ag::Tensor::from({2}, {0.0, 100.0});
  auto t = ag::Tensor::from({2}, {1.0, 1.0});
  auto v = ag::bce_with_logits(l, t);
  EXPECT_NEAR(v.at({0}), std::log(2.0), 1e-12);
  EXPECT_NEAR(v.at({1}), 0.0, 1e-12);
  auto targets = ag::Tensor::from({4}, {0, 1, 0.3, 1});
  auto r = grad_check([&](const auto& in) { return ag::sum(ag::bce_with_logits(in[0], targets)); }, {rnd({4}, -3, 3)});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Autograd, ClampAndMinMax) {
  auto x = ag::Tensor::from({4}, {-1, 0.2, 0.7, 3}, true);
  auto y = ag::sum(ag::clamp(x, 0, 1));
  y.backward();
  EXPECT_EQ(x.grad(), (std::vector<double>{0, 1, 1, 0}));
  auto r = grad_check([](const auto& in) { return ag::sum(ag::maximum(in[0], in[1]) + ag::minimum(in[0], in[1]) * 2); },
                      {ag::Tensor::from({3}, {0.1, 0.9, -0.4}), ag::Tensor::from({3}, {0.5, 0.2, -0.1})});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Autograd, NoGradGuardSkipsGraph) {
  auto x = ag::Tensor::from({2}, {1, 2}, true);
  {
    ag::NoGradGuard g;
    auto y = ag::sum(ag::square(x));
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(ag::grad_enabled());
}

TEST(Autograd, GradientAccumulatesOverSharedUse) {
  auto x = ag::Tensor::from({}, {3.0}, true);
  auto y = x * x + x;
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Nn, AdamWSkipsFrozenParameters) {
  std::mt19937_64 g(1);
  lensnet::nn::Linear lin(3, 2, g);
  lin.weight.set_requires_grad(false);
  const auto w0 = lin.weight.to_vector();
  const auto b0 = lin.bias.to_vector();
  lensnet::nn::AdamW opt(lensnet::nn::tensors(lin.parameters()), {});
  auto x = ag::Tensor::from({1, 3}, {1, 2, 3});
  ag::sum(lin.forward(x)).backward();
  opt.step();
  EXPECT_EQ(lin.weight.to_vector(), w0);
  EXPECT_NE(lin.bias.to_vector(), b0);
}

TEST(Nn, StateRoundTrip) {
  std::mt19937_64 g(1);
  lensnet::nn::Linear a(3, 2, g);
  lensnet::nn::Linear b(3, 2, g);
  lensnet::nn::load_state(b.parameters(), lensnet::nn::state_to_json(a.parameters()));
  EXPECT_EQ(a.weight.to_vector(), b.weight.to_vector());
  lensnet::nn::Linear c(2, 2, g);
  EXPECT_THROW(lensnet::nn::load_state(c.parameters(), lensnet::nn::state_to_json(a.parameters())),
               std::invalid_argument);
}
