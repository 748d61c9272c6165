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

#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensnet/autograd.hpp"

namespace lensnet::nn {

struct NamedParameter {
  std::string name;
  ag::Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

void append(ParameterList& into, const std::string& prefix, const ParameterList& from);
std::vector<ag::Tensor> tensors(const ParameterList& params);
void set_trainable(const ParameterList& params, bool trainable);

/// y = x W + b with W stored [in, out]; acts on the last dimension.
struct Linear {
  ag::Tensor weight;
  ag::Tensor bias;

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, std::mt19937_64& rng);
  ag::Tensor forward(const ag::Tensor& x) const;
  ParameterList parameters(const std::string& prefix = "") const;
};

struct Conv2d {
  ag::Tensor weight;  // [out, in, k, k]
  ag::Tensor bias;
  int stride = 1;
  int padding = 0;

  Conv2d() = default;
  Conv2d(std::int64_t in, std::int64_t out, int kernel, int stride, int padding, std::mt19937_64& rng);
  ag::Tensor forward(const ag::Tensor& x) const;
  ParameterList parameters(const std::string& prefix = "") const;
};

struct LayerNorm {
  ag::Tensor gamma;
  ag::Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::int64_t dim);
  ag::Tensor forward(const ag::Tensor& x) const;
  ParameterList parameters(const std::string& prefix = "") const;
};

struct AdamWOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Decoupled weight decay Adam. Parameters whose requires_grad is false are skipped entirely.
class AdamW {
 public:
  AdamW(std::vector<ag::Tensor> params, AdamWOptions options);
  void step();
  void zero_grad();
  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  const AdamWOptions& options() const { return options_; }

 private:
  std::vector<ag::Tensor> params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long step_ = 0;
};

/// Tensors keyed by name, for checkpoints. Shapes are stored alongside values.
nlohmann::json state_to_json(const ParameterList& params);
/// Copies values into existing tensors; throws ValidationError on missing names or shape mismatch.
void load_state(const ParameterList& params, const nlohmann::json& state);

}  // namespace lensnet::nn
