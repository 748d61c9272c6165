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

#include "lensnet/nn.hpp"

#include <cmath>

#include "lensnet/errors.hpp"

namespace lensnet::nn {

void append(ParameterList& into, const std::string& prefix, const ParameterList& from) {
  for (const auto& p : from) into.push_back({prefix + p.name, p.tensor});
}

std::vector<ag::Tensor> tensors(const ParameterList& params) {
  std::vector<ag::Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

void set_trainable(const ParameterList& params, bool trainable) {
  for (auto p : params) p.tensor.set_requires_grad(trainable);
}

Linear::Linear(std::int64_t in, std::int64_t out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = ag::Tensor::uniform({in, out}, -bound, bound, rng, true);
  bias = ag::Tensor::uniform({out}, -bound, bound, rng, true);
}

ag::Tensor Linear::forward(const ag::Tensor& x) const { return ag::add(ag::matmul(x, weight), bias); }

ParameterList Linear::parameters(const std::string& prefix) const {
  return {{prefix + "weight", weight}, {prefix + "bias", bias}};
}

Conv2d::Conv2d(std::int64_t in, std::int64_t out, int kernel, int stride_, int padding_, std::mt19937_64& rng)
    : stride(stride_), padding(padding_) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
  weight = ag::Tensor::uniform({out, in, kernel, kernel}, -bound, bound, rng, true);
  bias = ag::Tensor::uniform({out}, -bound, bound, rng, true);
}

ag::Tensor Conv2d::forward(const ag::Tensor& x) const { return ag::conv2d(x, weight, bias, stride, padding); }

ParameterList Conv2d::parameters(const std::string& prefix) const {
  return {{prefix + "weight", weight}, {prefix + "bias", bias}};
}

LayerNorm::LayerNorm(std::int64_t dim)
    : gamma(ag::Tensor::full({dim}, 1.0, true)), beta(ag::Tensor::zeros({dim}, true)) {}

ag::Tensor LayerNorm::forward(const ag::Tensor& x) const { return ag::layer_norm(x, gamma, beta); }

ParameterList LayerNorm::parameters(const std::string& prefix) const {
  return {{prefix + "gamma", gamma}, {prefix + "beta", beta}};
}

AdamW::AdamW(std::vector<ag::Tensor> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto value = p.mutable_data();
    auto grad = p.mutable_grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g;
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g * g;
      value[i] -= options_.learning_rate * options_.weight_decay * value[i];
      value[i] -= options_.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + options_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

nlohmann::json state_to_json(const ParameterList& params) {
  nlohmann::json state = nlohmann::json::object();
  for (const auto& p : params) {
    state[p.name] = {{"shape", p.tensor.shape()}, {"data", p.tensor.to_vector()}};
  }
  return state;
}

void load_state(const ParameterList& params, const nlohmann::json& state) {
  for (auto p : params) {
    if (!state.contains(p.name)) throw ValidationError("checkpoint is missing tensor '" + p.name + "'");
    const auto& entry = state.at(p.name);
    const auto shape = entry.at("shape").get<ag::Shape>();
    if (shape != p.tensor.shape())
      throw ValidationError("checkpoint tensor '" + p.name + "' has shape " + ag::shape_str(shape) +
                            ", expected " + ag::shape_str(p.tensor.shape()));
    const auto data = entry.at("data").get<std::vector<double>>();
    auto dst = p.tensor.mutable_data();
    if (data.size() != dst.size()) throw ValidationError("checkpoint tensor '" + p.name + "' has wrong size");
    std::copy(data.begin(), data.end(), dst.begin());
  }
}

}  // namespace lensnet::nn
