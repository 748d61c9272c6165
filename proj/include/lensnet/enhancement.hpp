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

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensnet/autograd.hpp"
#include "lensnet/image.hpp"
#include "lensnet/nn.hpp"

namespace lensnet {

struct ParamRange {
  double min = 0.0;
  double max = 1.0;

  double midpoint() const { return 0.5 * (min + max); }
  bool contains(double v) const { return v >= min && v <= max; }
};

/// Per-image enhancement amounts: gamma exponent, brightness gain, unsharp amount.
struct EnhanceParams {
  double gamma = 1.0;
  double alpha = 1.0;
  double zeta = 0.0;

  std::array<double, 3> as_array() const { return {gamma, alpha, zeta}; }
  bool operator==(const EnhanceParams&) const = default;
};

struct EnhanceConfig {
  ParamRange gamma_range{0.3, 3.0};
  ParamRange alpha_range{0.3, 4.0};
  ParamRange zeta_range{0.0, 1.2};
  double epsilon = 1e-4;
  double sigma_u = 1.0;
  double lambda_gamma = 0.001;
  double lambda_alpha = 0.001;
  double lambda_zeta = 0.005;
  EnhanceParams defaults{};
  int downsample_size = 64;

  /// Throws ValidationError when a field is out of its admissible set.
  void validate() const;
  std::array<ParamRange, 3> ranges() const { return {gamma_range, alpha_range, zeta_range}; }
  std::array<double, 3> lambdas() const { return {lambda_gamma, lambda_alpha, lambda_zeta}; }
};

void to_json(nlohmann::json& j, const EnhanceConfig& c);
void from_json(const nlohmann::json& j, EnhanceConfig& c);
void to_json(nlohmann::json& j, const EnhanceParams& p);
void from_json(const nlohmann::json& j, EnhanceParams& p);

/// Maps a downsampled batch [N,3,S,S] to raw scores [N,3].
class ParamHead {
 public:
  virtual ~ParamHead() = default;
  virtual ag::Tensor forward(const ag::Tensor& x) const = 0;
  virtual nn::ParameterList parameters() const = 0;
  virtual std::string identifier() const = 0;
  /// When set, the head bypasses range mapping and emits these scaled parameters for every image.
  virtual std::optional<EnhanceParams> fixed_params() const { return std::nullopt; }
};

/// conv(3->16,s2) -> conv(16->32,s2) -> conv(32->64,s2) -> global mean -> MLP(64->32->3).
class ConvParamHead final : public ParamHead {
 public:
  /// The last layer starts with small weights and a bias placing the output near `config.defaults`.
  ConvParamHead(const EnhanceConfig& config, std::uint64_t seed);

  ag::Tensor forward(const ag::Tensor& x) const override;
  nn::ParameterList parameters() const override;
  std::string identifier() const override { return "conv3-mlp"; }

 private:
  nn::Conv2d c1_;
  nn::Conv2d c2_;
  nn::Conv2d c3_;
  nn::Linear fc1_;
  nn::Linear fc2_;
};

/// Emits the same raw vector for every image. No parameters.
class ConstantParamHead final : public ParamHead {
 public:
  explicit ConstantParamHead(std::array<double, 3> z) : z_(z) {}
  ag::Tensor forward(const ag::Tensor& x) const override;
  nn::ParameterList parameters() const override { return {}; }
  std::string identifier() const override { return "constant"; }

 private:
  std::array<double, 3> z_;
};

/// Emits fixed scaled parameters, bypassing range mapping.
class FixedParamHead final : public ParamHead {
 public:
  explicit FixedParamHead(EnhanceParams params) : params_(params) {}
  ag::Tensor forward(const ag::Tensor& x) const override;
  nn::ParameterList parameters() const override { return {}; }
  std::string identifier() const override { return "fixed"; }
  std::optional<EnhanceParams> fixed_params() const override { return params_; }

 private:
  EnhanceParams params_;
};

/// Bilinear downsample to `downsample_size` then the head. Batch in, [N,3] out.
ag::Tensor predict_raw_params(const ag::Tensor& images, const ParamHead& head, int downsample_size);
std::array<double, 3> predict_raw_params(const ImageTensor& image, const ParamHead& head,
                                         const EnhanceConfig& config);

/// p = ((tanh(z)+1)/2)(max-min)+min per component.
EnhanceParams scale_params(const std::array<double, 3>& z_raw, const EnhanceConfig& config);
ag::Tensor scale_params(const ag::Tensor& z_raw, const EnhanceConfig& config);

/// Raw score mapping to `p` under the range mapping; -inf/+inf at the range ends.
double inverse_scale(double p, const ParamRange& range);

/// Scaled parameters [N,3] for a batch, honouring FixedParamHead.
ag::Tensor predict_params(const ag::Tensor& images, const ParamHead& head, const EnhanceConfig& config);
std::vector<EnhanceParams> params_from_tensor(const ag::Tensor& params);
ag::Tensor params_to_tensor(std::span<const EnhanceParams> params);

/// Separable per-channel Gaussian blur of x[N,C,H,W], half-width ceil(3 sigma), reflect padding.
ag::Tensor gaussian_blur(const ag::Tensor& x, double sigma);
std::vector<double> gaussian_kernel(double sigma);

/// I + zeta (I - G(I)); zeta is [N] or broadcastable to [N,1,1,1]. Not clamped.
ag::Tensor unsharp(const ag::Tensor& x, const ag::Tensor& zeta, double sigma_u);
/// clamp(alpha * clamp(I, eps, 1)^gamma, 0, 1).
ag::Tensor gamma_brightness(const ag::Tensor& x, const ag::Tensor& gamma, const ag::Tensor& alpha, double epsilon);
/// unsharp then gamma_brightness; params is [N,3] ordered (gamma, alpha, zeta).
ag::Tensor enhance(const ag::Tensor& x, const ag::Tensor& params, const EnhanceConfig& config);

ImageTensor unsharp(const ImageTensor& image, double zeta, double sigma_u);
ImageTensor gamma_brightness(const ImageTensor& image, double gamma, double alpha, double epsilon);
ImageTensor enhance(const ImageTensor& image, const EnhanceParams& params, const EnhanceConfig& config);

/// Batch mean of sum_i lambda_i (p_i - default_i)^2. Throws ValidationError on an empty batch.
ag::Tensor preproc_loss(const ag::Tensor& params, const EnhanceConfig& config);
double preproc_loss(std::span<const EnhanceParams> params, const EnhanceConfig& config);

}  // namespace lensnet
