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

#include "lensnet/enhancement.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "lensnet/errors.hpp"

namespace lensnet {

using nlohmann::json;

void EnhanceConfig::validate() const {
  const char* names[3] = {"gamma", "alpha", "zeta"};
  const auto r = ranges();
  const auto d = defaults.as_array();
  for (int i = 0; i < 3; ++i) {
    if (!(std::isfinite(r[i].min) && std::isfinite(r[i].max) && r[i].min < r[i].max))
      throw ValidationError(std::string("enhance: ") + names[i] + " range must satisfy min < max");
    if (!r[i].contains(d[i])) throw ValidationError(std::string("enhance: default ") + names[i] + " outside its range");
  }
  if (gamma_range.min <= 0) throw ValidationError("enhance: gamma range must be positive");
  if (!(epsilon > 0 && epsilon < 1)) throw ValidationError("enhance: epsilon must lie in (0, 1)");
  if (!(sigma_u > 0)) throw ValidationError("enhance: sigma_u must be positive");
  for (double l : lambdas())
    if (!(l >= 0)) throw ValidationError("enhance: lambda weights must be nonnegative");
  if (downsample_size < 8) throw ValidationError("enhance: downsample_size must be at least 8");
}

void to_json(json& j, const EnhanceParams& p) { j = {{"gamma", p.gamma}, {"alpha", p.alpha}, {"zeta", p.zeta}}; }

void from_json(const json& j, EnhanceParams& p) {
  p.gamma = j.at("gamma").get<double>();
  p.alpha = j.at("alpha").get<double>();
  p.zeta = j.at("zeta").get<double>();
}

void to_json(json& j, const EnhanceConfig& c) {
  j = {{"gamma_range", {c.gamma_range.min, c.gamma_range.max}},
       {"alpha_range", {c.alpha_range.min, c.alpha_range.max}},
       {"zeta_range", {c.zeta_range.min, c.zeta_range.max}},
       {"epsilon", c.epsilon},
       {"sigma_u", c.sigma_u},
       {"lambda_gamma", c.lambda_gamma},
       {"lambda_alpha", c.lambda_alpha},
       {"lambda_zeta", c.lambda_zeta},
       {"defaults", c.defaults},
       {"downsample_size", c.downsample_size}};
}

void from_json(const json& j, EnhanceConfig& c) {
  auto range = [&](const char* key, ParamRange& r) {
    if (!j.contains(key)) return;
    const auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != 2) throw ValidationError(std::string("enhance.") + key + " must be [min, max]");
    r = {v[0], v[1]};
  };
  range("gamma_range", c.gamma_range);
  range("alpha_range", c.alpha_range);
  range("zeta_range", c.zeta_range);
  auto scalar = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  scalar("epsilon", c.epsilon);
  scalar("sigma_u", c.sigma_u);
  scalar("lambda_gamma", c.lambda_gamma);
  scalar("lambda_alpha", c.lambda_alpha);
  scalar("lambda_zeta", c.lambda_zeta);
  scalar("defaults", c.defaults);
  scalar("downsample_size", c.downsample_size);
  c.validate();
}

// ---- heads ----

ConvParamHead::ConvParamHead(const EnhanceConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  c1_ = nn::Conv2d(3, 16, 3, 2, 1, rng);
  c2_ = nn::Conv2d(16, 32, 3, 2, 1, rng);
  c3_ = nn::Conv2d(32, 64, 3, 2, 1, rng);
  fc1_ = nn::Linear(64, 32, rng);
  fc2_ = nn::Linear(32, 3, rng);
  for (auto& w : fc2_.weight.mutable_data()) w *= 0.01;
  constexpr double kSaturatedScore = 2.0;
  const auto d = config.defaults.as_array();
  const auto r = config.ranges();
  auto bias = fc2_.bias.mutable_data();
  for (int i = 0; i < 3; ++i)
    bias[i] = std::clamp(inverse_scale(d[i], r[i]), -kSaturatedScore, kSaturatedScore);
}

ag::Tensor ConvParamHead::forward(const ag::Tensor& x) const {
  auto h = ag::relu(c1_.forward(x));
  h = ag::relu(c2_.forward(h));
  h = ag::relu(c3_.forward(h));
  h = ag::mean_dim(ag::mean_dim(h, 3), 2);
  return fc2_.forward(ag::relu(fc1_.forward(h)));
}

nn::ParameterList ConvParamHead::parameters() const {
  nn::ParameterList p;
  nn::append(p, "c1.", c1_.parameters());
  nn::append(p, "c2.", c2_.parameters());
  nn::append(p, "c3.", c3_.parameters());
  nn::append(p, "fc1.", fc1_.parameters());
  nn::append(p, "fc2.", fc2_.parameters());
  return p;
}

ag::Tensor ConstantParamHead::forward(const ag::Tensor& x) const {
  const auto n = x.dim(0);
  std::vector<double> v;
  for (std::int64_t i = 0; i < n; ++i) v.insert(v.end(), z_.begin(), z_.end());
  return ag::Tensor::from({n, 3}, std::move(v));
}

ag::Tensor FixedParamHead::forward(const ag::Tensor& x) const {
  const auto n = x.dim(0);
  std::vector<double> v;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto p = params_.as_array();
    v.insert(v.end(), p.begin(), p.end());
  }
  return ag::Tensor::from({n, 3}, std::move(v));
}

// ---- parameter prediction ----

ag::Tensor predict_raw_params(const ag::Tensor& images, const ParamHead& head, int downsample_size) {
  if (images.ndim() != 4 || images.dim(1) != 3) throw ValidationError("expected an [N,3,H,W] batch");
  if (images.dim(0) == 0 || images.dim(2) == 0 || images.dim(3) == 0)
    throw ValidationError("image batch has zero extent");
  auto small = ag::resize_bilinear(images, downsample_size, downsample_size);
  auto z = head.forward(small);
  if (z.ndim() != 2 || z.dim(0) != images.dim(0) || z.dim(1) != 3)
    throw ValidationError("parameter head must emit [N,3]");
  return z;
}

std::array<double, 3> predict_raw_params(const ImageTensor& image, const ParamHead& head,
                                         const EnhanceConfig& config) {
  if (image.height() == 0 || image.width() == 0) throw ValidationError("image has zero spatial extent");
  std::vector<ImageTensor> one{image};
  ag::NoGradGuard guard;
  const auto z = predict_raw_params(to_batch(one), head, config.downsample_size);
  return {z.data()[0], z.data()[1], z.data()[2]};
}

EnhanceParams scale_params(const std::array<double, 3>& z_raw, const EnhanceConfig& config) {
  const auto r = config.ranges();
  std::array<double, 3> p{};
  for (int i = 0; i < 3; ++i) {
    if (!std::isfinite(z_raw[i])) throw ValidationError("raw parameter is not finite");
    p[i] = ((std::tanh(z_raw[i]) + 1.0) / 2.0) * (r[i].max - r[i].min) + r[i].min;
    p[i] = std::clamp(p[i], r[i].min, r[i].max);
  }
  return {p[0], p[1], p[2]};
}

ag::Tensor scale_params(const ag::Tensor& z_raw, const EnhanceConfig& config) {
  const auto r = config.ranges();
  auto lo = ag::Tensor::from({3}, {r[0].min, r[1].min, r[2].min});
  auto span = ag::Tensor::from({3}, {r[0].max - r[0].min, r[1].max - r[1].min, r[2].max - r[2].min});
  auto unit = ag::mul_scalar(ag::add_scalar(ag::tanh(z_raw), 1.0), 0.5);
  return ag::add(ag::mul(unit, span), lo);
}

double inverse_scale(double p, const ParamRange& range) {
  const double u = 2.0 * (p - range.min) / (range.max - range.min) - 1.0;
  if (u <= -1.0) return -std::numeric_limits<double>::infinity();
  if (u >= 1.0) return std::numeric_limits<double>::infinity();
  return std::atanh(u);
}

ag::Tensor predict_params(const ag::Tensor& images, const ParamHead& head, const EnhanceConfig& config) {
  if (auto fixed = head.fixed_params()) {
    std::vector<EnhanceParams> batch(static_cast<std::size_t>(images.dim(0)), *fixed);
    return params_to_tensor(batch);
  }
  return scale_params(predict_raw_params(images, head, config.downsample_size), config);
}

std::vector<EnhanceParams> params_from_tensor(const ag::Tensor& params) {
  std::vector<EnhanceParams> out;
  const auto d = params.data();
  for (std::int64_t i = 0; i < params.dim(0); ++i) out.push_back({d[i * 3], d[i * 3 + 1], d[i * 3 + 2]});
  return out;
}

ag::Tensor params_to_tensor(std::span<const EnhanceParams> params) {
  std::vector<double> v;
  for (const auto& p : params) {
    v.push_back(p.gamma);
    v.push_back(p.alpha);
    v.push_back(p.zeta);
  }
  return ag::Tensor::from({static_cast<std::int64_t>(params.size()), 3}, std::move(v));
}

// ---- transforms ----

namespace {

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

// Horizontal pass over one HxW plane: out[y][x] = sum_k w[k] in[y][reflect(x+k-r)].
void pass_x(const double* in, double* out, int h, int w, const std::vector<double>& k, bool adjoint) {
  const int r = static_cast<int>(k.size() / 2);
  for (int y = 0; y < h; ++y) {
    const double* src = in + static_cast<std::size_t>(y) * w;
    double* dst = out + static_cast<std::size_t>(y) * w;
    for (int x = 0; x < w; ++x) {
      for (int t = -r; t <= r; ++t) {
        const int xi = reflect_index(x + t, w);
        if (adjoint)
          dst[xi] += k[t + r] * src[x];
        else
          dst[x] += k[t + r] * src[xi];
      }
    }
  }
}

void pass_y(const double* in, double* out, int h, int w, const std::vector<double>& k, bool adjoint) {
  const int r = static_cast<int>(k.size() / 2);
  for (int y = 0; y < h; ++y) {
    for (int t = -r; t <= r; ++t) {
      const int yi = reflect_index(y + t, h);
      const double wt = k[t + r];
      if (adjoint) {
        const double* src = in + static_cast<std::size_t>(y) * w;
        double* dst = out + static_cast<std::size_t>(yi) * w;
        for (int x = 0; x < w; ++x) dst[x] += wt * src[x];
      } else {
        const double* src = in + static_cast<std::size_t>(yi) * w;
        double* dst = out + static_cast<std::size_t>(y) * w;
        for (int x = 0; x < w; ++x) dst[x] += wt * src[x];
      }
    }
  }
}

ag::Tensor image_to_tensor(const ImageTensor& image) {
  return ag::Tensor::from({1, image.channels(), image.height(), image.width()}, image.to_planar());
}

ImageTensor tensor_to_image(const ag::Tensor& t) { return from_batch(t, 0); }

}  // namespace

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0)) throw ValidationError("blur sigma must be positive");
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double total = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    total += k[i + r];
  }
  for (auto& v : k) v /= total;
  return k;
}

ag::Tensor gaussian_blur(const ag::Tensor& x, double sigma) {
  if (x.ndim() != 4) throw ValidationError("gaussian_blur expects [N,C,H,W]");
  const auto kernel = gaussian_kernel(sigma);
  const int h = static_cast<int>(x.dim(2));
  const int w = static_cast<int>(x.dim(3));
  const std::int64_t planes = x.dim(0) * x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> out(x.data().size(), 0.0);
  std::vector<double> tmp(plane);
  for (std::int64_t p = 0; p < planes; ++p) {
    std::fill(tmp.begin(), tmp.end(), 0.0);
    pass_x(x.data().data() + p * plane, tmp.data(), h, w, kernel, false);
    pass_y(tmp.data(), out.data() + p * plane, h, w, kernel, false);
  }
  return ag::make_result(x.shape(), std::move(out), {x}, [kernel, h, w, planes, plane](ag::Node& self) {
    ag::Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    in.ensure_grad();
    std::vector<double> tmp(plane);
    for (std::int64_t p = 0; p < planes; ++p) {
      std::fill(tmp.begin(), tmp.end(), 0.0);
      pass_y(self.grad.data() + p * plane, tmp.data(), h, w, kernel, true);
      pass_x(tmp.data(), in.grad.data() + p * plane, h, w, kernel, true);
    }
  });
}

namespace {

ag::Tensor per_image(const ag::Tensor& v, std::int64_t n) {
  if (v.numel() == 1) return ag::reshape(v, {1, 1, 1, 1});
  if (v.numel() != n) throw ValidationError("per-image scalar count does not match batch size");
  return ag::reshape(v, {n, 1, 1, 1});
}

}  // namespace

ag::Tensor unsharp(const ag::Tensor& x, const ag::Tensor& zeta, double sigma_u) {
  auto z = per_image(zeta, x.dim(0));
  return ag::add(x, ag::mul(z, ag::sub(x, gaussian_blur(x, sigma_u))));
}

ag::Tensor gamma_brightness(const ag::Tensor& x, const ag::Tensor& gamma, const ag::Tensor& alpha, double epsilon) {
  const auto n = x.dim(0);
  auto g = per_image(gamma, n);
  auto a = per_image(alpha, n);
  for (double v : g.data())
    if (!(v > 0)) throw ValidationError("gamma must be positive");
  return ag::clamp(ag::mul(a, ag::pow(ag::clamp(x, epsilon, 1.0), g)), 0.0, 1.0);
}

ag::Tensor enhance(const ag::Tensor& x, const ag::Tensor& params, const EnhanceConfig& config) {
  if (params.ndim() != 2 || params.dim(1) != 3 || params.dim(0) != x.dim(0))
    throw ValidationError("params must be [N,3] matching the image batch");
  auto gamma = ag::slice(params, 1, 0, 1);
  auto alpha = ag::slice(params, 1, 1, 2);
  auto zeta = ag::slice(params, 1, 2, 3);
  return gamma_brightness(unsharp(x, zeta, config.sigma_u), gamma, alpha, config.epsilon);
}

ImageTensor unsharp(const ImageTensor& image, double zeta, double sigma_u) {
  ag::NoGradGuard guard;
  return tensor_to_image(unsharp(image_to_tensor(image), ag::Tensor::scalar(zeta), sigma_u));
}

ImageTensor gamma_brightness(const ImageTensor& image, double gamma, double alpha, double epsilon) {
  ag::NoGradGuard guard;
  return tensor_to_image(
      gamma_brightness(image_to_tensor(image), ag::Tensor::scalar(gamma), ag::Tensor::scalar(alpha), epsilon));
}

ImageTensor enhance(const ImageTensor& image, const EnhanceParams& params, const EnhanceConfig& config) {
  ag::NoGradGuard guard;
  std::vector<EnhanceParams> one{params};
  return tensor_to_image(enhance(image_to_tensor(image), params_to_tensor(one), config));
}

// ---- regularizer ----

ag::Tensor preproc_loss(const ag::Tensor& params, const EnhanceConfig& config) {
  if (params.ndim() != 2 || params.dim(1) != 3) throw ValidationError("params must be [N,3]");
  if (params.dim(0) == 0) throw ValidationError("preproc_loss of an empty batch");
  const auto d = config.defaults.as_array();
  const auto l = config.lambdas();
  auto defaults = ag::Tensor::from({3}, {d[0], d[1], d[2]});
  auto lambdas = ag::Tensor::from({3}, {l[0], l[1], l[2]});
  auto per_item = ag::sum_dim(ag::mul(ag::square(ag::sub(params, defaults)), lambdas), 1);
  return ag::mean(per_item);
}

double preproc_loss(std::span<const EnhanceParams> params, const EnhanceConfig& config) {
  if (params.empty()) throw ValidationError("preproc_loss of an empty batch");
  const auto d = config.defaults.as_array();
  const auto l = config.lambdas();
  double total = 0.0;
  for (const auto& p : params) {
    const auto v = p.as_array();
    for (int i = 0; i < 3; ++i) total += l[i] * (v[i] - d[i]) * (v[i] - d[i]);
  }
  return total / static_cast<double>(params.size());
}

}  // namespace lensnet
