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

#include "lensnet/embedding.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <stdexcept>

#include "lensnet/errors.hpp"
#include "lensnet/hash.hpp"

namespace lensnet {
namespace {

std::vector<double> random_unit(int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (auto& x : v) x = normal(rng);
  return l2_normalize(v);
}

std::string hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void check_dim(int dim) {
  if (dim < 1) throw ValidationError("embedding dimension must be positive");
}

}  // namespace

std::vector<double> l2_normalize(std::span<const double> x) {
  double sq = 0.0;
  for (double v : x) sq += v * v;
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0) || !std::isfinite(norm)) throw ValidationError("cannot normalize a zero or non-finite vector");
  std::vector<double> out(x.begin(), x.end());
  for (auto& v : out) v /= norm;
  return out;
}

HashEmbeddingProvider::HashEmbeddingProvider(int dim, std::uint64_t seed, double class_strength, CropLabeler labeler)
    : dim_(dim), seed_(seed), class_strength_(class_strength), labeler_(std::move(labeler)) {
  check_dim(dim);
  if (class_strength < 0) throw ValidationError("class_strength must be nonnegative");
}

std::vector<double> HashEmbeddingProvider::class_direction(int class_index) const {
  return random_unit(dim_, splitmix64(seed_ ^ fnv1a("class:" + std::to_string(class_index))));
}

std::vector<double> HashEmbeddingProvider::image_embed(const ImageTensor& crop) const {
  auto v = random_unit(dim_, splitmix64(seed_ ^ splitmix64(content_hash(crop))));
  if (labeler_ && class_strength_ > 0) {
    if (auto label = labeler_(crop)) {
      const auto c = class_direction(*label);
      for (int i = 0; i < dim_; ++i) v[i] += class_strength_ * c[i];
    }
  }
  return v;
}

std::vector<double> HashEmbeddingProvider::text_embed(const std::string& text) const {
  return random_unit(dim_, splitmix64(seed_ ^ fnv1a("text:" + text)));
}

std::string HashEmbeddingProvider::identifier() const {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "hash(dim=%d,seed=%llu,class_strength=%g,labeled=%d)", dim_,
                static_cast<unsigned long long>(seed_), class_strength_, labeler_ ? 1 : 0);
  return buf;
}

nlohmann::json HashEmbeddingProvider::spec() const {
  return {{"kind", "hash"}, {"dim", dim_}, {"seed", seed_}};
}

RandomFeatureProvider::RandomFeatureProvider(int dim, std::uint64_t seed, int grid)
    : dim_(dim), seed_(seed), grid_(grid) {
  check_dim(dim);
  if (grid < 1) throw ValidationError("feature grid must be positive");
  const std::size_t features = static_cast<std::size_t>(grid) * grid * 3 + 6;
  std::mt19937_64 rng(splitmix64(seed ^ 0x5eedULL));
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(features)));
  projection_.resize(features * static_cast<std::size_t>(dim));
  for (auto& w : projection_) w = normal(rng);
}

std::vector<double> RandomFeatureProvider::image_embed(const ImageTensor& crop) const {
  if (crop.empty()) throw ValidationError("cannot embed an empty crop");
  const int h = crop.height();
  const int w = crop.width();
  const int channels = crop.channels();
  std::vector<double> f;
  f.reserve(static_cast<std::size_t>(grid_) * grid_ * 3 + 6);
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> sq{0, 0, 0};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = crop.at(y, x, channels == 3 ? c : 0);
        mean[c] += v;
        sq[c] += v * v;
      }
  const double n = static_cast<double>(h) * w;
  for (int gy = 0; gy < grid_; ++gy) {
    const int y0 = std::min(h - 1, gy * h / grid_);
    const int y1 = std::max(y0 + 1, (gy + 1) * h / grid_);
    for (int gx = 0; gx < grid_; ++gx) {
      const int x0 = std::min(w - 1, gx * w / grid_);
      const int x1 = std::max(x0 + 1, (gx + 1) * w / grid_);
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) s += crop.at(y, x, channels == 3 ? c : 0);
        f.push_back(s / ((y1 - y0) * (x1 - x0)) - mean[c] / n);
      }
    }
  }
  for (int c = 0; c < 3; ++c) {
    const double m = mean[c] / n;
    f.push_back(2.0 * m - 1.0);
    f.push_back(2.0 * std::sqrt(std::max(0.0, sq[c] / n - m * m)));
  }
  for (auto& v : f) v *= 4.0;
  std::vector<double> out(static_cast<std::size_t>(dim_), 0.0);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double* row = projection_.data() + i * dim_;
    for (int j = 0; j < dim_; ++j) out[j] += f[i] * row[j];
  }
  for (auto& v : out) v = std::tanh(v);
  return out;
}

std::vector<double> RandomFeatureProvider::text_embed(const std::string& text) const {
  return random_unit(dim_, splitmix64(seed_ ^ fnv1a("text:" + text)));
}

std::string RandomFeatureProvider::identifier() const {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "random_features(dim=%d,seed=%llu,grid=%d)", dim_,
                static_cast<unsigned long long>(seed_), grid_);
  return buf;
}

nlohmann::json RandomFeatureProvider::spec() const {
  return {{"kind", "random_features"}, {"dim", dim_}, {"seed", seed_}, {"grid", grid_}};
}

std::shared_ptr<EmbeddingProvider> make_provider(const nlohmann::json& spec) {
  try {
    const std::string kind = spec.at("kind").get<std::string>();
    const int dim = spec.at("dim").get<int>();
    const auto seed = spec.value("seed", std::uint64_t{0});
    if (kind == "hash") return std::make_shared<HashEmbeddingProvider>(dim, seed);
    if (kind == "random_features")
      return std::make_shared<RandomFeatureProvider>(dim, seed, spec.value("grid", 8));
    throw ValidationError("unknown embedding provider kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad provider spec: ") + e.what());
  }
}

std::vector<double> embed_crop(const ImageTensor& crop, const EmbeddingProvider& provider) {
  const auto raw = provider.image_embed(crop);
  if (static_cast<int>(raw.size()) != provider.dim())
    throw std::runtime_error("provider returned " + std::to_string(raw.size()) + " values, expected " +
                             std::to_string(provider.dim()));
  return l2_normalize(raw);
}

ag::Tensor embed_crops(std::span<const ImageTensor> crops, const EmbeddingProvider& provider) {
  std::vector<double> values;
  values.reserve(crops.size() * static_cast<std::size_t>(provider.dim()));
  for (const auto& c : crops) {
    const auto v = embed_crop(c, provider);
    values.insert(values.end(), v.begin(), v.end());
  }
  return ag::Tensor::from({static_cast<std::int64_t>(crops.size()), provider.dim()}, std::move(values));
}

const std::vector<std::string>& default_prompts() {
  static const std::vector<std::string> prompts{
      "Describe the traffic sign in detail, including any visible text or numbers.",
      "What is the color and geometric shape of the sign and what does it convey (warning, mandatory, "
      "prohibition, information)?",
      "Is there an icon or pictogram? Describe the icon (car, truck, pedestrian, arrow, fuel pump, etc.).",
      "Extract any text, numbers or symbols from the sign and list them.",
      "Is this sign an advertisement, a regulatory sign, a warning sign, or an informational sign? If none "
      "apply or the image is unreadable/occluded, reply 'unclassifiable'. Keep your answer one word."};
  return prompts;
}

std::optional<std::filesystem::path> env_cache_dir() {
  const char* v = std::getenv("LENS_CACHE_DIR");
  if (v == nullptr || *v == '\0') return std::nullopt;
  return std::filesystem::path(v);
}

void PromptBank::compute(const EmbeddingProvider& provider, const std::optional<std::filesystem::path>& cache_dir) {
  if (prompts_.empty()) throw ValidationError("prompt bank is empty");
  const int dim = provider.dim();
  const auto dir = env_cache_dir() ? env_cache_dir() : cache_dir;

  std::string key = provider.identifier();
  for (const auto& p : prompts_) key += '\n' + p;
  std::filesystem::path file;
  if (dir) file = *dir / ("prompts-" + hex(fnv1a(key)) + ".json");

  from_cache_ = false;
  std::vector<double> values;
  if (dir && std::filesystem::exists(file)) {
    try {
      std::ifstream in(file);
      const auto j = nlohmann::json::parse(in);
      if (j.at("provider") == provider.identifier() && j.at("prompts") == prompts_ && j.at("dim") == dim) {
        values = j.at("rows").get<std::vector<double>>();
        if (values.size() == prompts_.size() * static_cast<std::size_t>(dim)) from_cache_ = true;
      }
    } catch (const nlohmann::json::exception&) {
      from_cache_ = false;
    }
  }
  if (!from_cache_) {
    values.clear();
    for (const auto& p : prompts_) {
      const auto raw = provider.text_embed(p);
      if (static_cast<int>(raw.size()) != dim) throw std::runtime_error("provider text embedding has wrong size");
      const auto v = l2_normalize(raw);
      values.insert(values.end(), v.begin(), v.end());
    }
    if (dir) {
      std::filesystem::create_directories(*dir);
      const auto tmp = file.string() + ".tmp";
      {
        std::ofstream out(tmp);
        if (!out) throw IoError("cannot write prompt cache " + tmp);
        out << nlohmann::json{{"provider", provider.identifier()}, {"prompts", prompts_}, {"dim", dim},
                              {"rows", values}}
                   .dump();
      }
      std::filesystem::rename(tmp, file);
    }
  }
  matrix_ = ag::Tensor::from({static_cast<std::int64_t>(prompts_.size()), dim}, std::move(values));
  provider_id_ = provider.identifier();
}

const ag::Tensor& PromptBank::matrix() const {
  if (!matrix_.defined()) throw std::logic_error("PromptBank::compute() has not been called");
  return matrix_;
}

}  // namespace lensnet
