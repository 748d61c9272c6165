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

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensnet/autograd.hpp"
#include "lensnet/image.hpp"

namespace lensnet {

/// Frozen image/text encoder. Implementations must be deterministic and hold no trainable state.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual int dim() const = 0;
  virtual std::vector<double> image_embed(const ImageTensor& crop) const = 0;
  virtual std::vector<double> text_embed(const std::string& text) const = 0;
  /// Stable name including every setting that affects outputs.
  virtual std::string identifier() const = 0;
  /// Enough to rebuild the provider with make_provider().
  virtual nlohmann::json spec() const = 0;
};

/// Maps an image to a class index, or nullopt for "no class structure".
using CropLabeler = std::function<std::optional<int>(const ImageTensor&)>;

/// Hash-seeded pseudo-random unit directions. With a labeler, adds `class_strength` times a
/// fixed per-class unit direction, making labelled classes linearly separable.
class HashEmbeddingProvider final : public EmbeddingProvider {
 public:
  HashEmbeddingProvider(int dim, std::uint64_t seed, double class_strength = 0.0, CropLabeler labeler = {});

  int dim() const override { return dim_; }
  std::vector<double> image_embed(const ImageTensor& crop) const override;
  std::vector<double> text_embed(const std::string& text) const override;
  std::string identifier() const override;
  nlohmann::json spec() const override;

  std::vector<double> class_direction(int class_index) const;

 private:
  int dim_;
  std::uint64_t seed_;
  double class_strength_;
  CropLabeler labeler_;
};

/// Pixel features: area-average to a grid x grid RGB thumbnail plus per-channel mean and std,
/// standardized and passed through a fixed random projection with a tanh.
class RandomFeatureProvider final : public EmbeddingProvider {
 public:
  RandomFeatureProvider(int dim, std::uint64_t seed, int grid = 8);

  int dim() const override { return dim_; }
  std::vector<double> image_embed(const ImageTensor& crop) const override;
  std::vector<double> text_embed(const std::string& text) const override;
  std::string identifier() const override;
  nlohmann::json spec() const override;

 private:
  int dim_;
  std::uint64_t seed_;
  int grid_;
  std::vector<double> projection_;  // [features, dim]
};

/// {"kind": "hash" | "random_features", "dim": D, "seed": s, ...}. Throws ValidationError.
std::shared_ptr<EmbeddingProvider> make_provider(const nlohmann::json& spec);

/// Returns x / ||x||. Throws ValidationError for a zero or non-finite vector.
std::vector<double> l2_normalize(std::span<const double> x);
/// L2-normalized image embedding.
std::vector<double> embed_crop(const ImageTensor& crop, const EmbeddingProvider& provider);
/// Rows are L2-normalized embeddings, shape [n, D].
ag::Tensor embed_crops(std::span<const ImageTensor> crops, const EmbeddingProvider& provider);

const std::vector<std::string>& default_prompts();

/// Prompt strings and their normalized text embeddings T [n(P), D].
class PromptBank {
 public:
  PromptBank() = default;
  explicit PromptBank(std::vector<std::string> prompts) : prompts_(std::move(prompts)) {}

  /// Embeds every prompt. When a cache directory is given (or LENS_CACHE_DIR is set, which takes
  /// precedence) embeddings are read from / written to a file keyed by provider and prompt text.
  void compute(const EmbeddingProvider& provider, const std::optional<std::filesystem::path>& cache_dir = {});

  const std::vector<std::string>& prompts() const { return prompts_; }
  std::size_t size() const { return prompts_.size(); }
  bool computed() const { return matrix_.defined(); }
  /// Throws std::logic_error before compute().
  const ag::Tensor& matrix() const;
  const std::string& provider_identifier() const { return provider_id_; }
  /// Whether the last compute() was served from the cache.
  bool from_cache() const { return from_cache_; }

 private:
  std::vector<std::string> prompts_ = default_prompts();
  ag::Tensor matrix_;
  std::string provider_id_;
  bool from_cache_ = false;
};

/// Cache directory from LENS_CACHE_DIR, if set and nonempty.
std::optional<std::filesystem::path> env_cache_dir();

}  // namespace lensnet
