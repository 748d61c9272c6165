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
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensnet/augmentation.hpp"
#include "lensnet/autograd.hpp"
#include "lensnet/dataset.hpp"
#include "lensnet/embedding.hpp"
#include "lensnet/nn.hpp"

namespace lensnet {

const std::vector<std::string>& default_shape_categories();
const std::vector<std::string>& default_color_categories();

struct FusionConfig {
  int heads = 8;
  /// FFN hidden width as a multiple of D.
  int ffn_multiplier = 4;
  int gcnn_layers = 3;
  /// ReLU between GCNN layers; off keeps the plain linear recurrence.
  bool gcnn_relu = false;
  /// Diagonal of the fully connected 3-node adjacency.
  bool self_loops = true;
  double dropout = 0.2;
  int num_classes = 0;
  std::vector<std::string> shape_categories = default_shape_categories();
  std::vector<std::string> color_categories = default_color_categories();

  /// Throws ValidationError; `dim` must be divisible by `heads`.
  void validate(int dim) const;
  /// 3x3 adjacency before normalization.
  ag::Tensor adjacency() const;
};

void to_json(nlohmann::json& j, const FusionConfig& c);
void from_json(const nlohmann::json& j, FusionConfig& c);

enum class ClassifierVariant { full, no_cross_attention, no_prompts, no_gcnn, no_embedding_tables };
std::string to_string(ClassifierVariant v);
/// Throws ValidationError on unknown names.
ClassifierVariant classifier_variant_from_string(const std::string& name);
const std::vector<ClassifierVariant>& all_classifier_variants();

/// Multi-head attention of queries [B,Lq,D] over keys/values [Bk,Lk,D], Bk in {1, B}.
struct CrossAttention {
  nn::Linear q;
  nn::Linear k;
  nn::Linear v;
  nn::Linear o;
  int heads = 1;

  CrossAttention() = default;
  CrossAttention(int dim, int heads, std::mt19937_64& rng);
  /// Returns [B,Lq,D]; when `weights` is given it receives the attention weights [B,heads,Lq,Lk].
  ag::Tensor forward(const ag::Tensor& query, const ag::Tensor& keys, ag::Tensor* weights = nullptr) const;
  nn::ParameterList parameters(const std::string& prefix = "") const;
};

/// Linear -> GELU -> dropout -> Linear.
struct FeedForward {
  nn::Linear fc1;
  nn::Linear fc2;
  double dropout = 0.0;

  FeedForward() = default;
  FeedForward(int dim, int hidden, double dropout, std::mt19937_64& rng);
  ag::Tensor forward(const ag::Tensor& x, std::mt19937_64& rng, bool training) const;
  nn::ParameterList parameters(const std::string& prefix = "") const;
};

/// FFN(LN(q + Attend(q, kv))). Attend is cross-attention, a linear map of the concatenation
/// [q; vec(kv)] when `concat` is set, or nothing at all when `attend` is false.
struct FusionBlock {
  CrossAttention attention;
  nn::Linear concat_query;
  nn::Linear concat_keys;
  nn::LayerNorm norm;
  FeedForward ffn;
  bool attend = true;
  bool concat = false;

  FusionBlock() = default;
  FusionBlock(int dim, int key_count, const FusionConfig& config, bool attend, bool concat, std::mt19937_64& rng);
  /// query [B,D], keys [Bk,L,D] -> [B,D].
  ag::Tensor forward(const ag::Tensor& query, const ag::Tensor& keys, std::mt19937_64& rng, bool training,
                     ag::Tensor* weights = nullptr) const;
  nn::ParameterList parameters(const std::string& prefix = "") const;
};

/// Shape/color heads and the learnable embedding tables E_S [K_S,D], E_C [K_C,D].
/// Without tables, the heads map straight to D and their output is the node.
struct AttributeTables {
  nn::Linear shape_fc1;
  nn::Linear shape_fc2;
  nn::Linear color_fc1;
  nn::Linear color_fc2;
  ag::Tensor shape_table;
  ag::Tensor color_table;
  bool use_tables = true;

  AttributeTables() = default;
  AttributeTables(int dim, int shape_count, int color_count, bool use_tables, std::mt19937_64& rng);
  /// MLP_S(v), MLP_C(v): [B,K_S] and [B,K_C] logits (or [B,D] projections without tables).
  ag::Tensor shape_logits(const ag::Tensor& v) const;
  ag::Tensor color_logits(const ag::Tensor& v) const;
  nn::ParameterList parameters(const std::string& prefix = "") const;
};

/// Node features H [B,3,D] with rows (global, shape, color), and the blend weights.
struct GraphState {
  ag::Tensor h;
  /// Softmax over shape / color categories, [B,K]; undefined without tables.
  ag::Tensor p_shape;
  ag::Tensor p_color;
  int layer = 0;
};

/// f_CA1 = FFN(LN(v + CA1(v, T))). v [B,D], T [P,D].
ag::Tensor text_image_fusion(const ag::Tensor& v, const ag::Tensor& prompts, const FusionBlock& block,
                             std::mt19937_64& rng, bool training, ag::Tensor* weights = nullptr);
/// n_G = v; n_S = softmax(MLP_S(v)) E_S; n_C = softmax(MLP_C(v)) E_C.
GraphState build_nodes(const ag::Tensor& v, const AttributeTables& tables);
/// D^-1/2 A D^-1/2 for a square nonnegative A. Throws ValidationError on a zero-degree node.
ag::Tensor normalize_adjacency(const ag::Tensor& a);
/// H <- A_hat (H W + b) for each layer, optionally with ReLU between layers. Accepts [3,D] or [B,3,D].
GraphState gcnn_forward(const GraphState& h0, std::span<const nn::Linear> layers, const ag::Tensor& a_hat,
                        bool relu_between = false);
/// f_final = FFN(LN(f_CA1 + CA2(f_CA1, H))).
ag::Tensor final_fusion(const ag::Tensor& f_ca1, const ag::Tensor& h, const FusionBlock& block, std::mt19937_64& rng,
                        bool training, ag::Tensor* weights = nullptr);

struct ClassifierOutput {
  ag::Tensor logits;  // [B,N]
  ag::Tensor f_ca1;
  GraphState nodes;  // H^(0)
  GraphState refined;  // H^(L)
  ag::Tensor f_final;
  ag::Tensor ca1_weights;
  ag::Tensor ca2_weights;
};

class FusionClassifier {
 public:
  FusionClassifier(const FusionConfig& config, int dim, int prompt_count,
                   ClassifierVariant variant = ClassifierVariant::full, std::uint64_t seed = 0);

  /// v [B,D] unit rows; prompts [P,D]. Dropout is active only when `training`.
  ClassifierOutput forward(const ag::Tensor& v, const ag::Tensor& prompts, bool training = false) const;
  nn::ParameterList parameters() const;

  const FusionConfig& config() const { return config_; }
  ClassifierVariant variant() const { return variant_; }
  int dim() const { return dim_; }
  int prompt_count() const { return prompt_count_; }

  const FusionBlock& ca1() const { return ca1_; }
  const FusionBlock& ca2() const { return ca2_; }
  const AttributeTables& tables() const { return tables_; }
  const std::vector<nn::Linear>& gcnn_layers() const { return gcnn_; }
  const ag::Tensor& normalized_adjacency() const { return a_hat_; }

  void reseed_dropout(std::uint64_t seed) const { rng_.seed(seed); }

 private:
  FusionConfig config_;
  ClassifierVariant variant_;
  int dim_;
  int prompt_count_;
  FusionBlock ca1_;
  AttributeTables tables_;
  std::vector<nn::Linear> gcnn_;
  ag::Tensor a_hat_;
  FusionBlock ca2_;
  nn::Linear head_fc1_;
  nn::Linear head_fc2_;
  mutable std::mt19937_64 rng_;
};

FusionClassifier build_ablation_variant(const std::string& name, const FusionConfig& config, int dim,
                                        int prompt_count, std::uint64_t seed = 0);

/// alpha_t = N (count_t^-1/2) / sum_j count_j^-1/2. Throws ValidationError on a count below 1.
std::vector<double> class_alpha_weights(std::span<const std::int64_t> counts);
/// Counts looked up per class name, in ClassList order.
std::vector<double> class_alpha_weights(const ClassCensus& census, const ClassList& classes);

/// Batch mean of -alpha_t (1-p_t)^gamma log p_t with p_t = softmax(logits)[t], floored at 1e-12.
ag::Tensor focal_loss(const ag::Tensor& logits, std::span<const int> targets, std::span<const double> alpha,
                      double gamma);

struct ClassifierTrainOptions {
  int epochs = 50;
  int batch_size = 64;
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  double focal_gamma = 2.0;
  std::uint64_t seed = 0;
  /// Floors class counts at 1 before computing alpha, so classes absent from a fold stay finite.
  bool floor_counts = true;
};

void to_json(nlohmann::json& j, const ClassifierTrainOptions& o);
void from_json(const nlohmann::json& j, ClassifierTrainOptions& o);

/// Unit embedding of training item `index` for a given epoch (so augmentation can vary per epoch).
using EmbeddingSource = std::function<std::vector<double>(std::size_t index, int epoch)>;

struct ClassifierEpoch {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Minibatch AdamW on the focal loss. `targets` are class indices; `class_counts` feed alpha.
std::vector<ClassifierEpoch> train_classifier(FusionClassifier& model, const ag::Tensor& prompts,
                                              const EmbeddingSource& source, std::span<const int> targets,
                                              std::span<const std::int64_t> class_counts,
                                              const ClassifierTrainOptions& options);

/// Source that embeds crops through the provider, with rarity-driven augmentation when `policy` is enabled.
EmbeddingSource crop_embedding_source(std::span<const LabeledCrop> crops, const EmbeddingProvider& provider,
                                      const AugPolicy& policy, const RarityTable& rarity, std::uint64_t seed);

/// Predicted index per row of v [B,D].
std::vector<int> predict_classes(const FusionClassifier& model, const ag::Tensor& v, const ag::Tensor& prompts);

/// Everything needed to classify a crop.
struct ClassifierBundle {
  std::shared_ptr<FusionClassifier> model;
  std::shared_ptr<EmbeddingProvider> provider;
  PromptBank prompts;
  ClassList classes;
};

/// Full pipeline on one crop: embed, fuse, graph, head. Returns N logits.
std::vector<double> classify(const ImageTensor& crop, const ClassifierBundle& bundle);

struct ClassPrediction {
  std::string class_name;
  int class_index = 0;
  double probability = 0.0;
};
ClassPrediction classify_top1(const ImageTensor& crop, const ClassifierBundle& bundle);

/// CBOR container: config, variant, dims, prompt text, provider spec and identifier, class names, weights.
void save_classifier(const ClassifierBundle& bundle, const std::filesystem::path& path);
/// Rebuilds the provider from its spec and recomputes prompt embeddings. Throws ValidationError/IoError.
ClassifierBundle load_classifier(const std::filesystem::path& path);

}  // namespace lensnet
