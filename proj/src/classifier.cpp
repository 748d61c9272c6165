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

#include "lensnet/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "lensnet/errors.hpp"
#include "lensnet/hash.hpp"

namespace lensnet {

using json = nlohmann::json;

const std::vector<std::string>& default_shape_categories() {
  static const std::vector<std::string> names{"circle", "rectangle", "octagon", "triangle"};
  return names;
}

const std::vector<std::string>& default_color_categories() {
  static const std::vector<std::string> names{"red", "blue", "green", "yellow", "white", "black", "other"};
  return names;
}

// ---- config ----

void FusionConfig::validate(int dim) const {
  if (heads < 1) throw ValidationError("classifier.heads must be >= 1");
  if (ffn_multiplier < 1) throw ValidationError("classifier.ffn_multiplier must be >= 1");
  if (gcnn_layers < 0) throw ValidationError("classifier.gcnn_layers must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("classifier.dropout must be in [0, 1)");
  if (num_classes < 0) throw ValidationError("classifier.num_classes must be >= 0");
  if (shape_categories.empty() || color_categories.empty())
    throw ValidationError("classifier shape and color categories must be nonempty");
  if (dim > 0 && dim % heads != 0)
    throw ValidationError("embedding dimension " + std::to_string(dim) + " is not divisible by " +
                          std::to_string(heads) + " heads");
}

ag::Tensor FusionConfig::adjacency() const {
  std::vector<double> a(9, 1.0);
  if (!self_loops) a[0] = a[4] = a[8] = 0.0;
  return ag::Tensor::from({3, 3}, std::move(a));
}

void to_json(json& j, const FusionConfig& c) {
  j = {{"heads", c.heads},
       {"ffn_multiplier", c.ffn_multiplier},
       {"gcnn_layers", c.gcnn_layers},
       {"gcnn_relu", c.gcnn_relu},
       {"self_loops", c.self_loops},
       {"dropout", c.dropout},
       {"num_classes", c.num_classes},
       {"shape_categories", c.shape_categories},
       {"color_categories", c.color_categories}};
}

void from_json(const json& j, FusionConfig& c) {
  auto field = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  field("heads", c.heads);
  field("ffn_multiplier", c.ffn_multiplier);
  field("gcnn_layers", c.gcnn_layers);
  field("gcnn_relu", c.gcnn_relu);
  field("self_loops", c.self_loops);
  field("dropout", c.dropout);
  field("num_classes", c.num_classes);
  field("shape_categories", c.shape_categories);
  field("color_categories", c.color_categories);
  c.validate(0);
}

std::string to_string(ClassifierVariant v) {
  switch (v) {
    case ClassifierVariant::full: return "full";
    case ClassifierVariant::no_cross_attention: return "no_cross_attention";
    case ClassifierVariant::no_prompts: return "no_prompts";
    case ClassifierVariant::no_gcnn: return "no_gcnn";
    case ClassifierVariant::no_embedding_tables: return "no_embedding_tables";
  }
  return "full";
}

const std::vector<ClassifierVariant>& all_classifier_variants() {
  static const std::vector<ClassifierVariant> all{ClassifierVariant::full, ClassifierVariant::no_cross_attention,
                                                  ClassifierVariant::no_prompts, ClassifierVariant::no_gcnn,
                                                  ClassifierVariant::no_embedding_tables};
  return all;
}

ClassifierVariant classifier_variant_from_string(const std::string& name) {
  for (auto v : all_classifier_variants())
    if (to_string(v) == name) return v;
  throw ValidationError("unknown classifier variant '" + name +
                        "' (expected full, no_cross_attention, no_prompts, no_gcnn, no_embedding_tables)");
}

// ---- modules ----

CrossAttention::CrossAttention(int dim, int heads_, std::mt19937_64& rng)
    : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng), heads(heads_) {}

ag::Tensor CrossAttention::forward(const ag::Tensor& query, const ag::Tensor& keys, ag::Tensor* weights) const {
  if (query.ndim() != 3 || keys.ndim() != 3) throw ValidationError("attention expects rank-3 query and keys");
  const auto b = query.dim(0);
  const auto lq = query.dim(1);
  const auto d = query.dim(2);
  const auto bk = keys.dim(0);
  const auto lk = keys.dim(1);
  if (keys.dim(2) != d)
    throw ValidationError("attention key width " + std::to_string(keys.dim(2)) + " differs from query width " +
                          std::to_string(d));
  if (bk != 1 && bk != b) throw ValidationError("attention key batch must be 1 or match the query batch");
  if (lk < 1) throw ValidationError("attention needs at least one key");
  const std::int64_t dh = d / heads;

  auto qh = ag::permute(ag::reshape(q.forward(query), {b, lq, heads, dh}), {0, 2, 1, 3});
  auto kh = ag::permute(ag::reshape(k.forward(keys), {bk, lk, heads, dh}), {0, 2, 3, 1});
  auto vh = ag::permute(ag::reshape(v.forward(keys), {bk, lk, heads, dh}), {0, 2, 1, 3});
  auto w = ag::softmax(ag::mul_scalar(ag::matmul(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh))));
  if (weights) *weights = w;
  auto out = ag::reshape(ag::permute(ag::matmul(w, vh), {0, 2, 1, 3}), {b, lq, d});
  return o.forward(out);
}

nn::ParameterList CrossAttention::parameters(const std::string& prefix) const {
  nn::ParameterList out;
  nn::append(out, prefix + "q.", q.parameters());
  nn::append(out, prefix + "k.", k.parameters());
  nn::append(out, prefix + "v.", v.parameters());
  nn::append(out, prefix + "o.", o.parameters());
  return out;
}

FeedForward::FeedForward(int dim, int hidden, double dropout_, std::mt19937_64& rng)
    : fc1(dim, hidden, rng), fc2(hidden, dim, rng), dropout(dropout_) {}

ag::Tensor FeedForward::forward(const ag::Tensor& x, std::mt19937_64& rng, bool training) const {
  return fc2.forward(ag::dropout(ag::gelu(fc1.forward(x)), dropout, rng, training));
}

nn::ParameterList FeedForward::parameters(const std::string& prefix) const {
  nn::ParameterList out;
  nn::append(out, prefix + "fc1.", fc1.parameters());
  nn::append(out, prefix + "fc2.", fc2.parameters());
  return out;
}

FusionBlock::FusionBlock(int dim, int key_count, const FusionConfig& config, bool attend_, bool concat_,
                         std::mt19937_64& rng)
    : norm(dim), ffn(dim, dim * config.ffn_multiplier, config.dropout, rng), attend(attend_), concat(concat_) {
  if (attend && concat) {
    concat_query = nn::Linear(dim, dim, rng);
    concat_keys = nn::Linear(static_cast<std::int64_t>(key_count) * dim, dim, rng);
  } else if (attend) {
    attention = CrossAttention(dim, config.heads, rng);
  }
}

ag::Tensor FusionBlock::forward(const ag::Tensor& query, const ag::Tensor& keys, std::mt19937_64& rng,
                                bool training, ag::Tensor* weights) const {
  const auto b = query.dim(0);
  const auto d = query.dim(1);
  ag::Tensor x = query;
  if (attend && concat) {
    const auto flat = ag::reshape(keys, {keys.dim(0), keys.dim(1) * keys.dim(2)});
    if (flat.dim(1) != concat_keys.weight.dim(0))
      throw ValidationError("concatenation block built for " + std::to_string(concat_keys.weight.dim(0) / d) +
                            " keys, got " + std::to_string(keys.dim(1)));
    x = ag::add(query, ag::add(concat_query.forward(query), concat_keys.forward(flat)));
  } else if (attend) {
    const auto a = attention.forward(ag::reshape(query, {b, 1, d}), keys, weights);
    x = ag::add(query, ag::reshape(a, {b, d}));
  }
  return ffn.forward(norm.forward(x), rng, training);
}

nn::ParameterList FusionBlock::parameters(const std::string& prefix) const {
  nn::ParameterList out;
  if (attend && concat) {
    nn::append(out, prefix + "concat_query.", concat_query.parameters());
    nn::append(out, prefix + "concat_keys.", concat_keys.parameters());
  } else if (attend) {
    nn::append(out, prefix + "attention.", attention.parameters());
  }
  nn::append(out, prefix + "norm.", norm.parameters());
  nn::append(out, prefix + "ffn.", ffn.parameters());
  return out;
}

AttributeTables::AttributeTables(int dim, int shape_count, int color_count, bool use_tables_, std::mt19937_64& rng)
    : shape_fc1(dim, dim, rng),
      shape_fc2(dim, use_tables_ ? shape_count : dim, rng),
      color_fc1(dim, dim, rng),
      color_fc2(dim, use_tables_ ? color_count : dim, rng),
      use_tables(use_tables_) {
  if (use_tables) {
    const double stddev = 1.0 / std::sqrt(static_cast<double>(dim));
    shape_table = ag::Tensor::randn({shape_count, dim}, stddev, rng, true);
    color_table = ag::Tensor::randn({color_count, dim}, stddev, rng, true);
  }
}

ag::Tensor AttributeTables::shape_logits(const ag::Tensor& v) const {
  return shape_fc2.forward(ag::gelu(shape_fc1.forward(v)));
}

ag::Tensor AttributeTables::color_logits(const ag::Tensor& v) const {
  return color_fc2.forward(ag::gelu(color_fc1.forward(v)));
}

nn::ParameterList AttributeTables::parameters(const std::string& prefix) const {
  nn::ParameterList out;
  nn::append(out, prefix + "mlp_s.fc1.", shape_fc1.parameters());
  nn::append(out, prefix + "mlp_s.fc2.", shape_fc2.parameters());
  nn::append(out, prefix + "mlp_c.fc1.", color_fc1.parameters());
  nn::append(out, prefix + "mlp_c.fc2.", color_fc2.parameters());
  if (use_tables) {
    out.push_back({prefix + "e_s", shape_table});
    out.push_back({prefix + "e_c", color_table});
  }
  return out;
}

// ---- pipeline pieces ----

ag::Tensor text_image_fusion(const ag::Tensor& v, const ag::Tensor& prompts, const FusionBlock& block,
                             std::mt19937_64& rng, bool training, ag::Tensor* weights) {
  if (v.ndim() != 2 || prompts.ndim() != 2) throw ValidationError("text_image_fusion expects v [B,D] and T [P,D]");
  if (prompts.dim(0) < 1) throw ValidationError("prompt matrix is empty");
  if (prompts.dim(1) != v.dim(1))
    throw ValidationError("prompt width " + std::to_string(prompts.dim(1)) + " differs from image width " +
                          std::to_string(v.dim(1)));
  return block.forward(v, ag::reshape(prompts, {1, prompts.dim(0), prompts.dim(1)}), rng, training, weights);
}

GraphState build_nodes(const ag::Tensor& v, const AttributeTables& tables) {
  GraphState s;
  ag::Tensor n_s;
  ag::Tensor n_c;
  if (tables.use_tables) {
    s.p_shape = ag::softmax(tables.shape_logits(v));
    s.p_color = ag::softmax(tables.color_logits(v));
    n_s = ag::matmul(s.p_shape, tables.shape_table);
    n_c = ag::matmul(s.p_color, tables.color_table);
  } else {
    n_s = tables.shape_logits(v);
    n_c = tables.color_logits(v);
  }
  s.h = ag::stack({v, n_s, n_c}, 1);
  return s;
}

ag::Tensor normalize_adjacency(const ag::Tensor& a) {
  if (a.ndim() != 2 || a.dim(0) != a.dim(1)) throw ValidationError("adjacency must be square");
  const auto n = a.dim(0);
  const auto x = a.data();
  std::vector<double> degree(static_cast<std::size_t>(n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      const double w = x[i * n + j];
      if (w < 0 || !std::isfinite(w)) throw ValidationError("adjacency entries must be finite and nonnegative");
      degree[i] += w;
    }
    if (degree[i] <= 0) throw ValidationError("adjacency row " + std::to_string(i) + " has zero degree");
  }
  std::vector<double> out(static_cast<std::size_t>(n * n));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] / std::sqrt(degree[i] * degree[j]);
  return ag::Tensor::from({n, n}, std::move(out));
}

GraphState gcnn_forward(const GraphState& h0, std::span<const nn::Linear> layers, const ag::Tensor& a_hat,
                        bool relu_between) {
  GraphState s = h0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    s.h = ag::matmul(a_hat, layers[l].forward(s.h));
    if (relu_between && l + 1 < layers.size()) s.h = ag::relu(s.h);
    ++s.layer;
  }
  return s;
}

ag::Tensor final_fusion(const ag::Tensor& f_ca1, const ag::Tensor& h, const FusionBlock& block, std::mt19937_64& rng,
                        bool training, ag::Tensor* weights) {
  const auto keys = h.ndim() == 2 ? ag::reshape(h, {1, h.dim(0), h.dim(1)}) : h;
  return block.forward(f_ca1, keys, rng, training, weights);
}

// ---- model ----

FusionClassifier::FusionClassifier(const FusionConfig& config, int dim, int prompt_count, ClassifierVariant variant,
                                   std::uint64_t seed)
    : config_(config), variant_(variant), dim_(dim), prompt_count_(prompt_count), rng_(splitmix64(seed)) {
  config.validate(dim);
  if (dim < 1) throw ValidationError("embedding dimension must be positive");
  if (config.num_classes < 1) throw ValidationError("classifier.num_classes must be >= 1");
  if (prompt_count < 1) throw ValidationError("prompt count must be >= 1");
  std::mt19937_64 init(seed);
  const bool concat = variant == ClassifierVariant::no_cross_attention;
  ca1_ = FusionBlock(dim, prompt_count, config, variant != ClassifierVariant::no_prompts, concat, init);
  tables_ = AttributeTables(dim, static_cast<int>(config.shape_categories.size()),
                            static_cast<int>(config.color_categories.size()),
                            variant != ClassifierVariant::no_embedding_tables, init);
  if (variant != ClassifierVariant::no_gcnn)
    for (int l = 0; l < config.gcnn_layers; ++l) gcnn_.emplace_back(dim, dim, init);
  a_hat_ = normalize_adjacency(config.adjacency());
  ca2_ = FusionBlock(dim, 3, config, true, concat, init);
  head_fc1_ = nn::Linear(dim, dim, init);
  head_fc2_ = nn::Linear(dim, config.num_classes, init);
}

ClassifierOutput FusionClassifier::forward(const ag::Tensor& v, const ag::Tensor& prompts, bool training) const {
  if (v.ndim() != 2 || v.dim(1) != dim_)
    throw ValidationError("classifier input must be [B," + std::to_string(dim_) + "], got " + ag::shape_str(v.shape()));
  if (prompts.ndim() != 2 || prompts.dim(0) != prompt_count_)
    throw ValidationError("classifier was built for " + std::to_string(prompt_count_) + " prompts, got " +
                          ag::shape_str(prompts.shape()));
  ClassifierOutput out;
  out.f_ca1 = text_image_fusion(v, prompts, ca1_, rng_, training, &out.ca1_weights);
  out.nodes = build_nodes(v, tables_);
  out.refined = gcnn_forward(out.nodes, gcnn_, a_hat_, config_.gcnn_relu);
  out.f_final = final_fusion(out.f_ca1, out.refined.h, ca2_, rng_, training, &out.ca2_weights);
  const auto hidden = ag::dropout(ag::gelu(head_fc1_.forward(out.f_final)), config_.dropout, rng_, training);
  out.logits = head_fc2_.forward(hidden);
  return out;
}

nn::ParameterList FusionClassifier::parameters() const {
  nn::ParameterList out;
  nn::append(out, "ca1.", ca1_.parameters());
  nn::append(out, "attributes.", tables_.parameters());
  for (std::size_t l = 0; l < gcnn_.size(); ++l)
    nn::append(out, "gcnn." + std::to_string(l) + ".", gcnn_[l].parameters());
  nn::append(out, "ca2.", ca2_.parameters());
  nn::append(out, "head.fc1.", head_fc1_.parameters());
  nn::append(out, "head.fc2.", head_fc2_.parameters());
  return out;
}

FusionClassifier build_ablation_variant(const std::string& name, const FusionConfig& config, int dim,
                                        int prompt_count, std::uint64_t seed) {
  return FusionClassifier(config, dim, prompt_count, classifier_variant_from_string(name), seed);
}

// ---- losses ----

std::vector<double> class_alpha_weights(std::span<const std::int64_t> counts) {
  if (counts.empty()) throw ValidationError("class_alpha_weights of an empty census");
  std::vector<double> alpha;
  alpha.reserve(counts.size());
  double total = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] < 1) throw ValidationError("class " + std::to_string(i) + " has zero count");
    alpha.push_back(1.0 / std::sqrt(static_cast<double>(counts[i])));
    total += alpha.back();
  }
  const double n = static_cast<double>(counts.size());
  for (auto& a : alpha) a = a / total * n;
  return alpha;
}

std::vector<double> class_alpha_weights(const ClassCensus& census, const ClassList& classes) {
  std::vector<std::int64_t> counts;
  for (const auto& name : classes.names()) {
    const auto c = census.count(name);
    if (c < 1) throw ValidationError("class '" + name + "' has zero count");
    counts.push_back(c);
  }
  return class_alpha_weights(counts);
}

ag::Tensor focal_loss(const ag::Tensor& logits, std::span<const int> targets, std::span<const double> alpha,
                      double gamma) {
  if (logits.ndim() != 2) throw ValidationError("focal_loss expects logits [B,N]");
  const auto b = logits.dim(0);
  const auto n = logits.dim(1);
  if (b < 1) throw ValidationError("focal_loss of an empty batch");
  if (static_cast<std::int64_t>(targets.size()) != b) throw ValidationError("focal_loss target count mismatch");
  if (static_cast<std::int64_t>(alpha.size()) != n) throw ValidationError("focal_loss alpha size mismatch");
  if (!(gamma >= 0)) throw ValidationError("focal_loss gamma must be >= 0");
  constexpr double kFloor = 1e-12;
  const double log_floor = std::log(kFloor);

  const auto z = logits.data();
  std::vector<double> probs(static_cast<std::size_t>(b * n));
  std::vector<double> coeff(static_cast<std::size_t>(b));
  double total = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    const int t = targets[i];
    if (t < 0 || t >= n) throw ValidationError("focal_loss target out of range");
    const double* row = z.data() + i * n;
    const double m = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::int64_t j = 0; j < n; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    for (std::int64_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(row[j] - lse);
    const double log_pt_raw = row[t] - lse;
    const double p = std::exp(log_pt_raw);
    const bool floored = log_pt_raw < log_floor;
    const double log_pt = floored ? log_floor : log_pt_raw;
    const double q = 1.0 - p;
    const double mod = gamma == 0 ? 1.0 : std::pow(q, gamma);
    total += -alpha[t] * mod * log_pt;
    const double focus = (gamma == 0 || q <= 0) ? 0.0 : gamma * std::pow(q, gamma - 1) * p * log_pt;
    coeff[i] = -alpha[t] * ((floored ? 0.0 : mod) - focus);
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  return ag::make_result({}, {total / static_cast<double>(b)}, {logits},
                         [probs = std::move(probs), coeff = std::move(coeff), tgt = std::move(tgt), b, n](ag::Node& self) {
                           ag::Node& in = *self.inputs[0];
                           in.ensure_grad();
                           const double g = self.grad[0] / static_cast<double>(b);
                           for (std::int64_t i = 0; i < b; ++i)
                             for (std::int64_t j = 0; j < n; ++j)
                               in.grad[i * n + j] +=
                                   g * coeff[i] * ((j == tgt[i] ? 1.0 : 0.0) - probs[i * n + j]);
                         });
}

// ---- training ----

void to_json(json& j, const ClassifierTrainOptions& o) {
  j = {{"epochs", o.epochs},
       {"batch_size", o.batch_size},
       {"learning_rate", o.learning_rate},
       {"weight_decay", o.weight_decay},
       {"focal_gamma", o.focal_gamma},
       {"seed", o.seed},
       {"floor_counts", o.floor_counts}};
}

void from_json(const json& j, ClassifierTrainOptions& o) {
  auto field = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  field("epochs", o.epochs);
  field("batch_size", o.batch_size);
  field("learning_rate", o.learning_rate);
  field("weight_decay", o.weight_decay);
  field("focal_gamma", o.focal_gamma);
  field("seed", o.seed);
  field("floor_counts", o.floor_counts);
  if (o.epochs < 0 || o.batch_size < 1 || !(o.learning_rate > 0) || o.weight_decay < 0 || o.focal_gamma < 0)
    throw ValidationError("invalid classifier training options");
}

std::vector<ClassifierEpoch> train_classifier(FusionClassifier& model, const ag::Tensor& prompts,
                                              const EmbeddingSource& source, std::span<const int> targets,
                                              std::span<const std::int64_t> class_counts,
                                              const ClassifierTrainOptions& options) {
  const int n_classes = model.config().num_classes;
  if (static_cast<int>(class_counts.size()) != n_classes)
    throw ValidationError("class count table has " + std::to_string(class_counts.size()) + " entries, model has " +
                          std::to_string(n_classes) + " classes");
  if (targets.empty()) throw ValidationError("no training items");
  if (options.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  std::vector<std::int64_t> counts(class_counts.begin(), class_counts.end());
  if (options.floor_counts)
    for (auto& c : counts) c = std::max<std::int64_t>(c, 1);
  const auto alpha = class_alpha_weights(counts);
  const auto params = model.parameters();
  nn::AdamW opt(nn::tensors(params), {options.learning_rate, 0.9, 0.999, 1e-8, options.weight_decay});
  const auto t_prompts = prompts.detach();
  std::mt19937_64 rng(options.seed);
  model.reseed_dropout(splitmix64(options.seed ^ 0xd20f00dULL));
  const int dim = model.dim();

  std::vector<std::size_t> order(targets.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<ClassifierEpoch> history;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t stop = std::min(order.size(), start + options.batch_size);
      std::vector<double> values;
      std::vector<int> batch_targets;
      for (std::size_t k = start; k < stop; ++k) {
        const auto v = source(order[k], epoch);
        if (static_cast<int>(v.size()) != dim) throw ValidationError("embedding source returned the wrong width");
        values.insert(values.end(), v.begin(), v.end());
        batch_targets.push_back(targets[order[k]]);
      }
      const auto bsz = static_cast<std::int64_t>(stop - start);
      const auto out = model.forward(ag::Tensor::from({bsz, dim}, std::move(values)), t_prompts, true);
      auto loss = focal_loss(out.logits, batch_targets, alpha, options.focal_gamma);
      if (!std::isfinite(loss.item())) throw TrainingError("classifier loss diverged at epoch " + std::to_string(epoch));
      opt.zero_grad();
      loss.backward();
      opt.step();
      loss_sum += loss.item() * static_cast<double>(bsz);
      const auto logits = out.logits.data();
      for (std::int64_t i = 0; i < bsz; ++i) {
        const auto* row = logits.data() + i * n_classes;
        if (std::max_element(row, row + n_classes) - row == batch_targets[i]) ++correct;
      }
    }
    const auto total = static_cast<double>(targets.size());
    history.push_back({epoch, loss_sum / total, static_cast<double>(correct) / total});
  }
  opt.zero_grad();
  return history;
}

EmbeddingSource crop_embedding_source(std::span<const LabeledCrop> crops, const EmbeddingProvider& provider,
                                      const AugPolicy& policy, const RarityTable& rarity, std::uint64_t seed) {
  auto cache = std::make_shared<std::vector<std::vector<double>>>(crops.size());
  return [crops, &provider, policy, rarity, seed, cache](std::size_t index, int epoch) {
    const auto& item = crops[index];
    if (!policy.enabled) {
      auto& slot = (*cache)[index];
      if (slot.empty()) slot = embed_crop(item.crop, provider);
      return slot;
    }
    const auto key = item.image_id + "#" + std::to_string(item.instance_index);
    const auto augmented = apply_augmentations(item.crop, item.class_name, policy, rarity,
                                               item_seed(seed, key, static_cast<std::uint64_t>(epoch)));
    return embed_crop(augmented, provider);
  };
}

std::vector<int> predict_classes(const FusionClassifier& model, const ag::Tensor& v, const ag::Tensor& prompts) {
  ag::NoGradGuard guard;
  const auto out = model.forward(v, prompts, false);
  const auto n = out.logits.dim(1);
  const auto data = out.logits.data();
  std::vector<int> pred;
  for (std::int64_t i = 0; i < out.logits.dim(0); ++i) {
    const auto* row = data.data() + i * n;
    pred.push_back(static_cast<int>(std::max_element(row, row + n) - row));
  }
  return pred;
}

// ---- inference and persistence ----

std::vector<double> classify(const ImageTensor& crop, const ClassifierBundle& bundle) {
  if (!bundle.model || !bundle.provider) throw ValidationError("classifier bundle is incomplete");
  const auto v = embed_crop(crop, *bundle.provider);
  ag::NoGradGuard guard;
  const auto out = bundle.model->forward(ag::Tensor::from({1, bundle.provider->dim()}, v), bundle.prompts.matrix());
  return out.logits.to_vector();
}

ClassPrediction classify_top1(const ImageTensor& crop, const ClassifierBundle& bundle) {
  const auto logits = classify(crop, bundle);
  const auto best = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  double s = 0.0;
  for (double z : logits) s += std::exp(z - logits[best]);
  ClassPrediction p;
  p.class_index = best;
  p.class_name = best < static_cast<int>(bundle.classes.size()) ? bundle.classes.name(best) : std::to_string(best);
  p.probability = 1.0 / s;
  return p;
}

void save_classifier(const ClassifierBundle& bundle, const std::filesystem::path& path) {
  if (!bundle.model || !bundle.provider) throw ValidationError("classifier bundle is incomplete");
  const auto& m = *bundle.model;
  json j = {{"format", "lensnet-classifier"},
            {"version", 1},
            {"variant", to_string(m.variant())},
            {"config", m.config()},
            {"dim", m.dim()},
            {"prompts", bundle.prompts.prompts()},
            {"provider", bundle.provider->spec()},
            {"provider_identifier", bundle.provider->identifier()},
            {"classes", bundle.classes.names()},
            {"state", nn::state_to_json(m.parameters())}};
  const auto bytes = json::to_cbor(j);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

ClassifierBundle load_classifier(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  json j;
  try {
    j = json::from_cbor(bytes);
  } catch (const json::exception& e) {
    throw ValidationError("checkpoint " + path.string() + " is not a valid container: " + e.what());
  }
  try {
    if (j.at("format") != "lensnet-classifier") throw ValidationError("checkpoint is not a classifier checkpoint");
    ClassifierBundle b;
    b.provider = make_provider(j.at("provider"));
    const auto expected = j.at("provider_identifier").get<std::string>();
    if (b.provider->identifier() != expected)
      throw ValidationError("checkpoint provider '" + expected + "' cannot be rebuilt from its spec");
    b.prompts = PromptBank(j.at("prompts").get<std::vector<std::string>>());
    b.prompts.compute(*b.provider);
    b.classes = ClassList(j.at("classes").get<std::vector<std::string>>());
    const auto config = j.at("config").get<FusionConfig>();
    if (static_cast<std::size_t>(config.num_classes) != b.classes.size())
      throw ValidationError("checkpoint class list does not match its configuration");
    b.model = std::make_shared<FusionClassifier>(config, j.at("dim").get<int>(), static_cast<int>(b.prompts.size()),
                                                 classifier_variant_from_string(j.at("variant").get<std::string>()));
    nn::load_state(b.model->parameters(), j.at("state"));
    return b;
  } catch (const json::exception& e) {
    throw ValidationError("malformed classifier checkpoint: " + std::string(e.what()));
  }
}

}  // namespace lensnet
