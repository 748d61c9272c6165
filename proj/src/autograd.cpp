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

#include "lensnet/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace lensnet::ag {

namespace {

thread_local bool g_grad_enabled = true;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::vector<std::int64_t> contiguous_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) strides[i] = strides[i + 1] * shape[i + 1];
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const std::int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` expressed over the dims of `out` (0 on broadcast axes).
std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  const auto in_strides = contiguous_strides(in);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i)
    strides[i + offset] = in[i] == 1 ? 0 : in_strides[i];
  return strides;
}

template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, F&& f) {
  const std::int64_t total = numel(out);
  const int nd = static_cast<int>(out.size());
  std::vector<std::int64_t> counter(nd, 0);
  std::int64_t ia = 0;
  std::int64_t ib = 0;
  for (std::int64_t o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (int d = nd - 1; d >= 0; --d) {
      if (++counter[d] < out[d]) {
        ia += sa[d];
        ib += sb[d];
        break;
      }
      ia -= sa[d] * (out[d] - 1);
      ib -= sb[d] * (out[d] - 1);
      counter[d] = 0;
    }
  }
}

int normalize_dim(int dim, int ndim) {
  if (dim < 0) dim += ndim;
  if (dim < 0 || dim >= ndim) throw std::out_of_range("dimension out of range");
  return dim;
}

// da/db receive (x, y, out) and return the partial derivative of out.
template <class Fwd, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
  const auto& x = a.node()->value;
  const auto& y = b.node()->value;
  const bool same = a.shape() == b.shape();
  std::vector<std::int64_t> sa;
  std::vector<std::int64_t> sb;
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
  } else {
    sa = broadcast_strides(a.shape(), out_shape);
    sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::int64_t o, std::int64_t i, std::int64_t j) { out[o] = fwd(x[i], y[j]); });
  }
  return make_result(out_shape, std::move(out), {a, b},
                     [same, sa, sb, da, db](Node& self) {
                       Node& na = *self.inputs[0];
                       Node& nb = *self.inputs[1];
                       const auto& g = self.grad;
                       const auto& xv = na.value;
                       const auto& yv = nb.value;
                       if (na.requires_grad) na.ensure_grad();
                       if (nb.requires_grad) nb.ensure_grad();
                       auto visit = [&](std::int64_t o, std::int64_t i, std::int64_t j) {
                         if (na.requires_grad) na.grad[i] += g[o] * da(xv[i], yv[j], self.value[o]);
                         if (nb.requires_grad) nb.grad[j] += g[o] * db(xv[i], yv[j], self.value[o]);
                       };
                       if (same) {
                         for (std::size_t o = 0; o < g.size(); ++o) visit(o, o, o);
                       } else {
                         for_each_broadcast(self.shape, sa, sb, visit);
                       }
                     });
}

// d receives (x, out) and returns d out / d x.
template <class Fwd, class D>
Tensor unary_op(const Tensor& a, Fwd fwd, D d) {
  const auto& x = a.node()->value;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return make_result(a.shape(), std::move(out), {a}, [d](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      in.grad[i] += self.grad[i] * d(in.value[i], self.value[i]);
  });
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << "]";
  return os.str();
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(static_cast<std::size_t>(ag::numel(shape)), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (static_cast<std::int64_t>(values.size()) != ag::numel(shape))
    throw std::invalid_argument("value count does not match shape " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(static_cast<std::size_t>(ag::numel(shape)));
  for (auto& x : v) x = dist(rng);
  return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng, bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(ag::numel(shape)));
  for (auto& x : v) x = dist(rng);
  return from(std::move(shape), std::move(v), requires_grad);
}

std::int64_t Tensor::dim(int i) const { return node_->shape[normalize_dim(i, ndim())]; }

double Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor with " + std::to_string(numel()) + " elements");
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != ndim()) throw std::out_of_range("index rank mismatch");
  const auto strides = contiguous_strides(node_->shape);
  std::int64_t flat = 0;
  int d = 0;
  for (auto i : index) {
    if (i < 0 || i >= node_->shape[d]) throw std::out_of_range("index out of range");
    flat += i * strides[d++];
  }
  return node_->value[flat];
}

std::vector<double> Tensor::grad() const {
  if (!has_grad()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::backward() {
  if (numel() != 1) throw std::logic_error("backward() requires a scalar tensor");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
  for (Node* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->inputs.clear();
    }
  }
}

Tensor Tensor::detach() const { return from(node_->shape, node_->value, false); }

Tensor Tensor::clone() const { return from(node_->shape, node_->value, node_->requires_grad); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return std::min(x, y); },
      [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return std::max(x, y); },
      [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

Tensor pow(const Tensor& base, const Tensor& exponent) {
  return binary_op(
      base, exponent, [](double x, double y) { return std::pow(x, y); },
      [](double x, double y, double) { return y == 0.0 ? 0.0 : y * std::pow(x, y - 1.0); },
      [](double x, double, double out) { return x > 0.0 ? out * std::log(x) : 0.0; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  // exact (erf) form
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary_op(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor square(const Tensor& a) {
  return unary_op(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor pow_scalar(const Tensor& a, double exponent) {
  return unary_op(
      a, [exponent](double x) { return std::pow(x, exponent); },
      [exponent](double x, double) { return exponent * std::pow(x, exponent - 1.0); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary_op(
      a, [lo, hi](double x) { return std::max(lo, std::min(x, hi)); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({}, {s}, {a}, [](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    in.ensure_grad();
    for (auto& g : in.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const auto n = static_cast<double>(a.numel());
  if (n == 0) throw std::invalid_argument("mean of empty tensor");
  return mul_scalar(sum(a), 1.0 / n);
}

Tensor sum_dim(const Tensor& a, int dim, bool keepdim) {
  dim = normalize_dim(dim, a.ndim());
  const Shape& s = a.shape();
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  for (int i = 0; i < dim; ++i) outer *= s[i];
  for (int i = dim + 1; i < a.ndim(); ++i) inner *= s[i];
  const std::int64_t len = s[dim];
  Shape out_shape = s;
  if (keepdim) {
    out_shape[dim] = 1;
  } else {
    out_shape.erase(out_shape.begin() + dim);
  }
  std::vector<double> out(static_cast<std::size_t>(outer * inner), 0.0);
  const auto& x = a.node()->value;
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t k = 0; k < len; ++k)
      for (std::int64_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * len + k) * inner + i];
  return make_result(out_shape, std::move(out), {a}, [outer, inner, len](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    in.ensure_grad();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t k = 0; k < len; ++k)
        for (std::int64_t i = 0; i < inner; ++i) in.grad[(o * len + k) * inner + i] += self.grad[o * inner + i];
  });
}

Tensor mean_dim(const Tensor& a, int dim, bool keepdim) {
  const int d = normalize_dim(dim, a.ndim());
  return mul_scalar(sum_dim(a, d, keepdim), 1.0 / static_cast<double>(a.shape()[d]));
}

// ---- shape ----

Tensor reshape(const Tensor& a, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw std::invalid_argument("reshape: more than one inferred dimension");
      infer = i;
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || a.numel() % known != 0) throw std::invalid_argument("reshape: cannot infer dimension");
    shape[infer] = a.numel() / known;
  }
  if (numel(shape) != a.numel())
    throw std::invalid_argument("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return make_result(std::move(shape), a.node()->value, {a}, [](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<int>& order) {
  const int nd = a.ndim();
  if (static_cast<int>(order.size()) != nd) throw std::invalid_argument("permute: order rank mismatch");
  const auto in_strides = contiguous_strides(a.shape());
  Shape out_shape(nd);
  std::vector<std::int64_t> gather(nd);
  for (int i = 0; i < nd; ++i) {
    out_shape[i] = a.shape()[order[i]];
    gather[i] = in_strides[order[i]];
  }
  // mapping[o] = input flat index of output element o
  std::vector<std::int64_t> mapping(static_cast<std::size_t>(a.numel()));
  std::vector<std::int64_t> zero(nd, 0);
  for_each_broadcast(out_shape, gather, zero,
                     [&](std::int64_t o, std::int64_t i, std::int64_t) { mapping[o] = i; });
  std::vector<double> out(mapping.size());
  const auto& x = a.node()->value;
  for (std::size_t o = 0; o < mapping.size(); ++o) out[o] = x[mapping[o]];
  return make_result(out_shape, std::move(out), {a}, [mapping = std::move(mapping)](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    in.ensure_grad();
    for (std::size_t o = 0; o < mapping.size(); ++o) in.grad[mapping[o]] += self.grad[o];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int dim) {
  if (parts.empty()) throw std::invalid_argument("concat of no tensors");
  const int nd = parts[0].ndim();
  dim = normalize_dim(dim, nd);
  Shape out_shape = parts[0].shape();
  out_shape[dim] = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != dim && p.shape()[i] != parts[0].shape()[i]) throw std::invalid_argument("concat: shape mismatch");
    out_shape[dim] += p.shape()[dim];
  }
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  for (int i = 0; i < dim; ++i) outer *= out_shape[i];
  for (int i = dim + 1; i < nd; ++i) inner *= out_shape[i];
  const std::int64_t out_chunk = out_shape[dim] * inner;
  std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::int64_t chunk = p.shape()[dim] * inner;
    const auto& x = p.node()->value;
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(x.begin() + o * chunk, chunk, out.begin() + o * out_chunk + offset);
    offset += chunk;
  }
  return make_result(out_shape, std::move(out), parts, [outer, out_chunk, offsets](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      Node& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      in.ensure_grad();
      const auto chunk = static_cast<std::int64_t>(in.value.size()) / outer;
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < chunk; ++i) in.grad[o * chunk + i] += self.grad[o * out_chunk + offsets[k] + i];
    }
  });
}

Tensor stack(const std::vector<Tensor>& parts, int dim) {
  if (parts.empty()) throw std::invalid_argument("stack of no tensors");
  const int nd = parts[0].ndim() + 1;
  if (dim < 0) dim += nd;
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s = p.shape();
    s.insert(s.begin() + dim, 1);
    expanded.push_back(reshape(p, s));
  }
  return concat(expanded, dim);
}

Tensor slice(const Tensor& a, int dim, std::int64_t start, std::int64_t stop) {
  dim = normalize_dim(dim, a.ndim());
  const Shape& s = a.shape();
  if (start < 0 || stop > s[dim] || start >= stop) throw std::out_of_range("slice bounds");
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  for (int i = 0; i < dim; ++i) outer *= s[i];
  for (int i = dim + 1; i < a.ndim(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[dim] = stop - start;
  const std::int64_t in_chunk = s[dim] * inner;
  const std::int64_t out_chunk = out_shape[dim] * inner;
  std::vector<double> out(static_cast<std::size_t>(outer * out_chunk));
  const auto& x = a.node()->value;
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(x.begin() + o * in_chunk + start * inner, out_chunk, out.begin() + o * out_chunk);
  return make_result(out_shape, std::move(out), {a}, [outer, in_chunk, out_chunk, start, inner](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    in.ensure_grad();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < out_chunk; ++i) in.grad[o * in_chunk + start * inner + i] += self.grad[o * out_chunk + i];
  });
}

// ---- linear algebra / nn ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2) throw std::invalid_argument("matmul needs rank >= 2 operands");
  const std::int64_t m = a.dim(-2);
  const std::int64_t k = a.dim(-1);
  const std::int64_t n = b.dim(-1);
  if (b.dim(-2) != k)
    throw std::invalid_argument("matmul shape mismatch " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = broadcast_shape(a_batch, b_batch);
  const auto sa = broadcast_strides(a_batch, batch);
  const auto sb = broadcast_strides(b_batch, batch);
  // Flat batch offsets (in matrices) for each output matrix.
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
  pairs.reserve(static_cast<std::size_t>(numel(batch)));
  for_each_broadcast(batch, sa, sb, [&](std::int64_t, std::int64_t i, std::int64_t j) { pairs.emplace_back(i, j); });

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
  const double* pa = a.node()->value.data();
  const double* pb = b.node()->value.data();
  for (std::size_t t = 0; t < pairs.size(); ++t) {
    MutMap c(out.data() + t * m * n, m, n);
    c.noalias() = ConstMap(pa + pairs[t].first * m * k, m, k) * ConstMap(pb + pairs[t].second * k * n, k, n);
  }
  return make_result(out_shape, std::move(out), {a, b}, [pairs = std::move(pairs), m, k, n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.requires_grad) na.ensure_grad();
    if (nb.requires_grad) nb.ensure_grad();
    for (std::size_t t = 0; t < pairs.size(); ++t) {
      ConstMap g(self.grad.data() + t * m * n, m, n);
      if (na.requires_grad) {
        MutMap ga(na.grad.data() + pairs[t].first * m * k, m, k);
        ga.noalias() += g * ConstMap(nb.value.data() + pairs[t].second * k * n, k, n).transpose();
      }
      if (nb.requires_grad) {
        MutMap gb(nb.grad.data() + pairs[t].second * k * n, k, n);
        gb.noalias() += ConstMap(na.value.data() + pairs[t].first * m * k, m, k).transpose() * g;
      }
    }
  });
}

Tensor softmax(const Tensor& a) {
  const std::int64_t d = a.dim(-1);
  const std::int64_t rows = a.numel() / d;
  const auto& x = a.node()->value;
  std::vector<double> out(x.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double* yr = out.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double total = 0.0;
    for (std::int64_t i = 0; i < d; ++i) total += (yr[i] = std::exp(xr[i] - mx));
    for (std::int64_t i = 0; i < d; ++i) yr[i] /= total;
  }
  return make_result(a.shape(), std::move(out), {a}, [rows, d](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    in.ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * d;
      const double* g = self.grad.data() + r * d;
      double dot = 0.0;
      for (std::int64_t i = 0; i < d; ++i) dot += g[i] * y[i];
      for (std::int64_t i = 0; i < d; ++i) in.grad[r * d + i] += y[i] * (g[i] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  const std::int64_t d = a.dim(-1);
  const std::int64_t rows = a.numel() / d;
  const auto& x = a.node()->value;
  std::vector<double> out(x.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double total = 0.0;
    for (std::int64_t i = 0; i < d; ++i) total += std::exp(xr[i] - mx);
    const double lse = mx + std::log(total);
    for (std::int64_t i = 0; i < d; ++i) out[r * d + i] = xr[i] - lse;
  }
  return make_result(a.shape(), std::move(out), {a}, [rows, d](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    in.ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * d;
      const double* g = self.grad.data() + r * d;
      double gsum = 0.0;
      for (std::int64_t i = 0; i < d; ++i) gsum += g[i];
      for (std::int64_t i = 0; i < d; ++i) in.grad[r * d + i] += g[i] - std::exp(y[i]) * gsum;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::int64_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) throw std::invalid_argument("layer_norm: affine size mismatch");
  const std::int64_t rows = x.numel() / d;
  const auto& xv = x.node()->value;
  const auto& gv = gamma.node()->value;
  const auto& bv = beta.node()->value;
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::int64_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::int64_t i = 0; i < d; ++i) {
      xhat[r * d + i] = (xr[i] - mu) * rstd[r];
      out[r * d + i] = xhat[r * d + i] * gv[i] + bv[i];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                       Node& nx = *self.inputs[0];
                       Node& ng = *self.inputs[1];
                       Node& nb = *self.inputs[2];
                       if (nx.requires_grad) nx.ensure_grad();
                       if (ng.requires_grad) ng.ensure_grad();
                       if (nb.requires_grad) nb.ensure_grad();
                       const auto dd = static_cast<double>(d);
                       for (std::int64_t r = 0; r < rows; ++r) {
                         const double* g = self.grad.data() + r * d;
                         const double* xh = xhat.data() + r * d;
                         double s1 = 0.0;
                         double s2 = 0.0;
                         for (std::int64_t i = 0; i < d; ++i) {
                           const double dxh = g[i] * ng.value[i];
                           s1 += dxh;
                           s2 += dxh * xh[i];
                           if (ng.requires_grad) ng.grad[i] += g[i] * xh[i];
                           if (nb.requires_grad) nb.grad[i] += g[i];
                         }
                         if (nx.requires_grad) {
                           for (std::int64_t i = 0; i < d; ++i) {
                             const double dxh = g[i] * ng.value[i];
                             nx.grad[r * d + i] += rstd[r] / dd * (dd * dxh - s1 - xh[i] * s2);
                           }
                         }
                       }
                     });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  std::vector<double> mask(static_cast<std::size_t>(x.numel()));
  for (auto& m : mask) m = keep(rng) ? scale : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

namespace {

struct ConvGeometry {
  std::int64_t n, c, h, w, o, k, oh, ow;
  int stride, pad;
};

void im2col(const double* img, const ConvGeometry& g, double* col) {
  const std::int64_t cols = g.oh * g.ow;
  for (std::int64_t ch = 0; ch < g.c; ++ch)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((ch * g.k + ky) * g.k + kx) * cols;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            row[oy * g.ow + ox] =
                (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? img[(ch * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
}

void col2im(const double* col, const ConvGeometry& g, double* img) {
  const std::int64_t cols = g.oh * g.ow;
  for (std::int64_t ch = 0; ch < g.c; ++ch)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((ch * g.k + ky) * g.k + kx) * cols;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) img[(ch * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
  if (x.ndim() != 4 || w.ndim() != 4) throw std::invalid_argument("conv2d expects NCHW input and OCKK weight");
  if (w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3))
    throw std::invalid_argument("conv2d shape mismatch " + shape_str(x.shape()) + " * " + shape_str(w.shape()));
  if (b.numel() != w.dim(0)) throw std::invalid_argument("conv2d bias size mismatch");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), 0, 0, stride, padding};
  g.oh = (g.h + 2 * padding - g.k) / stride + 1;
  g.ow = (g.w + 2 * padding - g.k) / stride + 1;
  if (g.oh <= 0 || g.ow <= 0) throw std::invalid_argument("conv2d output would be empty");
  const std::int64_t ckk = g.c * g.k * g.k;
  const std::int64_t cols = g.oh * g.ow;
  std::vector<double> out(static_cast<std::size_t>(g.n * g.o * cols));
  std::vector<double> col(static_cast<std::size_t>(ckk * cols));
  ConstMap wm(w.node()->value.data(), g.o, ckk);
  const auto& bias = b.node()->value;
  for (std::int64_t s = 0; s < g.n; ++s) {
    im2col(x.node()->value.data() + s * g.c * g.h * g.w, g, col.data());
    MutMap om(out.data() + s * g.o * cols, g.o, cols);
    om.noalias() = wm * ConstMap(col.data(), ckk, cols);
    for (std::int64_t oc = 0; oc < g.o; ++oc) om.row(oc).array() += bias[oc];
  }
  return make_result({g.n, g.o, g.oh, g.ow}, std::move(out), {x, w, b}, [g, ckk, cols](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nw = *self.inputs[1];
    Node& nb = *self.inputs[2];
    if (nx.requires_grad) nx.ensure_grad();
    if (nw.requires_grad) nw.ensure_grad();
    if (nb.requires_grad) nb.ensure_grad();
    std::vector<double> col(static_cast<std::size_t>(ckk * cols));
    std::vector<double> dcol(static_cast<std::size_t>(ckk * cols));
    ConstMap wm(nw.value.data(), g.o, ckk);
    for (std::int64_t s = 0; s < g.n; ++s) {
      ConstMap gm(self.grad.data() + s * g.o * cols, g.o, cols);
      if (nb.requires_grad)
        for (std::int64_t oc = 0; oc < g.o; ++oc) nb.grad[oc] += gm.row(oc).sum();
      if (nw.requires_grad) {
        im2col(nx.value.data() + s * g.c * g.h * g.w, g, col.data());
        MutMap(nw.grad.data(), g.o, ckk).noalias() += gm * ConstMap(col.data(), ckk, cols).transpose();
      }
      if (nx.requires_grad) {
        MutMap(dcol.data(), ckk, cols).noalias() = wm.transpose() * gm;
        col2im(dcol.data(), g, nx.grad.data() + s * g.c * g.h * g.w);
      }
    }
  });
}

namespace {

struct LinearTap {
  std::int64_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<LinearTap> bilinear_taps(std::int64_t in, std::int64_t out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[i] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  if (x.ndim() != 4) throw std::invalid_argument("resize_bilinear expects NCHW");
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_bilinear: empty output");
  const std::int64_t planes = x.dim(0) * x.dim(1);
  const std::int64_t h = x.dim(2);
  const std::int64_t w = x.dim(3);
  if (h <= 0 || w <= 0) throw std::invalid_argument("resize_bilinear: empty input");
  auto ty = bilinear_taps(h, out_h);
  auto tx = bilinear_taps(w, out_w);
  std::vector<double> out(static_cast<std::size_t>(planes * out_h * out_w));
  const auto& xv = x.node()->value;
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* src = xv.data() + p * h * w;
    double* dst = out.data() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto& c = tx[ox];
        const double top = src[a.i0 * w + c.i0] * (1 - c.w1) + src[a.i0 * w + c.i1] * c.w1;
        const double bot = src[a.i1 * w + c.i0] * (1 - c.w1) + src[a.i1 * w + c.i1] * c.w1;
        dst[oy * out_w + ox] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  }
  Shape shape{x.dim(0), x.dim(1), out_h, out_w};
  return make_result(shape, std::move(out), {x}, [planes, h, w, out_h, out_w, ty, tx](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    in.ensure_grad();
    for (std::int64_t p = 0; p < planes; ++p) {
      double* gsrc = in.grad.data() + p * h * w;
      const double* g = self.grad.data() + p * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const auto& a = ty[oy];
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const auto& c = tx[ox];
          const double v = g[oy * out_w + ox];
          gsrc[a.i0 * w + c.i0] += v * (1 - a.w1) * (1 - c.w1);
          gsrc[a.i0 * w + c.i1] += v * (1 - a.w1) * c.w1;
          gsrc[a.i1 * w + c.i0] += v * a.w1 * (1 - c.w1);
          gsrc[a.i1 * w + c.i1] += v * a.w1 * c.w1;
        }
      }
    }
  });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) throw std::invalid_argument("bce_with_logits: shape mismatch");
  const auto& x = logits.node()->value;
  const auto& t = targets.node()->value;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = std::max(x[i], 0.0) - x[i] * t[i] + std::log1p(std::exp(-std::abs(x[i])));
  return make_result(logits.shape(), std::move(out), {logits, targets}, [](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nt = *self.inputs[1];
    if (nx.requires_grad) {
      nx.ensure_grad();
      for (std::size_t i = 0; i < nx.value.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-nx.value[i]));
        nx.grad[i] += self.grad[i] * (s - nt.value[i]);
      }
    }
    if (nt.requires_grad) {
      nt.ensure_grad();
      for (std::size_t i = 0; i < nt.value.size(); ++i) nt.grad[i] += -self.grad[i] * nx.value[i];
    }
  });
}

}  // namespace lensnet::ag
