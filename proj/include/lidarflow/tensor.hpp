// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "lidarflow/common.hpp"

namespace lidarflow {

/// Dense rank-4 extents in (batch, channels, height, width) order.
struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }

  std::int64_t index(int in, int ic, int iy, int ix) const {
    return ((static_cast<std::int64_t>(in) * c + ic) * h + iy) * w + ix;
  }

  friend bool operator==(const Shape&, const Shape&) = default;

  std::string to_string() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

/// One node of the recorded computation graph. `backward` reads this node's
/// grad and accumulates into the parents' grads.
template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // empty until a backward pass needs it
  bool requires_grad = false;
  bool leaf = false;  // gradient leaf (parameter or explicit variable)
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), S(0));
  }
};

/// Value-semantic handle to an immutable graph node. Copies share the node.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<S>> node) : node_(std::move(node)) {}

  static Tensor constant(const Shape& shape, S fill = S(0)) {
    check_shape(shape, "Tensor::constant");
    auto node = std::make_shared<TensorNode<S>>();
    node->shape = shape;
    node->values.assign(static_cast<std::size_t>(shape.numel()), fill);
    return Tensor(std::move(node));
  }

  static Tensor constant(const Shape& shape, std::vector<S> values) {
    check_shape(shape, "Tensor::constant");
    if (static_cast<std::int64_t>(values.size()) != shape.numel())
      fail("Tensor::constant: " + std::to_string(values.size()) +
           " values for shape " + shape.to_string());
    auto node = std::make_shared<TensorNode<S>>();
    node->shape = shape;
    node->values = std::move(values);
    return Tensor(std::move(node));
  }

  /// Leaf that participates in backward passes (parameters, gradcheck probes).
  static Tensor variable(const Shape& shape, std::vector<S> values) {
    Tensor t = constant(shape, std::move(values));
    t.node_->requires_grad = true;
    t.node_->leaf = true;
    return t;
  }

  static Tensor variable(const Shape& shape, S fill = S(0)) {
    Tensor t = constant(shape, fill);
    t.node_->requires_grad = true;
    t.node_->leaf = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->shape.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_ && node_->leaf; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }

  std::span<const S> values() const { return {node_->values.data(), node_->values.size()}; }

  /// Direct write access; meant for leaves (optimizer updates, perturbations).
  std::span<S> mutable_values() { return {node_->values.data(), node_->values.size()}; }

  std::span<const S> grad() const {
    if (!has_grad()) fail("Tensor::grad: no gradient recorded");
    return {node_->grad.data(), node_->grad.size()};
  }

  S item() const {
    if (numel() != 1) fail("Tensor::item: tensor has shape " + shape().to_string());
    return node_->values[0];
  }

  S value_at(int in, int ic, int iy, int ix) const {
    return node_->values[static_cast<std::size_t>(shape().index(in, ic, iy, ix))];
  }

  std::shared_ptr<TensorNode<S>> node() const { return node_; }

 private:
  static void check_shape(const Shape& s, const char* who) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
      fail(std::string(who) + ": negative extent in " + s.to_string());
  }

  std::shared_ptr<TensorNode<S>> node_;
};

template <typename S>
bool all_finite(const Tensor<S>& t) {
  for (S v : t.values())
    if (!std::isfinite(static_cast<double>(v))) return false;
  if (t.has_grad())
    for (S v : t.grad())
      if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <typename S>
void require_finite(const Tensor<S>& t, std::string_view what) {
  if (!all_finite(t)) fail(std::string(what) + ": non-finite value detected");
}

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;

  void validate() const {
    if (!(lr > 0)) fail("OptimizerConfig: lr must be positive");
    if (!(beta1 > 0 && beta1 < 1)) fail("OptimizerConfig: beta1 must lie in (0,1)");
    if (!(beta2 > 0 && beta2 < 1)) fail("OptimizerConfig: beta2 must lie in (0,1)");
    if (!(epsilon > 0)) fail("OptimizerConfig: epsilon must be positive");
  }
};

/// Named learnable tensors plus first/second ADAM moment buffers. Iteration
/// is lexicographic by name (std::map). Move-only; use clone() for snapshots.
template <typename S>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Tensor<S> create(const std::string& name, const Shape& shape, std::vector<S> values) {
    if (entries_.count(name)) fail("ParameterStore: duplicate parameter '" + name + "'");
    Entry e;
    e.param = Tensor<S>::variable(shape, std::move(values));
    auto [it, _] = entries_.emplace(name, std::move(e));
    return it->second.param;
  }

  Tensor<S> get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) fail("ParameterStore: unknown parameter '" + name + "'");
    return it->second.param;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
  }

  std::size_t size() const { return entries_.size(); }

  std::int64_t param_count() const {
    std::int64_t total = 0;
    for (const auto& [_, e] : entries_) total += e.param.numel();
    return total;
  }

  void zero_grads() {
    for (auto& [_, e] : entries_) {
      auto node = e.param.node();
      if (!node->grad.empty()) std::fill(node->grad.begin(), node->grad.end(), S(0));
    }
  }

  std::int64_t step_count() const { return step_count_; }
  void set_step_count(std::int64_t t) { step_count_ = t; }

  bool has_moments(const std::string& name) const {
    auto it = entries_.find(name);
    return it != entries_.end() && !it->second.m1.empty();
  }

  std::pair<std::span<const S>, std::span<const S>> moments(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end() || it->second.m1.empty())
      fail("ParameterStore: no moments for '" + name + "'");
    return {{it->second.m1.data(), it->second.m1.size()},
            {it->second.m2.data(), it->second.m2.size()}};
  }

  void set_moments(const std::string& name, std::vector<S> m1, std::vector<S> m2) {
    auto it = entries_.find(name);
    if (it == entries_.end()) fail("ParameterStore: set_moments for unknown parameter '" + name + "'");
    const auto need = static_cast<std::size_t>(it->second.param.numel());
    if (m1.size() != need || m2.size() != need)
      fail("ParameterStore: moment size mismatch for '" + name + "'");
    it->second.m1 = std::move(m1);
    it->second.m2 = std::move(m2);
  }

  void reset_optimizer_state() {
    for (auto& [_, e] : entries_) {
      e.m1.clear();
      e.m2.clear();
    }
    step_count_ = 0;
  }

  /// Standard bias-corrected ADAM; gradients are left untouched.
  void apply_adam(const OptimizerConfig& cfg) {
    cfg.validate();
    const std::int64_t t = step_count_ + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (auto& [name, e] : entries_) {
      auto node = e.param.node();
      if (node->grad.empty())
        fail("adam_step: parameter '" + name + "' has no gradient");
      const std::size_t count = node->values.size();
      if (e.m1.empty()) {
        e.m1.assign(count, S(0));
        e.m2.assign(count, S(0));
      }
      for (std::size_t i = 0; i < count; ++i) {
        const double g = static_cast<double>(node->grad[i]);
        const double m = cfg.beta1 * static_cast<double>(e.m1[i]) + (1.0 - cfg.beta1) * g;
        const double v = cfg.beta2 * static_cast<double>(e.m2[i]) + (1.0 - cfg.beta2) * g * g;
        e.m1[i] = static_cast<S>(m);
        e.m2[i] = static_cast<S>(v);
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        node->values[i] = static_cast<S>(static_cast<double>(node->values[i]) -
                                         cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon));
      }
    }
    ++step_count_;
  }

  ParameterStore clone() const {
    ParameterStore out;
    for (const auto& [name, e] : entries_) {
      std::vector<S> vals(e.param.values().begin(), e.param.values().end());
      Entry copy;
      copy.param = Tensor<S>::variable(e.param.shape(), std::move(vals));
      copy.m1 = e.m1;
      copy.m2 = e.m2;
      out.entries_.emplace(name, std::move(copy));
    }
    out.step_count_ = step_count_;
    return out;
  }

  template <typename F>
  void for_each(F&& f) const {
    for (const auto& [name, e] : entries_) f(name, e.param);
  }

  std::uint64_t value_hash() const {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& [name, e] : entries_) {
      h = fnv1a64(name.data(), name.size(), h);
      h = fnv1a64(e.param.values().data(), e.param.values().size() * sizeof(S), h);
    }
    return h;
  }

 private:
  struct Entry {
    Tensor<S> param;
    std::vector<S> m1, m2;
  };

  std::map<std::string, Entry> entries_;
  std::int64_t step_count_ = 0;
};

template <typename S>
void adam_step(ParameterStore<S>& store, const OptimizerConfig& cfg) {
  store.apply_adam(cfg);
}

/// Reverse-mode pass from a scalar loss. Interior grads are reset per call;
/// leaf grads accumulate across calls until explicitly zeroed.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (!loss.defined()) fail("backward: undefined loss tensor");
  if (loss.numel() != 1)
    fail("backward: loss must be a scalar, got shape " + loss.shape().to_string());
  auto root = loss.node();
  if (!root->requires_grad)
    fail("backward: no recorded graph (loss does not depend on any differentiable leaf)");

  // Post-order over the requires_grad subgraph; parents precede children.
  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> seen;
  struct Frame {
    TensorNode<S>* node;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      TensorNode<S>* p = f.node->parents[f.next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  for (TensorNode<S>* n : order) {
    if (n->leaf)
      n->ensure_grad();
    else
      n->grad.assign(n->values.size(), S(0));
  }
  root->grad[0] += S(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>* n = *it;
    if (n->backward) n->backward(*n);
  }
}

/// As backward(loss), then zero-fills the grad of parameters unreachable
/// from the loss so every entry in the store reports a gradient.
template <typename S>
void backward(const Tensor<S>& loss, ParameterStore<S>& store) {
  backward(loss);
  store.for_each([](const std::string&, const Tensor<S>& p) { p.node()->ensure_grad(); });
}

}  // namespace lidarflow
