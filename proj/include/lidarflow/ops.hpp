// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "lidarflow/tensor.hpp"

namespace lidarflow {

namespace detail {

template <typename S>
std::shared_ptr<TensorNode<S>> make_node(const Shape& shape) {
  auto node = std::make_shared<TensorNode<S>>();
  node->shape = shape;
  node->values.assign(static_cast<std::size_t>(shape.numel()), S(0));
  return node;
}

template <typename S>
bool any_requires_grad(std::initializer_list<const Tensor<S>*> ts) {
  for (const auto* t : ts)
    if (t && t->requires_grad()) return true;
  return false;
}

template <typename S, typename Fn>
void record(std::shared_ptr<TensorNode<S>>& out,
            std::initializer_list<std::shared_ptr<TensorNode<S>>> parents, Fn&& fn) {
  out->requires_grad = true;
  out->parents.assign(parents.begin(), parents.end());
  out->backward = std::forward<Fn>(fn);
}

template <typename F>
void parallel_batches(int n, F&& f) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int i = 0; i < n; ++i) f(i);
}

template <typename S>
void require_defined(const Tensor<S>& t, const char* op, const char* operand) {
  if (!t.defined()) fail(std::string(op) + ": undefined tensor for " + operand);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_defined(a, "add", "lhs");
  detail::require_defined(b, "add", "rhs");
  if (!(a.shape() == b.shape()))
    fail("add: shape mismatch " + a.shape().to_string() + " vs " + b.shape().to_string());
  auto out = detail::make_node<S>(a.shape());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] = av[i] + bv[i];
  if (detail::any_requires_grad<S>({&a, &b})) {
    detail::record(out, {a.node(), b.node()}, [an = a.node(), bn = b.node()](TensorNode<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
      }
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_defined(a, "sub", "lhs");
  detail::require_defined(b, "sub", "rhs");
  if (!(a.shape() == b.shape()))
    fail("sub: shape mismatch " + a.shape().to_string() + " vs " + b.shape().to_string());
  auto out = detail::make_node<S>(a.shape());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] = av[i] - bv[i];
  if (detail::any_requires_grad<S>({&a, &b})) {
    detail::record(out, {a.node(), b.node()}, [an = a.node(), bn = b.node()](TensorNode<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
      }
    });
  }
  return Tensor<S>(out);
}

namespace detail {

inline bool broadcast_compatible(int a, int b) { return a == b || a == 1 || b == 1; }

}  // namespace detail

/// Elementwise product with numpy-style broadcasting over extents of 1
/// (used for CBAM gates and loss masks).
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_defined(a, "mul", "lhs");
  detail::require_defined(b, "mul", "rhs");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (!detail::broadcast_compatible(sa.n, sb.n) || !detail::broadcast_compatible(sa.c, sb.c) ||
      !detail::broadcast_compatible(sa.h, sb.h) || !detail::broadcast_compatible(sa.w, sb.w))
    fail("mul: shapes not broadcastable " + sa.to_string() + " vs " + sb.to_string());
  const Shape so{std::max(sa.n, sb.n), std::max(sa.c, sb.c), std::max(sa.h, sb.h),
                 std::max(sa.w, sb.w)};
  auto out = detail::make_node<S>(so);
  const S* av = a.values().data();
  const S* bv = b.values().data();
  {
    S* ov = out->values.data();
    for (int in = 0; in < so.n; ++in)
      for (int ic = 0; ic < so.c; ++ic)
        for (int iy = 0; iy < so.h; ++iy)
          for (int ix = 0; ix < so.w; ++ix) {
            const std::int64_t ia = sa.index(sa.n == 1 ? 0 : in, sa.c == 1 ? 0 : ic,
                                             sa.h == 1 ? 0 : iy, sa.w == 1 ? 0 : ix);
            const std::int64_t ib = sb.index(sb.n == 1 ? 0 : in, sb.c == 1 ? 0 : ic,
                                             sb.h == 1 ? 0 : iy, sb.w == 1 ? 0 : ix);
            *ov++ = av[ia] * bv[ib];
          }
  }
  if (detail::any_requires_grad<S>({&a, &b})) {
    detail::record(out, {a.node(), b.node()},
                   [an = a.node(), bn = b.node(), so](TensorNode<S>& self) {
                     const Shape& sa = an->shape;
                     const Shape& sb = bn->shape;
                     if (an->requires_grad) an->ensure_grad();
                     if (bn->requires_grad) bn->ensure_grad();
                     const S* g = self.grad.data();
                     for (int in = 0; in < so.n; ++in)
                       for (int ic = 0; ic < so.c; ++ic)
                         for (int iy = 0; iy < so.h; ++iy)
                           for (int ix = 0; ix < so.w; ++ix) {
                             const std::int64_t ia =
                                 sa.index(sa.n == 1 ? 0 : in, sa.c == 1 ? 0 : ic,
                                          sa.h == 1 ? 0 : iy, sa.w == 1 ? 0 : ix);
                             const std::int64_t ib =
                                 sb.index(sb.n == 1 ? 0 : in, sb.c == 1 ? 0 : ic,
                                          sb.h == 1 ? 0 : iy, sb.w == 1 ? 0 : ix);
                             if (an->requires_grad) an->grad[ia] += *g * bn->values[ib];
                             if (bn->requires_grad) bn->grad[ib] += *g * an->values[ia];
                             ++g;
                           }
                   });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, double factor) {
  detail::require_defined(x, "scale", "input");
  auto out = detail::make_node<S>(x.shape());
  const auto xv = x.values();
  const S f = static_cast<S>(factor);
  for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] = f * xv[i];
  if (x.requires_grad()) {
    detail::record(out, {x.node()}, [xn = x.node(), f](TensorNode<S>& self) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += f * self.grad[i];
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) fail("concat_channels: no inputs");
  for (const auto& p : parts) detail::require_defined(p, "concat_channels", "input");
  const Shape& first = parts.front().shape();
  int total_c = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w)
      fail("concat_channels: incompatible shapes " + first.to_string() + " vs " + s.to_string());
    total_c += s.c;
  }
  const Shape so{first.n, total_c, first.h, first.w};
  auto out = detail::make_node<S>(so);
  const std::int64_t plane = static_cast<std::int64_t>(first.h) * first.w;
  for (int in = 0; in < so.n; ++in) {
    std::int64_t coff = 0;
    for (const auto& p : parts) {
      const Shape& s = p.shape();
      const S* src = p.values().data() + static_cast<std::int64_t>(in) * s.c * plane;
      S* dst = out->values.data() + (static_cast<std::int64_t>(in) * so.c + coff) * plane;
      std::copy(src, src + static_cast<std::int64_t>(s.c) * plane, dst);
      coff += s.c;
    }
  }
  bool rg = false;
  for (const auto& p : parts) rg = rg || p.requires_grad();
  if (rg) {
    std::vector<std::shared_ptr<TensorNode<S>>> parents;
    for (const auto& p : parts) parents.push_back(p.node());
    out->requires_grad = true;
    out->parents = parents;
    out->backward = [parents, so, plane](TensorNode<S>& self) {
      for (int in = 0; in < so.n; ++in) {
        std::int64_t coff = 0;
        for (const auto& pn : parents) {
          const Shape& s = pn->shape;
          if (pn->requires_grad) {
            pn->ensure_grad();
            const S* g = self.grad.data() + (static_cast<std::int64_t>(in) * so.c + coff) * plane;
            S* dst = pn->grad.data() + static_cast<std::int64_t>(in) * s.c * plane;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.c) * plane; ++i) dst[i] += g[i];
          }
          coff += s.c;
        }
      }
    };
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  return concat_channels(std::vector<Tensor<S>>{a, b});
}

// ---------------------------------------------------------------------------
// Reductions and scalar maps

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  detail::require_defined(x, "sum_all", "input");
  auto out = detail::make_node<S>(Shape{1, 1, 1, 1});
  double acc = 0;
  for (S v : x.values()) acc += static_cast<double>(v);
  out->values[0] = static_cast<S>(acc);
  if (x.requires_grad()) {
    detail::record(out, {x.node()}, [xn = x.node()](TensorNode<S>& self) {
      xn->ensure_grad();
      const S g = self.grad[0];
      for (auto& v : xn->grad) v += g;
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  detail::require_defined(x, "mean_all", "input");
  if (x.numel() == 0) fail("mean_all: empty tensor");
  auto out = detail::make_node<S>(Shape{1, 1, 1, 1});
  double acc = 0;
  for (S v : x.values()) acc += static_cast<double>(v);
  const double inv = 1.0 / static_cast<double>(x.numel());
  out->values[0] = static_cast<S>(acc * inv);
  if (x.requires_grad()) {
    detail::record(out, {x.node()}, [xn = x.node(), inv](TensorNode<S>& self) {
      xn->ensure_grad();
      const S g = static_cast<S>(static_cast<double>(self.grad[0]) * inv);
      for (auto& v : xn->grad) v += g;
    });
  }
  return Tensor<S>(out);
}

/// Elementwise square root. The derivative at exactly 0 is taken as 0 so a
/// perfectly reconstructed level contributes a zero (not NaN) gradient.
template <typename S>
Tensor<S> sqrt(const Tensor<S>& x) {
  detail::require_defined(x, "sqrt", "input");
  auto out = detail::make_node<S>(x.shape());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out->values.size(); ++i)
    out->values[i] = std::sqrt(xv[i]);
  if (x.requires_grad()) {
    detail::record(out, {x.node()}, [xn = x.node()](TensorNode<S>& self) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const S y = self.values[i];
        if (y > S(0)) xn->grad[i] += self.grad[i] * (S(0.5) / y);
      }
    });
  }
  return Tensor<S>(out);
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { LeakyRelu, Sigmoid };

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& x, S slope = S(0.1)) {
  detail::require_defined(x, "leaky_relu", "input");
  auto out = detail::make_node<S>(x.shape());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out->values.size(); ++i)
    out->values[i] = xv[i] >= S(0) ? xv[i] : slope * xv[i];
  if (x.requires_grad()) {
    detail::record(out, {x.node()}, [xn = x.node(), slope](TensorNode<S>& self) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        xn->grad[i] += self.grad[i] * (xn->values[i] >= S(0) ? S(1) : slope);
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  detail::require_defined(x, "sigmoid", "input");
  auto out = detail::make_node<S>(x.shape());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out->values.size(); ++i)
    out->values[i] = S(1) / (S(1) + std::exp(-xv[i]));
  if (x.requires_grad()) {
    detail::record(out, {x.node()}, [xn = x.node()](TensorNode<S>& self) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const S y = self.values[i];
        xn->grad[i] += self.grad[i] * y * (S(1) - y);
      }
    });
  }
  return Tensor<S>(out);
}

template <typename S>
Tensor<S> activation(const Tensor<S>& x, Activation kind, S slope = S(0.1)) {
  switch (kind) {
    case Activation::LeakyRelu:
      return leaky_relu(x, slope);
    case Activation::Sigmoid:
      return sigmoid(x);
  }
  fail("activation: unknown kind");
}

// ---------------------------------------------------------------------------
// Pooling

enum class PoolAxis { Spatial, Channel };
enum class PoolKind { Avg, Max };

/// Spatial pooling collapses (H,W) to (1,1); channel pooling collapses C to 1.
/// Max routes the gradient to the argmax; ties go to the lowest flat index.
template <typename S>
Tensor<S> pool(const Tensor<S>& x, PoolAxis axis, PoolKind kind) {
  detail::require_defined(x, "pool", "input");
  const Shape& s = x.shape();
  const auto xv = x.values();

  if (axis == PoolAxis::Spatial) {
    const Shape so{s.n, s.c, 1, 1};
    auto out = detail::make_node<S>(so);
    const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
    std::vector<std::int64_t> argmax;
    if (kind == PoolKind::Max) argmax.resize(static_cast<std::size_t>(so.numel()));
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(s.n) * s.c; ++nc) {
      const S* p = xv.data() + nc * plane;
      if (kind == PoolKind::Avg) {
        double acc = 0;
        for (std::int64_t i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
        out->values[nc] = static_cast<S>(acc / static_cast<double>(plane));
      } else {
        std::int64_t best = 0;
        for (std::int64_t i = 1; i < plane; ++i)
          if (p[i] > p[best]) best = i;
        out->values[nc] = p[best];
        argmax[nc] = best;
      }
    }
    if (x.requires_grad()) {
      detail::record(out, {x.node()},
                     [xn = x.node(), kind, plane, argmax = std::move(argmax)](TensorNode<S>& self) {
                       xn->ensure_grad();
                       const std::int64_t count = static_cast<std::int64_t>(self.values.size());
                       for (std::int64_t nc = 0; nc < count; ++nc) {
                         if (kind == PoolKind::Avg) {
                           const S g = static_cast<S>(static_cast<double>(self.grad[nc]) /
                                                      static_cast<double>(plane));
                           S* gp = xn->grad.data() + nc * plane;
                           for (std::int64_t i = 0; i < plane; ++i) gp[i] += g;
                         } else {
                           xn->grad[nc * plane + argmax[nc]] += self.grad[nc];
                         }
                       }
                     });
    }
    return Tensor<S>(out);
  }

  const Shape so{s.n, 1, s.h, s.w};
  auto out = detail::make_node<S>(so);
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  std::vector<int> argmax;
  if (kind == PoolKind::Max) argmax.resize(static_cast<std::size_t>(so.numel()));
  for (int in = 0; in < s.n; ++in)
    for (std::int64_t px = 0; px < plane; ++px) {
      const std::int64_t base = static_cast<std::int64_t>(in) * s.c * plane + px;
      const std::int64_t oi = static_cast<std::int64_t>(in) * plane + px;
      if (kind == PoolKind::Avg) {
        double acc = 0;
        for (int ic = 0; ic < s.c; ++ic) acc += static_cast<double>(xv[base + ic * plane]);
        out->values[oi] = static_cast<S>(acc / s.c);
      } else {
        int best = 0;
        for (int ic = 1; ic < s.c; ++ic)
          if (xv[base + ic * plane] > xv[base + best * plane]) best = ic;
        out->values[oi] = xv[base + best * plane];
        argmax[oi] = best;
      }
    }
  if (x.requires_grad()) {
    detail::record(out, {x.node()},
                   [xn = x.node(), kind, plane, argmax = std::move(argmax)](TensorNode<S>& self) {
                     xn->ensure_grad();
                     const Shape& s = xn->shape;
                     for (int in = 0; in < s.n; ++in)
                       for (std::int64_t px = 0; px < plane; ++px) {
                         const std::int64_t base =
                             static_cast<std::int64_t>(in) * s.c * plane + px;
                         const std::int64_t oi = static_cast<std::int64_t>(in) * plane + px;
                         if (kind == PoolKind::Avg) {
                           const S g = static_cast<S>(static_cast<double>(self.grad[oi]) / s.c);
                           for (int ic = 0; ic < s.c; ++ic) xn->grad[base + ic * plane] += g;
                         } else {
                           xn->grad[base + argmax[oi] * plane] += self.grad[oi];
                         }
                       }
                   });
  }
  return Tensor<S>(out);
}

/// 2x2 average pooling with stride 2; requires even extents.
template <typename S>
Tensor<S> avg_pool2x2(const Tensor<S>& x) {
  detail::require_defined(x, "avg_pool2x2", "input");
  const Shape& s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0)
    fail("avg_pool2x2: extents must be even, got " + s.to_string());
  const Shape so{s.n, s.c, s.h / 2, s.w / 2};
  auto out = detail::make_node<S>(so);
  const auto xv = x.values();
  for (int in = 0; in < s.n; ++in)
    for (int ic = 0; ic < s.c; ++ic)
      for (int oy = 0; oy < so.h; ++oy)
        for (int ox = 0; ox < so.w; ++ox) {
          const std::int64_t i00 = s.index(in, ic, 2 * oy, 2 * ox);
          const double sum = static_cast<double>(xv[i00]) + xv[i00 + 1] + xv[i00 + s.w] +
                             xv[i00 + s.w + 1];
          out->values[so.index(in, ic, oy, ox)] = static_cast<S>(sum * 0.25);
        }
  if (x.requires_grad()) {
    detail::record(out, {x.node()}, [xn = x.node(), so](TensorNode<S>& self) {
      xn->ensure_grad();
      const Shape& s = xn->shape;
      for (int in = 0; in < s.n; ++in)
        for (int ic = 0; ic < s.c; ++ic)
          for (int oy = 0; oy < so.h; ++oy)
            for (int ox = 0; ox < so.w; ++ox) {
              const S g = self.grad[so.index(in, ic, oy, ox)] * S(0.25);
              const std::int64_t i00 = s.index(in, ic, 2 * oy, 2 * ox);
              xn->grad[i00] += g;
              xn->grad[i00 + 1] += g;
              xn->grad[i00 + s.w] += g;
              xn->grad[i00 + s.w + 1] += g;
            }
    });
  }
  return Tensor<S>(out);
}

// ---------------------------------------------------------------------------
// Bilinear 2x upsampling
//
// Sample centers follow the (i + 0.5)/scale - 0.5 convention (no corner
// alignment); border samples clamp to the edge, so constants stay constant.

template <typename S>
Tensor<S> upsample2x(const Tensor<S>& x) {
  detail::require_defined(x, "upsample2x", "input");
  const Shape& s = x.shape();
  const Shape so{s.n, s.c, 2 * s.h, 2 * s.w};
  auto out = detail::make_node<S>(so);
  const auto xv = x.values();

  auto src_coord = [](int o) { return 0.5 * (o + 0.5) - 0.5; };
  auto run_forward = [&](int in) {
    for (int ic = 0; ic < s.c; ++ic) {
      const S* plane = xv.data() + s.index(in, ic, 0, 0);
      S* oplane = out->values.data() + so.index(in, ic, 0, 0);
      for (int oy = 0; oy < so.h; ++oy) {
        const double sy = src_coord(oy);
        const int y0 = static_cast<int>(std::floor(sy));
        const double fy = sy - y0;
        const int y0c = std::clamp(y0, 0, s.h - 1);
        const int y1c = std::clamp(y0 + 1, 0, s.h - 1);
        for (int ox = 0; ox < so.w; ++ox) {
          const double sx = src_coord(ox);
          const int x0 = static_cast<int>(std::floor(sx));
          const double fx = sx - x0;
          const int x0c = std::clamp(x0, 0, s.w - 1);
          const int x1c = std::clamp(x0 + 1, 0, s.w - 1);
          const double v = (1 - fy) * ((1 - fx) * plane[y0c * s.w + x0c] +
                                       fx * plane[y0c * s.w + x1c]) +
                           fy * ((1 - fx) * plane[y1c * s.w + x0c] +
                                 fx * plane[y1c * s.w + x1c]);
          oplane[oy * so.w + ox] = static_cast<S>(v);
        }
      }
    }
  };
  for (int in = 0; in < s.n; ++in) run_forward(in);

  if (x.requires_grad()) {
    detail::record(out, {x.node()}, [xn = x.node(), so](TensorNode<S>& self) {
      xn->ensure_grad();
      const Shape& s = xn->shape;
      auto src_coord = [](int o) { return 0.5 * (o + 0.5) - 0.5; };
      for (int in = 0; in < s.n; ++in)
        for (int ic = 0; ic < s.c; ++ic) {
          S* gplane = xn->grad.data() + s.index(in, ic, 0, 0);
          const S* g = self.grad.data() + so.index(in, ic, 0, 0);
          for (int oy = 0; oy < so.h; ++oy) {
            const double sy = src_coord(oy);
            const int y0 = static_cast<int>(std::floor(sy));
            const double fy = sy - y0;
            const int y0c = std::clamp(y0, 0, s.h - 1);
            const int y1c = std::clamp(y0 + 1, 0, s.h - 1);
            for (int ox = 0; ox < so.w; ++ox) {
              const double sx = src_coord(ox);
              const int x0 = static_cast<int>(std::floor(sx));
              const double fx = sx - x0;
              const int x0c = std::clamp(x0, 0, s.w - 1);
              const int x1c = std::clamp(x0 + 1, 0, s.w - 1);
              const double go = static_cast<double>(g[oy * so.w + ox]);
              gplane[y0c * s.w + x0c] += static_cast<S>(go * (1 - fy) * (1 - fx));
              gplane[y0c * s.w + x1c] += static_cast<S>(go * (1 - fy) * fx);
              gplane[y1c * s.w + x0c] += static_cast<S>(go * fy * (1 - fx));
              gplane[y1c * s.w + x1c] += static_cast<S>(go * fy * fx);
            }
          }
        }
    });
  }
  return Tensor<S>(out);
}

// ---------------------------------------------------------------------------
// Backward warping
//
// output(x, y) = bilinear sample of source at (x + u, y + v); samples outside
// the image contribute zero, consistent with the empty-pixel convention.
// Zero-weight corners are skipped so a zero flow reproduces the source
// bit-exactly.

template <typename S>
Tensor<S> backwarp(const Tensor<S>& source, const Tensor<S>& flow) {
  detail::require_defined(source, "backwarp", "source");
  detail::require_defined(flow, "backwarp", "flow");
  const Shape& s = source.shape();
  const Shape& f = flow.shape();
  if (f.c != 2 || f.n != s.n || f.h != s.h || f.w != s.w)
    fail("backwarp: flow shape " + f.to_string() + " incompatible with source " + s.to_string() +
         " (expected (N,2,H,W) matching source extents)");
  auto out = detail::make_node<S>(s);
  const auto sv = source.values();
  const auto fv = flow.values();
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;

  detail::parallel_batches(s.n, [&](int in) {
    const S* u = fv.data() + f.index(in, 0, 0, 0);
    const S* v = fv.data() + f.index(in, 1, 0, 0);
    for (int iy = 0; iy < s.h; ++iy)
      for (int ix = 0; ix < s.w; ++ix) {
        const std::int64_t px = static_cast<std::int64_t>(iy) * s.w + ix;
        const double sx = ix + static_cast<double>(u[px]);
        const double sy = iy + static_cast<double>(v[px]);
        if (!std::isfinite(sx) || !std::isfinite(sy)) {
          for (int ic = 0; ic < s.c; ++ic)
            out->values[s.index(in, ic, iy, ix)] = std::numeric_limits<S>::quiet_NaN();
          continue;
        }
        const int x0 = static_cast<int>(std::floor(sx));
        const int y0 = static_cast<int>(std::floor(sy));
        const double fx = sx - x0;
        const double fy = sy - y0;
        const double wgt[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
        const int cx[4] = {x0, x0 + 1, x0, x0 + 1};
        const int cy[4] = {y0, y0, y0 + 1, y0 + 1};
        for (int ic = 0; ic < s.c; ++ic) {
          const S* plane_ptr = sv.data() + static_cast<std::int64_t>(in) * s.c * plane +
                               static_cast<std::int64_t>(ic) * plane;
          double acc = 0;
          for (int k = 0; k < 4; ++k) {
            if (wgt[k] == 0.0) continue;
            if (cx[k] < 0 || cx[k] >= s.w || cy[k] < 0 || cy[k] >= s.h) continue;
            acc += wgt[k] * static_cast<double>(plane_ptr[cy[k] * s.w + cx[k]]);
          }
          out->values[s.index(in, ic, iy, ix)] = static_cast<S>(acc);
        }
      }
  });

  if (detail::any_requires_grad<S>({&source, &flow})) {
    detail::record(out, {source.node(), flow.node()},
                   [sn = source.node(), fn = flow.node(), plane](TensorNode<S>& self) {
                     const Shape& s = sn->shape;
                     const Shape& f = fn->shape;
                     if (sn->requires_grad) sn->ensure_grad();
                     if (fn->requires_grad) fn->ensure_grad();
                     detail::parallel_batches(s.n, [&](int in) {
                       const S* u = fn->values.data() + f.index(in, 0, 0, 0);
                       const S* v = fn->values.data() + f.index(in, 1, 0, 0);
                       for (int iy = 0; iy < s.h; ++iy)
                         for (int ix = 0; ix < s.w; ++ix) {
                           const std::int64_t px = static_cast<std::int64_t>(iy) * s.w + ix;
                           const double sx = ix + static_cast<double>(u[px]);
                           const double sy = iy + static_cast<double>(v[px]);
                           if (!std::isfinite(sx) || !std::isfinite(sy)) continue;
                           const int x0 = static_cast<int>(std::floor(sx));
                           const int y0 = static_cast<int>(std::floor(sy));
                           const double fx = sx - x0;
                           const double fy = sy - y0;
                           const int cx[4] = {x0, x0 + 1, x0, x0 + 1};
                           const int cy[4] = {y0, y0, y0 + 1, y0 + 1};
                           const double wgt[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx,
                                                  fy * (1 - fx), fy * fx};
                           double du = 0, dv = 0;
                           for (int ic = 0; ic < s.c; ++ic) {
                             const std::int64_t base =
                                 static_cast<std::int64_t>(in) * s.c * plane +
                                 static_cast<std::int64_t>(ic) * plane;
                             const double go =
                                 static_cast<double>(self.grad[base + px]);
                             if (go == 0.0) continue;
                             double corner[4];
                             for (int k = 0; k < 4; ++k) {
                               const bool inside = cx[k] >= 0 && cx[k] < s.w && cy[k] >= 0 &&
                                                   cy[k] < s.h;
                               corner[k] = inside
                                               ? static_cast<double>(
                                                     sn->values[base + cy[k] * s.w + cx[k]])
                                               : 0.0;
                               if (inside && sn->requires_grad)
                                 sn->grad[base + cy[k] * s.w + cx[k]] +=
                                     static_cast<S>(go * wgt[k]);
                             }
                             du += go * ((1 - fy) * (corner[1] - corner[0]) +
                                         fy * (corner[3] - corner[2]));
                             dv += go * ((1 - fx) * (corner[2] - corner[0]) +
                                         fx * (corner[3] - corner[1]));
                           }
                           if (fn->requires_grad) {
                             fn->grad[f.index(in, 0, iy, ix)] += static_cast<S>(du);
                             fn->grad[f.index(in, 1, iy, ix)] += static_cast<S>(dv);
                           }
                         }
                     });
                   });
  }
  return Tensor<S>(out);
}

// ---------------------------------------------------------------------------
// Correlation volume
//
// Channel q = (dy + R) * (2R + 1) + (dx + R) holds the channel-mean product
// of f1 at p and f2 at p + (dx, dy); out-of-bounds f2 samples count as zero.

template <typename S>
Tensor<S> correlation(const Tensor<S>& f1, const Tensor<S>& f2, int max_disp) {
  detail::require_defined(f1, "correlation", "f1");
  detail::require_defined(f2, "correlation", "f2");
  if (max_disp <= 0) fail("correlation: max_disp must be positive");
  const Shape& s = f1.shape();
  if (!(s == f2.shape()))
    fail("correlation: shape mismatch " + s.to_string() + " vs " + f2.shape().to_string());
  const int d = 2 * max_disp + 1;
  const Shape so{s.n, d * d, s.h, s.w};
  auto out = detail::make_node<S>(so);
  const auto v1 = f1.values();
  const auto v2 = f2.values();
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  const double inv_c = 1.0 / static_cast<double>(s.c);

  detail::parallel_batches(s.n, [&](int in) {
    const S* b1 = v1.data() + static_cast<std::int64_t>(in) * s.c * plane;
    const S* b2 = v2.data() + static_cast<std::int64_t>(in) * s.c * plane;
    for (int dy = -max_disp; dy <= max_disp; ++dy)
      for (int dx = -max_disp; dx <= max_disp; ++dx) {
        const int q = (dy + max_disp) * d + (dx + max_disp);
        S* oplane = out->values.data() + so.index(in, q, 0, 0);
        for (int iy = 0; iy < s.h; ++iy) {
          const int jy = iy + dy;
          if (jy < 0 || jy >= s.h) continue;  // zero already
          for (int ix = 0; ix < s.w; ++ix) {
            const int jx = ix + dx;
            if (jx < 0 || jx >= s.w) continue;
            double acc = 0;
            const S* p1 = b1 + static_cast<std::int64_t>(iy) * s.w + ix;
            const S* p2 = b2 + static_cast<std::int64_t>(jy) * s.w + jx;
            for (int ic = 0; ic < s.c; ++ic)
              acc += static_cast<double>(p1[ic * plane]) * static_cast<double>(p2[ic * plane]);
            oplane[iy * s.w + ix] = static_cast<S>(acc * inv_c);
          }
        }
      }
  });

  if (detail::any_requires_grad<S>({&f1, &f2})) {
    detail::record(
        out, {f1.node(), f2.node()},
        [n1 = f1.node(), n2 = f2.node(), max_disp, d, plane, inv_c](TensorNode<S>& self) {
          const Shape& s = n1->shape;
          const Shape& so = self.shape;
          if (n1->requires_grad) n1->ensure_grad();
          if (n2->requires_grad) n2->ensure_grad();
          detail::parallel_batches(s.n, [&](int in) {
            const std::int64_t base = static_cast<std::int64_t>(in) * s.c * plane;
            for (int dy = -max_disp; dy <= max_disp; ++dy)
              for (int dx = -max_disp; dx <= max_disp; ++dx) {
                const int q = (dy + max_disp) * d + (dx + max_disp);
                const S* g = self.grad.data() + so.index(in, q, 0, 0);
                for (int iy = 0; iy < s.h; ++iy) {
                  const int jy = iy + dy;
                  if (jy < 0 || jy >= s.h) continue;
                  for (int ix = 0; ix < s.w; ++ix) {
                    const int jx = ix + dx;
                    if (jx < 0 || jx >= s.w) continue;
                    const double go = static_cast<double>(g[iy * s.w + ix]) * inv_c;
                    if (go == 0.0) continue;
                    const std::int64_t i1 = base + static_cast<std::int64_t>(iy) * s.w + ix;
                    const std::int64_t i2 = base + static_cast<std::int64_t>(jy) * s.w + jx;
                    for (int ic = 0; ic < s.c; ++ic) {
                      if (n1->requires_grad)
                        n1->grad[i1 + ic * plane] +=
                            static_cast<S>(go * static_cast<double>(n2->values[i2 + ic * plane]));
                      if (n2->requires_grad)
                        n2->grad[i2 + ic * plane] +=
                            static_cast<S>(go * static_cast<double>(n1->values[i1 + ic * plane]));
                    }
                  }
                }
              }
          });
        });
  }
  return Tensor<S>(out);
}

// ---------------------------------------------------------------------------
// 2D convolution (im2col + GEMM)

namespace detail {

template <typename S>
void im2col(const S* x, int ci, int h, int w, int kh, int kw, int stride, int pad, int dil,
            int oh, int ow, S* col) {
  // col is K x P column-major with K = ci*kh*kw; column p holds output pixel
  // p's receptive field, channel-major then kernel-row-major.
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      S* dst = col + (static_cast<std::int64_t>(oy) * ow + ox) *
                         (static_cast<std::int64_t>(ci) * kh * kw);
      for (int c = 0; c < ci; ++c) {
        const S* plane = x + static_cast<std::int64_t>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - pad + ky * dil;
          if (iy < 0 || iy >= h) {
            for (int kx = 0; kx < kw; ++kx) *dst++ = S(0);
            continue;
          }
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride - pad + kx * dil;
            *dst++ = (ix >= 0 && ix < w) ? plane[static_cast<std::int64_t>(iy) * w + ix] : S(0);
          }
        }
      }
    }
}

template <typename S>
void col2im_add(const S* col, int ci, int h, int w, int kh, int kw, int stride, int pad, int dil,
                int oh, int ow, S* x_grad) {
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      const S* src = col + (static_cast<std::int64_t>(oy) * ow + ox) *
                               (static_cast<std::int64_t>(ci) * kh * kw);
      for (int c = 0; c < ci; ++c) {
        S* plane = x_grad + static_cast<std::int64_t>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - pad + ky * dil;
          if (iy < 0 || iy >= h) {
            src += kw;
            continue;
          }
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride - pad + kx * dil;
            if (ix >= 0 && ix < w) plane[static_cast<std::int64_t>(iy) * w + ix] += *src;
            ++src;
          }
        }
      }
    }
}

}  // namespace detail

/// Zero-padded 2D convolution. weight is (Cout, Cin, kh, kw); bias is
/// (1, Cout, 1, 1). Output spatial size follows the usual floor formula.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                 int stride = 1, int padding = 0, int dilation = 1) {
  detail::require_defined(input, "conv2d", "input");
  detail::require_defined(weight, "conv2d", "weight");
  detail::require_defined(bias, "conv2d", "bias");
  if (stride < 1) fail("conv2d: stride must be positive");
  if (dilation < 1) fail("conv2d: dilation must be positive");
  if (padding < 0) fail("conv2d: padding must be non-negative");
  const Shape& si = input.shape();
  const Shape& sw = weight.shape();
  if (sw.c != si.c)
    fail("conv2d: input has " + std::to_string(si.c) + " channels but weight " +
         sw.to_string() + " expects " + std::to_string(sw.c));
  const Shape& sb = bias.shape();
  if (!(sb == Shape{1, sw.n, 1, 1}))
    fail("conv2d: bias shape " + sb.to_string() + " must be (1," + std::to_string(sw.n) + ",1,1)");
  const int oh = (si.h + 2 * padding - dilation * (sw.h - 1) - 1) / stride + 1;
  const int ow = (si.w + 2 * padding - dilation * (sw.w - 1) - 1) / stride + 1;
  if (oh < 1 || ow < 1)
    fail("conv2d: output would be empty for input " + si.to_string() + " with kernel " +
         sw.to_string());
  const Shape so{si.n, sw.n, oh, ow};
  auto out = detail::make_node<S>(so);

  using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatCM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
  const std::int64_t k = static_cast<std::int64_t>(sw.c) * sw.h * sw.w;
  const std::int64_t p = static_cast<std::int64_t>(oh) * ow;
  const std::int64_t in_plane = static_cast<std::int64_t>(si.c) * si.h * si.w;
  const std::int64_t out_plane = static_cast<std::int64_t>(so.c) * p;

  Eigen::Map<const MatRM> wmat(weight.values().data(), sw.n, k);
  Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> bvec(bias.values().data(), sw.n);

  detail::parallel_batches(si.n, [&](int in) {
    std::vector<S> colbuf(static_cast<std::size_t>(k * p));
    detail::im2col(input.values().data() + in * in_plane, si.c, si.h, si.w, sw.h, sw.w, stride,
                   padding, dilation, oh, ow, colbuf.data());
    Eigen::Map<const MatCM> colmat(colbuf.data(), k, p);
    Eigen::Map<MatRM> ymat(out->values.data() + in * out_plane, sw.n, p);
    ymat.noalias() = wmat * colmat;
    ymat.colwise() += bvec;
  });

  if (detail::any_requires_grad<S>({&input, &weight, &bias})) {
    detail::record(
        out, {input.node(), weight.node(), bias.node()},
        [xn = input.node(), wn = weight.node(), bn = bias.node(), stride, padding, dilation, oh,
         ow, k, p, in_plane, out_plane](TensorNode<S>& self) {
          const Shape& si = xn->shape;
          const Shape& sw = wn->shape;
          if (xn->requires_grad) xn->ensure_grad();
          if (wn->requires_grad) wn->ensure_grad();
          if (bn->requires_grad) bn->ensure_grad();
          Eigen::Map<const MatRM> wmat(wn->values.data(), sw.n, k);

          // Per-item weight/bias contributions are reduced in batch order so
          // the result does not depend on thread scheduling.
          std::vector<std::vector<S>> dw_parts, db_parts;
          if (wn->requires_grad) dw_parts.assign(si.n, {});
          if (bn->requires_grad) db_parts.assign(si.n, {});

          detail::parallel_batches(si.n, [&](int in) {
            std::vector<S> colbuf(static_cast<std::size_t>(k * p));
            detail::im2col(xn->values.data() + in * in_plane, si.c, si.h, si.w, sw.h, sw.w,
                           stride, padding, dilation, oh, ow, colbuf.data());
            Eigen::Map<const MatCM> colmat(colbuf.data(), k, p);
            Eigen::Map<const MatRM> gmat(self.grad.data() + in * out_plane, sw.n, p);
            if (wn->requires_grad) {
              dw_parts[in].resize(static_cast<std::size_t>(sw.n * k));
              Eigen::Map<MatRM> dwmat(dw_parts[in].data(), sw.n, k);
              dwmat.noalias() = gmat * colmat.transpose();
            }
            if (bn->requires_grad) {
              // fixed-order reduction; vectorized reductions would make the
              // low bits depend on buffer alignment
              db_parts[in].resize(static_cast<std::size_t>(sw.n));
              const S* g = self.grad.data() + in * out_plane;
              for (int co = 0; co < sw.n; ++co) {
                double acc = 0;
                for (std::int64_t px = 0; px < p; ++px)
                  acc += static_cast<double>(g[co * p + px]);
                db_parts[in][static_cast<std::size_t>(co)] = static_cast<S>(acc);
              }
            }
            if (xn->requires_grad) {
              std::vector<S> dcol(static_cast<std::size_t>(k * p));
              Eigen::Map<MatCM> dcolmat(dcol.data(), k, p);
              dcolmat.noalias() = wmat.transpose() * gmat;
              detail::col2im_add(dcol.data(), si.c, si.h, si.w, sw.h, sw.w, stride, padding,
                                 dilation, oh, ow, xn->grad.data() + in * in_plane);
            }
          });

          if (wn->requires_grad)
            for (int in = 0; in < si.n; ++in)
              for (std::size_t i = 0; i < dw_parts[in].size(); ++i)
                wn->grad[i] += dw_parts[in][i];
          if (bn->requires_grad)
            for (int in = 0; in < si.n; ++in)
              for (std::size_t i = 0; i < db_parts[in].size(); ++i)
                bn->grad[i] += db_parts[in][i];
        });
  }
  return Tensor<S>(out);
}

}  // namespace lidarflow
