// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stgmfm/error.hpp"
#include "stgmfm/rng.hpp"
#include "stgmfm/tensor.hpp"

namespace stgmfm::ad {

/// Reverse-mode tape. Operations append nodes holding the forward value and a
/// pullback closure; backward() walks the tape once in reverse and accumulates
/// vector-Jacobian products into per-node gradient slots.
///
/// Conventions:
///  - tensors are dense row-major, the last axis contiguous;
///  - matmul is strictly 2-D, batching is expressed with reshape/permute;
///  - scalars are tensors of shape (1);
///  - relu/abs use subgradient 0 at the kink.
template <class T>
class Tape {
public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// When false, ops still compute values but record no pullbacks and mark
  /// nothing differentiable; backward() is then unavailable.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  std::size_t size() const { return nodes_.size(); }

  const Tensor<T>& val(Var v) const { return nodes_[check(v)].value; }

  /// Gradient of the last backward() target w.r.t. v. Zero tensor if v did not
  /// participate.
  Tensor<T> grad(Var v) const {
    int id = check(v);
    if (id < static_cast<int>(grads_.size()) && !grads_[id].data.empty())
      return grads_[id];
    return Tensor<T>::zeros(nodes_[id].value.shape);
  }

  // ---- leaves ----

  /// Non-differentiable constant (data, masks, precomputed features).
  Var input(Tensor<T> v) { return push(std::move(v), false, {}); }

  /// Differentiable leaf (parameters).
  Var leaf(Tensor<T> v) { return push(std::move(v), grad_enabled_, {}); }

  // ---- elementwise binary ----

  Var add(Var a, Var b) {
    const Tensor<T>&A = val(a), &B = val(b);
    require_same(A, B, "add");
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += B[i];
    return unary_or_binary(std::move(out), a, b, [](Tape& t, const Tensor<T>& g, int pa, int pb) {
      if (auto* ga = t.gslot(pa))
        for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
      if (auto* gb = t.gslot(pb))
        for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i];
    });
  }

  Var sub(Var a, Var b) {
    const Tensor<T>&A = val(a), &B = val(b);
    require_same(A, B, "sub");
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= B[i];
    return unary_or_binary(std::move(out), a, b, [](Tape& t, const Tensor<T>& g, int pa, int pb) {
      if (auto* ga = t.gslot(pa))
        for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
      if (auto* gb = t.gslot(pb))
        for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
    });
  }

  Var mul(Var a, Var b) {
    const Tensor<T>&A = val(a), &B = val(b);
    require_same(A, B, "mul");
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
    return unary_or_binary(std::move(out), a, b, [](Tape& t, const Tensor<T>& g, int pa, int pb) {
      if (auto* ga = t.gslot(pa)) {
        const Tensor<T>& B2 = t.nodes_[pb].value;
        for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * B2[i];
      }
      if (auto* gb = t.gslot(pb)) {
        const Tensor<T>& A2 = t.nodes_[pa].value;
        for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * A2[i];
      }
    });
  }

  /// Elementwise product with a non-differentiable mask; the dropout
  /// primitive. The mask is captured as an input node.
  Var dropout(Var x, Tensor<T> mask) {
    Var m = input(std::move(mask));
    return mul(x, m);
  }

  // ---- scalar ops (constant scalar) ----

  Var scale(Var a, T c) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v *= c;
    return unary(std::move(out), a, [c](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa))
        for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += c * g[i];
    });
  }

  Var add_scalar(Var a, T c) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v += c;
    return unary(std::move(out), a, [](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa))
        for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
    });
  }

  Var neg(Var a) { return scale(a, T(-1)); }

  /// Product with a differentiable scalar of shape (1).
  Var mul_scalar_var(Var x, Var s) {
    const Tensor<T>& X = val(x);
    const Tensor<T>& S = val(s);
    if (S.numel() != 1)
      fail("shape-mismatch", "mul_scalar_var: scalar operand has shape " + shape_str(S.shape));
    Tensor<T> out = X;
    T sv = S[0];
    for (auto& v : out.data) v *= sv;
    return unary_or_binary(std::move(out), x, s, [](Tape& t, const Tensor<T>& g, int px, int ps) {
      const Tensor<T>& X2 = t.nodes_[px].value;
      const Tensor<T>& S2 = t.nodes_[ps].value;
      if (auto* gx = t.gslot(px))
        for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * S2[0];
      if (auto* gs = t.gslot(ps)) {
        T acc = 0;
        for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * X2[i];
        (*gs)[0] += acc;
      }
    });
  }

  // ---- shape ops ----

  Var reshape(Var a, Shape s) {
    const Tensor<T>& A = val(a);
    if (shape_numel(s) != A.numel())
      fail("shape-mismatch", "reshape: cannot view " + shape_str(A.shape) + " as " + shape_str(s));
    Tensor<T> out(s, A.data);
    Shape back = A.shape;
    return unary(std::move(out), a, [back](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa))
        for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
    });
  }

  Var transpose2(Var a) {
    const Tensor<T>& A = val(a);
    if (A.rank() != 2) fail("shape-mismatch", "transpose2: rank-2 required, got " + shape_str(A.shape));
    int m = A.dim(0), n = A.dim(1);
    Tensor<T> out({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at2(j, i) = A.at2(i, j);
    return unary(std::move(out), a, [m, n](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa))
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) ga->at2(i, j) += g.at2(j, i);
    });
  }

  Var permute(Var a, std::vector<int> perm) {
    const Tensor<T>& A = val(a);
    int r = A.rank();
    if (static_cast<int>(perm.size()) != r)
      fail("shape-mismatch", "permute: axis list size does not match rank of " + shape_str(A.shape));
    std::vector<char> seen(static_cast<std::size_t>(r), 0);
    for (int p : perm) {
      if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)])
        fail("shape-mismatch", "permute: invalid axis permutation");
      seen[static_cast<std::size_t>(p)] = 1;
    }
    Tensor<T> out = permute_copy(A, perm);
    std::vector<int> inv(perm.size());
    for (int i = 0; i < r; ++i) inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
    return unary(std::move(out), a, [inv](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa)) {
        Tensor<T> gb = permute_copy(g, inv);
        for (std::size_t i = 0; i < gb.numel(); ++i) (*ga)[i] += gb[i];
      }
    });
  }

  Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) fail("shape-mismatch", "concat: empty part list");
    const Tensor<T>& first = val(parts[0]);
    int r = first.rank();
    if (axis < 0 || axis >= r) fail("shape-mismatch", "concat: axis out of range");
    Shape out_shape = first.shape;
    std::vector<int> sizes;
    sizes.reserve(parts.size());
    sizes.push_back(first.dim(axis));
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const Tensor<T>& p = val(parts[i]);
      if (p.rank() != r) fail("shape-mismatch", "concat: rank mismatch");
      for (int d = 0; d < r; ++d)
        if (d != axis && p.dim(d) != first.dim(d))
          fail("shape-mismatch", "concat: incompatible shapes " + shape_str(first.shape) + " and " + shape_str(p.shape));
      sizes.push_back(p.dim(axis));
      out_shape[static_cast<std::size_t>(axis)] += p.dim(axis);
    }
    // outer = product of dims before axis, inner = product after.
    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(first.dim(d));
    for (int d = axis + 1; d < r; ++d) inner *= static_cast<std::size_t>(first.dim(d));
    Tensor<T> out(out_shape);
    std::size_t off = 0;
    std::size_t total_axis = static_cast<std::size_t>(out_shape[static_cast<std::size_t>(axis)]);
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const Tensor<T>& p = val(parts[pi]);
      std::size_t pa = static_cast<std::size_t>(sizes[pi]);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t x = 0; x < pa; ++x)
          std::copy_n(p.ptr() + (o * pa + x) * inner, inner,
                      out.ptr() + (o * total_axis + off + x) * inner);
      off += pa;
    }
    std::vector<int> ids(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) ids[i] = check(parts[i]);
    bool any = false;
    for (int id : ids) any = any || nodes_[id].needs_grad;
    if (!grad_enabled_ || !any) return push(std::move(out), false, {});
    auto vjp = [ids, sizes, outer, inner, total_axis](Tape& t, const Tensor<T>& g) {
      std::size_t off2 = 0;
      for (std::size_t pi = 0; pi < ids.size(); ++pi) {
        std::size_t pa = static_cast<std::size_t>(sizes[pi]);
        if (auto* gp = t.gslot(ids[pi])) {
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t x = 0; x < pa; ++x) {
              const T* src = g.ptr() + (o * total_axis + off2 + x) * inner;
              T* dst = gp->ptr() + (o * pa + x) * inner;
              for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
        }
        off2 += pa;
      }
    };
    return push(std::move(out), true, std::move(vjp));
  }

  Var slice(Var a, int axis, int start, int stop) {
    const Tensor<T>& A = val(a);
    int r = A.rank();
    if (axis < 0 || axis >= r) fail("shape-mismatch", "slice: axis out of range");
    int n = A.dim(axis);
    if (start < 0 || stop > n || start >= stop)
      fail("shape-mismatch", "slice: range [" + std::to_string(start) + "," + std::to_string(stop) +
                                 ") invalid for axis size " + std::to_string(n));
    Shape out_shape = A.shape;
    out_shape[static_cast<std::size_t>(axis)] = stop - start;
    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(A.dim(d));
    for (int d = axis + 1; d < r; ++d) inner *= static_cast<std::size_t>(A.dim(d));
    std::size_t na = static_cast<std::size_t>(n), w = static_cast<std::size_t>(stop - start);
    Tensor<T> out(out_shape);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(A.ptr() + (o * na + static_cast<std::size_t>(start)) * inner, w * inner,
                  out.ptr() + o * w * inner);
    return unary(std::move(out), a,
                 [outer, inner, na, w, start](Tape& t, const Tensor<T>& g, int pa) {
                   if (auto* ga = t.gslot(pa)) {
                     for (std::size_t o = 0; o < outer; ++o) {
                       const T* src = g.ptr() + o * w * inner;
                       T* dst = ga->ptr() + (o * na + static_cast<std::size_t>(start)) * inner;
                       for (std::size_t i = 0; i < w * inner; ++i) dst[i] += src[i];
                     }
                   }
                 });
  }

  // ---- matmul ----

  Var matmul(Var a, Var b) {
    const Tensor<T>&A = val(a), &B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
      fail("shape-mismatch", "matmul: incompatible shapes " + shape_str(A.shape) + " and " + shape_str(B.shape));
    int m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor<T> out({m, n});
    matmul_nn(A.ptr(), B.ptr(), out.ptr(), m, k, n);
    return unary_or_binary(std::move(out), a, b, [m, k, n](Tape& t, const Tensor<T>& g, int pa, int pb) {
      const Tensor<T>& A2 = t.nodes_[pa].value;
      const Tensor<T>& B2 = t.nodes_[pb].value;
      if (auto* ga = t.gslot(pa)) matmul_nt_acc(g.ptr(), B2.ptr(), ga->ptr(), m, n, k);
      if (auto* gb = t.gslot(pb)) matmul_tn_acc(A2.ptr(), g.ptr(), gb->ptr(), k, m, n);
    });
  }

  // ---- reductions ----

  Var sum_axis(Var a, int axis) { return reduce_axis(a, axis, false); }
  Var mean_axis(Var a, int axis) { return reduce_axis(a, axis, true); }

  Var sum_all(Var a) {
    const Tensor<T>& A = val(a);
    T acc = 0;
    for (auto v : A.data) acc += v;
    std::size_t n = A.numel();
    return unary(Tensor<T>::scalar(acc), a, [n](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa))
        for (std::size_t i = 0; i < n; ++i) (*ga)[i] += g[0];
    });
  }

  Var mean_all(Var a) {
    const Tensor<T>& A = val(a);
    return scale(sum_all(a), T(1) / static_cast<T>(A.numel()));
  }

  // ---- elementwise nonlinearities ----

  Var relu(Var a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return unary(std::move(out), a, [](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa)) {
        const Tensor<T>& A2 = t.nodes_[pa].value;
        for (std::size_t i = 0; i < g.numel(); ++i)
          if (A2[i] > T(0)) (*ga)[i] += g[i];
      }
    });
  }

  /// Exact GELU: x * Phi(x) with the Gaussian CDF.
  Var gelu(Var a) {
    const Tensor<T>& A = val(a);
    Tensor<T> out = A;
    for (auto& v : out.data) v = v * gauss_cdf(v);
    return unary(std::move(out), a, [](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa)) {
        const Tensor<T>& A2 = t.nodes_[pa].value;
        for (std::size_t i = 0; i < g.numel(); ++i) {
          T x = A2[i];
          (*ga)[i] += g[i] * (gauss_cdf(x) + x * gauss_pdf(x));
        }
      }
    });
  }

  Var sigmoid(Var a) {
    const Tensor<T>& A = val(a);
    Tensor<T> out = A;
    for (auto& v : out.data) v = sigm(v);
    return unary(std::move(out), a, [](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa)) {
        const Tensor<T>& A2 = t.nodes_[pa].value;
        for (std::size_t i = 0; i < g.numel(); ++i) {
          T s = sigm(A2[i]);
          (*ga)[i] += g[i] * s * (T(1) - s);
        }
      }
    });
  }

  Var abs_(Var a) {
    const Tensor<T>& A = val(a);
    Tensor<T> out = A;
    for (auto& v : out.data) v = std::abs(v);
    return unary(std::move(out), a, [](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa)) {
        const Tensor<T>& A2 = t.nodes_[pa].value;
        for (std::size_t i = 0; i < g.numel(); ++i) {
          if (A2[i] > T(0)) (*ga)[i] += g[i];
          else if (A2[i] < T(0)) (*ga)[i] -= g[i];
        }
      }
    });
  }

  /// y = 1/sqrt(max(x, eps)); gradient is zero on the clamped region.
  Var rsqrt_eps(Var a, T eps) {
    const Tensor<T>& A = val(a);
    Tensor<T> out = A;
    for (auto& v : out.data) v = T(1) / std::sqrt(v > eps ? v : eps);
    return unary(std::move(out), a, [eps](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa)) {
        const Tensor<T>& A2 = t.nodes_[pa].value;
        for (std::size_t i = 0; i < g.numel(); ++i) {
          if (A2[i] > eps) {
            T y = T(1) / std::sqrt(A2[i]);
            (*ga)[i] += g[i] * (T(-0.5) * y * y * y);
          }
        }
      }
    });
  }

  /// Zero the main diagonal of a square matrix.
  Var zero_diag(Var a) {
    const Tensor<T>& A = val(a);
    if (A.rank() != 2 || A.dim(0) != A.dim(1))
      fail("shape-mismatch", "zero_diag: square matrix required, got " + shape_str(A.shape));
    int n = A.dim(0);
    Tensor<T> out = A;
    for (int i = 0; i < n; ++i) out.at2(i, i) = T(0);
    return unary(std::move(out), a, [n](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa)) {
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j)
            if (i != j) ga->at2(i, j) += g.at2(i, j);
      }
    });
  }

  // ---- softmax and loss ----

  /// Softmax over the last axis.
  Var softmax_last(Var a) {
    const Tensor<T>& A = val(a);
    if (A.rank() < 1) fail("shape-mismatch", "softmax_last: rank >= 1 required");
    int k = A.dim(A.rank() - 1);
    std::size_t rows = A.numel() / static_cast<std::size_t>(k);
    Tensor<T> out = A;
    for (std::size_t r = 0; r < rows; ++r) softmax_row(out.ptr() + r * static_cast<std::size_t>(k), k);
    return unary(std::move(out), a, [rows, k](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa)) {
        // Need this node's own output; it is the node the pullback belongs to,
        // which is the last parent-visible value, so recompute from input.
        const Tensor<T>& A2 = t.nodes_[pa].value;
        std::vector<T> s(static_cast<std::size_t>(k));
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xin = A2.ptr() + r * static_cast<std::size_t>(k);
          std::copy_n(xin, k, s.data());
          softmax_row(s.data(), k);
          const T* gr = g.ptr() + r * static_cast<std::size_t>(k);
          T dot = 0;
          for (int i = 0; i < k; ++i) dot += gr[i] * s[static_cast<std::size_t>(i)];
          T* out_g = ga->ptr() + r * static_cast<std::size_t>(k);
          for (int i = 0; i < k; ++i)
            out_g[i] += s[static_cast<std::size_t>(i)] * (gr[i] - dot);
        }
      }
    });
  }

  /// Mean cross-entropy of logits (N,K) against integer labels, fused with the
  /// softmax for numerical stability. Returns a scalar.
  Var softmax_xent(Var logits, const std::vector<int>& labels) {
    const Tensor<T>& L = val(logits);
    if (L.rank() != 2) fail("shape-mismatch", "softmax_xent: logits must be rank-2, got " + shape_str(L.shape));
    int n = L.dim(0), k = L.dim(1);
    if (static_cast<int>(labels.size()) != n)
      fail("shape-mismatch", "softmax_xent: label count " + std::to_string(labels.size()) +
                                 " does not match batch size " + std::to_string(n));
    for (int y : labels)
      if (y < 0 || y >= k) fail("label-out-of-range", "softmax_xent: label " + std::to_string(y));
    T loss = 0;
    for (int r = 0; r < n; ++r) {
      const T* row = L.ptr() + static_cast<std::size_t>(r) * k;
      T mx = row[0];
      for (int i = 1; i < k; ++i) mx = std::max(mx, row[i]);
      T lse = 0;
      for (int i = 0; i < k; ++i) lse += std::exp(row[i] - mx);
      lse = mx + std::log(lse);
      loss += lse - row[labels[static_cast<std::size_t>(r)]];
    }
    loss /= static_cast<T>(n);
    auto labs = labels;
    return unary(Tensor<T>::scalar(loss), logits, [n, k, labs](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa)) {
        const Tensor<T>& L2 = t.nodes_[pa].value;
        T scale_g = g[0] / static_cast<T>(n);
        std::vector<T> p(static_cast<std::size_t>(k));
        for (int r = 0; r < n; ++r) {
          const T* row = L2.ptr() + static_cast<std::size_t>(r) * k;
          std::copy_n(row, k, p.data());
          softmax_row(p.data(), k);
          T* gr = ga->ptr() + static_cast<std::size_t>(r) * k;
          for (int i = 0; i < k; ++i) {
            T delta = (i == labs[static_cast<std::size_t>(r)]) ? T(1) : T(0);
            gr[i] += scale_g * (p[static_cast<std::size_t>(i)] - delta);
          }
        }
      }
    });
  }

  // ---- convolutions (1-D, stride 1, zero "same" padding) ----

  /// Depthwise: x (..., C, L) convolved per channel with kernels k (C, K),
  /// K odd. Output shape equals input shape.
  Var conv1d_dw(Var x, Var kern) {
    const Tensor<T>& X = val(x);
    const Tensor<T>& K = val(kern);
    if (X.rank() < 2 || K.rank() != 2)
      fail("shape-mismatch", "conv1d_dw: need x rank>=2 and kernel rank-2, got " +
                                 shape_str(X.shape) + " and " + shape_str(K.shape));
    int C = X.dim(X.rank() - 2), L = X.dim(X.rank() - 1);
    int kc = K.dim(0), kw = K.dim(1);
    if (kc != C) fail("shape-mismatch", "conv1d_dw: kernel channels " + std::to_string(kc) +
                                            " do not match input channels " + std::to_string(C));
    if (kw % 2 == 0) fail("shape-mismatch", "conv1d_dw: kernel width must be odd, got " + std::to_string(kw));
    std::size_t batch = X.numel() / (static_cast<std::size_t>(C) * L);
    int off = (kw - 1) / 2;
    Tensor<T> out(X.shape);
    for (std::size_t b = 0; b < batch; ++b)
      for (int c = 0; c < C; ++c) {
        const T* xin = X.ptr() + (b * C + static_cast<std::size_t>(c)) * L;
        const T* kc_ptr = K.ptr() + static_cast<std::size_t>(c) * kw;
        T* o = out.ptr() + (b * C + static_cast<std::size_t>(c)) * L;
        for (int t2 = 0; t2 < L; ++t2) {
          T acc = 0;
          int j0 = std::max(0, off - t2);
          int j1 = std::min(kw, L + off - t2);
          for (int j = j0; j < j1; ++j) acc += xin[t2 + j - off] * kc_ptr[j];
          o[t2] = acc;
        }
      }
    return unary_or_binary(std::move(out), x, kern,
                           [batch, C, L, kw, off](Tape& t, const Tensor<T>& g, int px, int pk) {
      const Tensor<T>& X2 = t.nodes_[px].value;
      const Tensor<T>& K2 = t.nodes_[pk].value;
      auto* gx = t.gslot(px);
      auto* gk = t.gslot(pk);
      for (std::size_t b = 0; b < batch; ++b)
        for (int c = 0; c < C; ++c) {
          const T* gr = g.ptr() + (b * static_cast<std::size_t>(C) + c) * L;
          const T* xin = X2.ptr() + (b * static_cast<std::size_t>(C) + c) * L;
          const T* kc_ptr = K2.ptr() + static_cast<std::size_t>(c) * kw;
          T* gxr = gx ? gx->ptr() + (b * static_cast<std::size_t>(C) + c) * L : nullptr;
          T* gkr = gk ? gk->ptr() + static_cast<std::size_t>(c) * kw : nullptr;
          for (int t2 = 0; t2 < L; ++t2) {
            int j0 = std::max(0, off - t2);
            int j1 = std::min(kw, L + off - t2);
            for (int j = j0; j < j1; ++j) {
              if (gxr) gxr[t2 + j - off] += gr[t2] * kc_ptr[j];
              if (gkr) gkr[j] += gr[t2] * xin[t2 + j - off];
            }
          }
        }
    });
  }

  /// Pointwise: x (..., C_in, L) mixed across channels by w (C_out, C_in).
  Var conv1d_pw(Var x, Var w) {
    const Tensor<T>& X = val(x);
    const Tensor<T>& W = val(w);
    if (X.rank() < 2 || W.rank() != 2)
      fail("shape-mismatch", "conv1d_pw: need x rank>=2 and weight rank-2");
    int Cin = X.dim(X.rank() - 2), L = X.dim(X.rank() - 1);
    int Cout = W.dim(0);
    if (W.dim(1) != Cin)
      fail("shape-mismatch", "conv1d_pw: weight " + shape_str(W.shape) +
                                 " does not match input channels " + std::to_string(Cin));
    std::size_t batch = X.numel() / (static_cast<std::size_t>(Cin) * L);
    Shape out_shape = X.shape;
    out_shape[out_shape.size() - 2] = Cout;
    Tensor<T> out(out_shape);
    for (std::size_t b = 0; b < batch; ++b)
      matmul_nn(W.ptr(), X.ptr() + b * Cin * static_cast<std::size_t>(L),
                out.ptr() + b * Cout * static_cast<std::size_t>(L), Cout, Cin, L);
    return unary_or_binary(std::move(out), x, w,
                           [batch, Cin, Cout, L](Tape& t, const Tensor<T>& g, int px, int pw) {
      const Tensor<T>& X2 = t.nodes_[px].value;
      const Tensor<T>& W2 = t.nodes_[pw].value;
      if (auto* gx = t.gslot(px))
        for (std::size_t b = 0; b < batch; ++b)
          matmul_tn_acc(W2.ptr(), g.ptr() + b * Cout * static_cast<std::size_t>(L),
                        gx->ptr() + b * Cin * static_cast<std::size_t>(L), Cin, Cout, L);
      if (auto* gw = t.gslot(pw))
        for (std::size_t b = 0; b < batch; ++b)
          matmul_nt_acc(g.ptr() + b * Cout * static_cast<std::size_t>(L),
                        X2.ptr() + b * Cin * static_cast<std::size_t>(L), gw->ptr(), Cout, L, Cin);
    });
  }

  // ---- normalization ----

  /// Layer normalization over the last axis with learnable gain/shift.
  Var layernorm_last(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const Tensor<T>& X = val(x);
    const Tensor<T>& G = val(gamma);
    const Tensor<T>& B = val(beta);
    int d = X.dim(X.rank() - 1);
    if (G.rank() != 1 || B.rank() != 1 || G.dim(0) != d || B.dim(0) != d)
      fail("shape-mismatch", "layernorm_last: gain/shift must be rank-1 of size " + std::to_string(d));
    std::size_t rows = X.numel() / static_cast<std::size_t>(d);
    Tensor<T> out(X.shape);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xin = X.ptr() + r * static_cast<std::size_t>(d);
      T* o = out.ptr() + r * static_cast<std::size_t>(d);
      T mu = 0;
      for (int i = 0; i < d; ++i) mu += xin[i];
      mu /= static_cast<T>(d);
      T var = 0;
      for (int i = 0; i < d; ++i) var += (xin[i] - mu) * (xin[i] - mu);
      var /= static_cast<T>(d);
      T inv = T(1) / std::sqrt(var + eps);
      for (int i = 0; i < d; ++i) o[i] = G[static_cast<std::size_t>(i)] * (xin[i] - mu) * inv + B[static_cast<std::size_t>(i)];
    }
    int px0 = check(x), pg0 = check(gamma), pb0 = check(beta);
    bool any = nodes_[px0].needs_grad || nodes_[pg0].needs_grad || nodes_[pb0].needs_grad;
    if (!grad_enabled_ || !any) return push(std::move(out), false, {});
    auto vjp = [px0, pg0, pb0, rows, d, eps](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& X2 = t.nodes_[px0].value;
      const Tensor<T>& G2 = t.nodes_[pg0].value;
      auto* gx = t.gslot(px0);
      auto* gg = t.gslot(pg0);
      auto* gb = t.gslot(pb0);
      std::vector<T> xhat(static_cast<std::size_t>(d));
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xin = X2.ptr() + r * static_cast<std::size_t>(d);
        const T* gr = g.ptr() + r * static_cast<std::size_t>(d);
        T mu = 0;
        for (int i = 0; i < d; ++i) mu += xin[i];
        mu /= static_cast<T>(d);
        T var = 0;
        for (int i = 0; i < d; ++i) var += (xin[i] - mu) * (xin[i] - mu);
        var /= static_cast<T>(d);
        T inv = T(1) / std::sqrt(var + eps);
        for (int i = 0; i < d; ++i) xhat[static_cast<std::size_t>(i)] = (xin[i] - mu) * inv;
        if (gg)
          for (int i = 0; i < d; ++i) (*gg)[static_cast<std::size_t>(i)] += gr[i] * xhat[static_cast<std::size_t>(i)];
        if (gb)
          for (int i = 0; i < d; ++i) (*gb)[static_cast<std::size_t>(i)] += gr[i];
        if (gx) {
          // gxhat = g * gamma; gx = inv * (gxhat - mean(gxhat) - xhat*mean(gxhat*xhat))
          T m1 = 0, m2 = 0;
          for (int i = 0; i < d; ++i) {
            T gh = gr[i] * G2[static_cast<std::size_t>(i)];
            m1 += gh;
            m2 += gh * xhat[static_cast<std::size_t>(i)];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          T* gxr = gx->ptr() + r * static_cast<std::size_t>(d);
          for (int i = 0; i < d; ++i) {
            T gh = gr[i] * G2[static_cast<std::size_t>(i)];
            gxr[i] += inv * (gh - m1 - xhat[static_cast<std::size_t>(i)] * m2);
          }
        }
      }
    };
    return push(std::move(out), true, std::move(vjp));
  }

  // ---- broadcast bias ----

  /// Add a 1-D bias along the given axis.
  Var bias_add(Var x, Var b, int axis) {
    const Tensor<T>& X = val(x);
    const Tensor<T>& B = val(b);
    int r = X.rank();
    if (axis < 0 || axis >= r) fail("shape-mismatch", "bias_add: axis out of range");
    if (B.rank() != 1 || B.dim(0) != X.dim(axis))
      fail("shape-mismatch", "bias_add: bias " + shape_str(B.shape) + " does not match axis size " +
                                 std::to_string(X.dim(axis)));
    std::size_t outer = 1, inner = 1;
    for (int d2 = 0; d2 < axis; ++d2) outer *= static_cast<std::size_t>(X.dim(d2));
    for (int d2 = axis + 1; d2 < r; ++d2) inner *= static_cast<std::size_t>(X.dim(d2));
    std::size_t n = static_cast<std::size_t>(X.dim(axis));
    Tensor<T> out = X;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < n; ++i) {
        T bv = B[i];
        T* dst = out.ptr() + (o * n + i) * inner;
        for (std::size_t j = 0; j < inner; ++j) dst[j] += bv;
      }
    return unary_or_binary(std::move(out), x, b,
                           [outer, inner, n](Tape& t, const Tensor<T>& g, int px, int pb) {
      if (auto* gx = t.gslot(px))
        for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
      if (auto* gb = t.gslot(pb))
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < n; ++i) {
            const T* src = g.ptr() + (o * n + i) * inner;
            T acc = 0;
            for (std::size_t j = 0; j < inner; ++j) acc += src[j];
            (*gb)[i] += acc;
          }
    });
  }

  // ---- resampling along the last axis ----

  /// Average adjacent pairs; a trailing odd element is dropped.
  Var avgpool2_last(Var x) {
    const Tensor<T>& X = val(x);
    int L = X.dim(X.rank() - 1);
    int Lo = L / 2;
    if (Lo < 1) fail("shape-mismatch", "avgpool2_last: axis too short to pool");
    std::size_t rows = X.numel() / static_cast<std::size_t>(L);
    Shape out_shape = X.shape;
    out_shape.back() = Lo;
    Tensor<T> out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xin = X.ptr() + r * static_cast<std::size_t>(L);
      T* o = out.ptr() + r * static_cast<std::size_t>(Lo);
      for (int t2 = 0; t2 < Lo; ++t2) o[t2] = (xin[2 * t2] + xin[2 * t2 + 1]) * T(0.5);
    }
    return unary(std::move(out), x, [rows, L, Lo](Tape& t, const Tensor<T>& g, int px) {
      if (auto* gx = t.gslot(px))
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.ptr() + r * static_cast<std::size_t>(Lo);
          T* gxr = gx->ptr() + r * static_cast<std::size_t>(L);
          for (int t2 = 0; t2 < Lo; ++t2) {
            gxr[2 * t2] += gr[t2] * T(0.5);
            gxr[2 * t2 + 1] += gr[t2] * T(0.5);
          }
        }
    });
  }

  /// Nearest-neighbour 2x upsample to an explicit output length:
  /// out[t] = x[min(t/2, L_in-1)].
  Var upsample2_last(Var x, int L_out) {
    const Tensor<T>& X = val(x);
    int L = X.dim(X.rank() - 1);
    if (L_out < 1) fail("shape-mismatch", "upsample2_last: output length must be positive");
    std::size_t rows = X.numel() / static_cast<std::size_t>(L);
    Shape out_shape = X.shape;
    out_shape.back() = L_out;
    Tensor<T> out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xin = X.ptr() + r * static_cast<std::size_t>(L);
      T* o = out.ptr() + r * static_cast<std::size_t>(L_out);
      for (int t2 = 0; t2 < L_out; ++t2) o[t2] = xin[std::min(t2 / 2, L - 1)];
    }
    return unary(std::move(out), x, [rows, L, L_out](Tape& t, const Tensor<T>& g, int px) {
      if (auto* gx = t.gslot(px))
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.ptr() + r * static_cast<std::size_t>(L_out);
          T* gxr = gx->ptr() + r * static_cast<std::size_t>(L);
          for (int t2 = 0; t2 < L_out; ++t2) gxr[std::min(t2 / 2, L - 1)] += gr[t2];
        }
    });
  }

  // ---- structured parameterizations ----

  /// Materialize symmetric (zero-phase) kernels from half-kernels:
  /// h (C, H) -> k (C, 2H-1) with k[c,j] = h[c, min(j, 2H-2-j)].
  Var sym_kernel(Var h) {
    const Tensor<T>& H = val(h);
    if (H.rank() != 2) fail("shape-mismatch", "sym_kernel: rank-2 required");
    int C = H.dim(0), Hw = H.dim(1);
    int Kw = 2 * Hw - 1;
    Tensor<T> out({C, Kw});
    for (int c = 0; c < C; ++c)
      for (int j = 0; j < Kw; ++j) out.at2(c, j) = H.at2(c, std::min(j, Kw - 1 - j));
    return unary(std::move(out), h, [C, Hw, Kw](Tape& t, const Tensor<T>& g, int ph) {
      if (auto* gh = t.gslot(ph))
        for (int c = 0; c < C; ++c)
          for (int j = 0; j < Kw; ++j) gh->at2(c, std::min(j, Kw - 1 - j)) += g.at2(c, j);
    });
  }

  /// Per-channel linear projection: x (..., C, L) with P (C, D, L) gives
  /// out (..., C, D), out[b,c,:] = P[c] . x[b,c,:].
  Var channel_proj(Var x, Var p) {
    const Tensor<T>& X = val(x);
    const Tensor<T>& P = val(p);
    if (X.rank() < 2 || P.rank() != 3)
      fail("shape-mismatch", "channel_proj: need x rank>=2 and projector rank-3");
    int C = X.dim(X.rank() - 2), L = X.dim(X.rank() - 1);
    if (P.dim(0) != C || P.dim(2) != L)
      fail("shape-mismatch", "channel_proj: projector " + shape_str(P.shape) +
                                 " does not match input " + shape_str(X.shape));
    int D = P.dim(1);
    std::size_t batch = X.numel() / (static_cast<std::size_t>(C) * L);
    Shape out_shape = X.shape;
    out_shape.back() = D;
    Tensor<T> out(out_shape);
    for (std::size_t b = 0; b < batch; ++b)
      for (int c = 0; c < C; ++c) {
        const T* xin = X.ptr() + (b * C + static_cast<std::size_t>(c)) * L;
        const T* pc = P.ptr() + static_cast<std::size_t>(c) * D * L;
        T* o = out.ptr() + (b * C + static_cast<std::size_t>(c)) * D;
        for (int d2 = 0; d2 < D; ++d2) {
          const T* prow = pc + static_cast<std::size_t>(d2) * L;
          T acc = 0;
          for (int t2 = 0; t2 < L; ++t2) acc += prow[t2] * xin[t2];
          o[d2] = acc;
        }
      }
    return unary_or_binary(std::move(out), x, p,
                           [batch, C, L, D](Tape& t, const Tensor<T>& g, int px, int pp) {
      const Tensor<T>& X2 = t.nodes_[px].value;
      const Tensor<T>& P2 = t.nodes_[pp].value;
      auto* gx = t.gslot(px);
      auto* gp = t.gslot(pp);
      for (std::size_t b = 0; b < batch; ++b)
        for (int c = 0; c < C; ++c) {
          const T* gr = g.ptr() + (b * C + static_cast<std::size_t>(c)) * D;
          const T* xin = X2.ptr() + (b * C + static_cast<std::size_t>(c)) * L;
          const T* pc = P2.ptr() + static_cast<std::size_t>(c) * D * L;
          T* gxr = gx ? gx->ptr() + (b * C + static_cast<std::size_t>(c)) * L : nullptr;
          T* gpc = gp ? gp->ptr() + static_cast<std::size_t>(c) * D * L : nullptr;
          for (int d2 = 0; d2 < D; ++d2) {
            T gd = gr[d2];
            const T* prow = pc + static_cast<std::size_t>(d2) * L;
            if (gxr)
              for (int t2 = 0; t2 < L; ++t2) gxr[t2] += gd * prow[t2];
            if (gpc) {
              T* gprow = gpc + static_cast<std::size_t>(d2) * L;
              for (int t2 = 0; t2 < L; ++t2) gprow[t2] += gd * xin[t2];
            }
          }
        }
    });
  }

  // ---- backward ----

  void backward(Var loss) {
    int id = check(loss);
    if (!grad_enabled_) fail("tape-state", "backward: gradient recording is disabled");
    grads_.assign(nodes_.size(), Tensor<T>());
    // Seed with ones; for the usual scalar loss this is d(loss)/d(loss) = 1.
    grads_[id] = Tensor<T>::full(nodes_[id].value.shape, T(1));
    for (int i = id; i >= 0; --i) {
      if (grads_[static_cast<std::size_t>(i)].data.empty()) continue;
      if (nodes_[static_cast<std::size_t>(i)].vjp)
        nodes_[static_cast<std::size_t>(i)].vjp(*this, grads_[static_cast<std::size_t>(i)]);
    }
  }

  /// Gradient slot for accumulation during backward; null when the node does
  /// not require gradients. Allocates and zeroes lazily.
  Tensor<T>* gslot(int id) {
    if (!nodes_[static_cast<std::size_t>(id)].needs_grad) return nullptr;
    Tensor<T>& g = grads_[static_cast<std::size_t>(id)];
    if (g.data.empty()) g = Tensor<T>::zeros(nodes_[static_cast<std::size_t>(id)].value.shape);
    return &g;
  }

private:
  struct Node {
    Tensor<T> value;
    bool needs_grad = false;
    std::function<void(Tape&, const Tensor<T>&)> vjp;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  bool grad_enabled_ = true;

  int check(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      fail("tape-state", "reference to a variable not on this tape");
    return v.id;
  }

  static void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
      fail("shape-mismatch", std::string(op) + ": shapes " + shape_str(a.shape) + " and " +
                                 shape_str(b.shape) + " differ");
  }

  Var push(Tensor<T> value, bool needs_grad, std::function<void(Tape&, const Tensor<T>&)> vjp) {
    nodes_.push_back(Node{std::move(value), needs_grad, std::move(vjp)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <class F>
  Var unary(Tensor<T> out, Var a, F&& f) {
    int pa = check(a);
    if (!grad_enabled_ || !nodes_[pa].needs_grad) return push(std::move(out), false, {});
    auto fn = std::forward<F>(f);
    return push(std::move(out), true,
                [pa, fn](Tape& t, const Tensor<T>& g) { fn(t, g, pa); });
  }

  template <class F>
  Var unary_or_binary(Tensor<T> out, Var a, Var b, F&& f) {
    int pa = check(a), pb = check(b);
    bool any = nodes_[pa].needs_grad || nodes_[pb].needs_grad;
    if (!grad_enabled_ || !any) return push(std::move(out), false, {});
    auto fn = std::forward<F>(f);
    return push(std::move(out), true,
                [pa, pb, fn](Tape& t, const Tensor<T>& g) { fn(t, g, pa, pb); });
  }

  Var reduce_axis(Var a, int axis, bool mean) {
    const Tensor<T>& A = val(a);
    int r = A.rank();
    if (axis < 0 || axis >= r) fail("shape-mismatch", "reduce: axis out of range for " + shape_str(A.shape));
    std::size_t outer = 1, inner = 1;
    for (int d2 = 0; d2 < axis; ++d2) outer *= static_cast<std::size_t>(A.dim(d2));
    for (int d2 = axis + 1; d2 < r; ++d2) inner *= static_cast<std::size_t>(A.dim(d2));
    std::size_t n = static_cast<std::size_t>(A.dim(axis));
    Shape out_shape;
    for (int d2 = 0; d2 < r; ++d2)
      if (d2 != axis) out_shape.push_back(A.dim(d2));
    if (out_shape.empty()) out_shape = {1};
    Tensor<T> out(out_shape);
    T denom = mean ? static_cast<T>(n) : T(1);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < inner; ++j) {
        T acc = 0;
        for (std::size_t i = 0; i < n; ++i) acc += A.ptr()[(o * n + i) * inner + j];
        out.ptr()[o * inner + j] = acc / denom;
      }
    return unary(std::move(out), a, [outer, inner, n, denom](Tape& t, const Tensor<T>& g, int pa) {
      if (auto* ga = t.gslot(pa))
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < inner; ++j) {
            T gv = g.ptr()[o * inner + j] / denom;
            for (std::size_t i = 0; i < n; ++i) ga->ptr()[(o * n + i) * inner + j] += gv;
          }
    });
  }

  static Tensor<T> permute_copy(const Tensor<T>& A, const std::vector<int>& perm) {
    int r = A.rank();
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = A.dim(perm[static_cast<std::size_t>(i)]);
    Tensor<T> out(out_shape);
    std::vector<std::size_t> in_stride(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
      in_stride[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(i + 1)] * static_cast<std::size_t>(A.dim(i + 1));
    std::vector<std::size_t> map_stride(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) map_stride[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    std::vector<int> idx(static_cast<std::size_t>(r), 0);
    std::size_t total = out.numel();
    for (std::size_t flat = 0; flat < total; ++flat) {
      std::size_t src = 0;
      for (int i = 0; i < r; ++i) src += static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * map_stride[static_cast<std::size_t>(i)];
      out[flat] = A[src];
      for (int i = r - 1; i >= 0; --i) {
        if (++idx[static_cast<std::size_t>(i)] < out_shape[static_cast<std::size_t>(i)]) break;
        idx[static_cast<std::size_t>(i)] = 0;
      }
    }
    return out;
  }

  // C = A (m x k) * B (k x n), overwrite.
  static void matmul_nn(const T* A, const T* B, T* C, int m, int k, int n) {
    std::fill(C, C + static_cast<std::size_t>(m) * n, T(0));
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        T a = A[static_cast<std::size_t>(i) * k + p];
        const T* brow = B + static_cast<std::size_t>(p) * n;
        T* crow = C + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
      }
  }

  // C += A (m x n) * B^T where B is (k x n): result (m x k).
  static void matmul_nt_acc(const T* A, const T* B, T* C, int m, int n, int k) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < k; ++j) {
        const T* arow = A + static_cast<std::size_t>(i) * n;
        const T* brow = B + static_cast<std::size_t>(j) * n;
        T acc = 0;
        for (int p = 0; p < n; ++p) acc += arow[p] * brow[p];
        C[static_cast<std::size_t>(i) * k + j] += acc;
      }
  }

  // C += A^T * B where A is (m x k), B is (m x n): result (k x n).
  static void matmul_tn_acc(const T* A, const T* B, T* C, int k, int m, int n) {
    for (int p = 0; p < m; ++p)
      for (int i = 0; i < k; ++i) {
        T a = A[static_cast<std::size_t>(p) * k + i];
        const T* brow = B + static_cast<std::size_t>(p) * n;
        T* crow = C + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
      }
  }

  static void softmax_row(T* x, int k) {
    T mx = x[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, x[i]);
    T sum = 0;
    for (int i = 0; i < k; ++i) {
      x[i] = std::exp(x[i] - mx);
      sum += x[i];
    }
    for (int i = 0; i < k; ++i) x[i] /= sum;
  }

  static T gauss_cdf(T x) {
    return T(0.5) * (T(1) + T(std::erf(static_cast<double>(x) / 1.4142135623730950488)));
  }
  static T gauss_pdf(T x) {
    return T(std::exp(-0.5 * static_cast<double>(x) * static_cast<double>(x)) / 2.5066282746310005024);
  }
  static T sigm(T x) {
    if (x >= T(0)) return T(1) / (T(1) + T(std::exp(-static_cast<double>(x))));
    T e = T(std::exp(static_cast<double>(x)));
    return e / (T(1) + e);
  }
};

using TapeD = Tape<double>;
using TapeF = Tape<float>;

/// Central-difference gradient check. `build` records a scalar loss on a fresh
/// tape from differentiable leaves created from `params`; returns the largest
/// relative error |a - n| / max(1e-8, |a| + |n|) over the checked entries.
/// Entries whose absolute difference is below `abs_skip` are excluded from the
/// maximum; near-zero gradients are probe-noise-dominated in the relative
/// metric, so full-model checks pair a relative bound with an absolute floor.
struct GradCheckReport {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

template <class Build>
GradCheckReport grad_check(std::vector<TensorD> params, Build&& build, double eps = 1e-5,
                           int entries_per_param = -1, std::uint64_t pick_seed = 1,
                           double abs_skip = 0.0) {
  // Analytic pass.
  std::vector<TapeD::Var> vars;
  TapeD tape;
  vars.reserve(params.size());
  for (auto& p : params) vars.push_back(tape.leaf(p));
  TapeD::Var loss = build(tape, vars);
  if (tape.val(loss).numel() != 1) fail("shape-mismatch", "grad_check: loss must be scalar");
  tape.backward(loss);
  std::vector<TensorD> analytic;
  analytic.reserve(params.size());
  for (auto v : vars) analytic.push_back(tape.grad(v));

  auto eval = [&](const std::vector<TensorD>& ps) {
    TapeD t2;
    t2.set_grad_enabled(false);
    std::vector<TapeD::Var> vs;
    vs.reserve(ps.size());
    for (const auto& p : ps) vs.push_back(t2.input(p));
    return t2.val(build(t2, vs))[0];
  };

  GradCheckReport rep;
  rng::Stream pick(pick_seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    std::size_t n = params[pi].numel();
    std::vector<std::size_t> idxs;
    if (entries_per_param < 0 || static_cast<std::size_t>(entries_per_param) >= n) {
      idxs.resize(n);
      for (std::size_t i = 0; i < n; ++i) idxs[i] = i;
    } else {
      for (int i = 0; i < entries_per_param; ++i) idxs.push_back(pick.below(n));
    }
    for (std::size_t i : idxs) {
      double orig = params[pi][i];
      params[pi][i] = orig + eps;
      double fp = eval(params);
      params[pi][i] = orig - eps;
      double fm = eval(params);
      params[pi][i] = orig;
      double num = (fp - fm) / (2.0 * eps);
      double ana = analytic[pi][i];
      double rel = std::abs(ana - num) / std::max(1e-8, std::abs(ana) + std::abs(num));
      if (std::abs(ana - num) >= abs_skip) rep.max_rel = std::max(rep.max_rel, rel);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace stgmfm::ad
