// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <vector>

#include "stgmfm/tape.hpp"

using namespace stgmfm;
using ad::Shape;
using ad::TapeD;
using ad::TensorD;
using Var = ad::TapeD::Var;

namespace {

TensorD rand_tensor(rng::Stream& st, Shape s, double lo = -2.0, double hi = 2.0) {
  TensorD t(std::move(s));
  for (auto& v : t.data) v = st.uniform(lo, hi);
  return t;
}

// Random values bounded away from a kink at zero so central differences do
// not straddle the nondifferentiable point.
TensorD rand_tensor_nokink(rng::Stream& st, Shape s, double margin = 0.1) {
  TensorD t(std::move(s));
  for (auto& v : t.data) {
    double m = st.uniform(margin, 2.0);
    v = st.uniform() < 0.5 ? -m : m;
  }
  return t;
}

int rand_dim(rng::Stream& st, int lo, int hi) {
  return lo + static_cast<int>(st.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

// Reduce an arbitrary-shaped output to a scalar through a fixed random
// weighting, bounded away from zero so probed gradients are not degenerate.
Var weighted_sum(TapeD& t, Var out, rng::Stream& st) {
  TensorD w = rand_tensor_nokink(st, t.val(out).shape, 0.5);
  return t.sum_all(t.mul(out, t.input(w)));
}

// Smallest analytic gradient entry a case may probe.  Entries near zero make
// the relative finite-difference metric roundoff-dominated regardless of step
// size, so curved-op cases redraw inputs until all probed entries clear this.
constexpr double kMinGrad = 2e-4;

template <class Build>
double min_abs_grad(const std::vector<TensorD>& ps, Build&& build) {
  TapeD t;
  std::vector<Var> vs;
  vs.reserve(ps.size());
  for (const auto& p : ps) vs.push_back(t.leaf(p));
  t.backward(build(t, vs));
  double m = std::numeric_limits<double>::infinity();
  for (const Var& v : vs)
    for (double g : t.grad(v).data) m = std::min(m, std::abs(g));
  return m;
}

constexpr int kCases = 100;
constexpr double kTol = 1e-6;
// Probe steps: linear and piecewise-linear ops have no truncation term, so a
// larger step keeps roundoff small; curved ops need a smaller one.
constexpr double kEpsLinear = 1e-4;
constexpr double kEpsCurved = 1e-5;

template <class Build>
void run_vjp_cases(const char* name, double eps, Build&& make_case) {
  double worst = 0.0;
  for (int cs = 0; cs < kCases; ++cs) {
    rng::Stream st = rng::substream(1234, name, static_cast<std::uint64_t>(cs));
    auto [params, build] = make_case(st);
    auto rep = ad::grad_check(std::move(params), build, eps);
    worst = std::max(worst, rep.max_rel);
  }
  INFO(std::string(name) << " worst relative error " << worst);
  CHECK(worst < kTol);
}

}  // namespace

TEST_CASE("vjp: add") {
  run_vjp_cases("add", kEpsLinear, [](rng::Stream& st) {
    Shape s{rand_dim(st, 1, 4), rand_dim(st, 1, 8)};
    std::vector<TensorD> ps{rand_tensor(st, s), rand_tensor(st, s)};
    std::uint64_t ws = st.next_u64();
    auto build = [ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.add(v[0], v[1]), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: sub") {
  run_vjp_cases("sub", kEpsLinear, [](rng::Stream& st) {
    Shape s{rand_dim(st, 1, 4), rand_dim(st, 1, 8)};
    std::vector<TensorD> ps{rand_tensor(st, s), rand_tensor(st, s)};
    std::uint64_t ws = st.next_u64();
    auto build = [ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.sub(v[0], v[1]), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: mul") {
  run_vjp_cases("mul", kEpsLinear, [](rng::Stream& st) {
    Shape s{rand_dim(st, 1, 4), rand_dim(st, 1, 8)};
    std::vector<TensorD> ps{rand_tensor_nokink(st, s, 0.3), rand_tensor_nokink(st, s, 0.3)};
    std::uint64_t ws = st.next_u64();
    auto build = [ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.mul(v[0], v[1]), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: scale and add_scalar") {
  run_vjp_cases("scale", kEpsLinear, [](rng::Stream& st) {
    Shape s{rand_dim(st, 1, 8), rand_dim(st, 1, 8)};
    std::vector<TensorD> ps{rand_tensor(st, s)};
    double c = st.uniform(0.5, 3.0) * (st.uniform() < 0.5 ? -1.0 : 1.0);
    double c2 = st.uniform(-3.0, 3.0);
    std::uint64_t ws = st.next_u64();
    auto build = [c, c2, ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.add_scalar(t.scale(v[0], c), c2), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: matmul") {
  run_vjp_cases("matmul", kEpsLinear, [](rng::Stream& st) {
    int m = rand_dim(st, 1, 5), k = rand_dim(st, 1, 5), n = rand_dim(st, 1, 5);
    std::vector<TensorD> ps{rand_tensor(st, {m, k}), rand_tensor(st, {k, n})};
    std::uint64_t ws = st.next_u64();
    auto build = [ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.matmul(v[0], v[1]), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: transpose2 and permute") {
  run_vjp_cases("permute", kEpsLinear, [](rng::Stream& st) {
    int a = rand_dim(st, 1, 3), b = rand_dim(st, 1, 3), c = rand_dim(st, 1, 3);
    std::vector<TensorD> ps{rand_tensor(st, {a, b, c})};
    std::vector<int> perm{0, 1, 2};
    st.shuffle(perm);
    std::uint64_t ws = st.next_u64();
    auto build = [perm, ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      Var p = t.permute(v[0], perm);
      int d0 = t.val(p).dim(0);
      int rest = static_cast<int>(t.val(p).numel()) / d0;
      return weighted_sum(t, t.transpose2(t.reshape(p, {d0, rest})), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: reshape, concat, slice") {
  run_vjp_cases("concat-slice", kEpsLinear, [](rng::Stream& st) {
    int rows = rand_dim(st, 2, 4), cols = rand_dim(st, 2, 5);
    std::vector<TensorD> ps{rand_tensor(st, {rows, cols}), rand_tensor(st, {rows, cols})};
    int axis = static_cast<int>(st.below(2));
    int n = axis == 0 ? 2 * rows : 2 * cols;
    int lo = rand_dim(st, 0, n - 1);
    int hi = rand_dim(st, lo + 1, n);
    std::uint64_t ws = st.next_u64();
    auto build = [axis, lo, hi, ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      Var cat = t.concat({v[0], v[1]}, axis);
      Var sl = t.slice(cat, axis, lo, hi);
      return weighted_sum(t, t.reshape(sl, {static_cast<int>(t.val(sl).numel())}), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: reductions") {
  run_vjp_cases("reduce", kEpsLinear, [](rng::Stream& st) {
    Shape s{rand_dim(st, 1, 4), rand_dim(st, 1, 4), rand_dim(st, 1, 4)};
    std::vector<TensorD> ps{rand_tensor(st, s)};
    int ax1 = static_cast<int>(st.below(3));
    int ax2 = static_cast<int>(st.below(2));
    std::uint64_t ws = st.next_u64();
    auto build = [ax1, ax2, ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      Var r = t.mean_axis(v[0], ax1);
      r = t.sum_axis(r, ax2);
      return weighted_sum(t, r, w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: relu, abs (away from kink)") {
  run_vjp_cases("relu-abs", kEpsLinear, [](rng::Stream& st) {
    Shape s{rand_dim(st, 1, 6), rand_dim(st, 1, 6)};
    std::vector<TensorD> ps{rand_tensor_nokink(st, s)};
    std::uint64_t ws = st.next_u64();
    auto build = [ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.add(t.relu(v[0]), t.abs_(v[0])), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: gelu, sigmoid") {
  run_vjp_cases("gelu-sigmoid", kEpsCurved, [](rng::Stream& st) {
    Shape s{rand_dim(st, 1, 6), rand_dim(st, 1, 6)};
    std::vector<TensorD> ps{rand_tensor(st, s)};
    std::uint64_t ws = st.next_u64();
    auto build = [ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.add(t.gelu(v[0]), t.sigmoid(v[0])), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: rsqrt_eps on positive inputs") {
  run_vjp_cases("rsqrt", kEpsCurved, [](rng::Stream& st) {
    Shape s{rand_dim(st, 1, 8)};
    std::vector<TensorD> ps{rand_tensor(st, s, 0.5, 3.0)};
    std::uint64_t ws = st.next_u64();
    auto build = [ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.rsqrt_eps(v[0], 1e-12), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: zero_diag") {
  run_vjp_cases("zero-diag", kEpsLinear, [](rng::Stream& st) {
    int n = rand_dim(st, 2, 6);
    std::vector<TensorD> ps{rand_tensor(st, {n, n})};
    std::uint64_t ws = st.next_u64();
    auto build = [ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.zero_diag(v[0]), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: softmax_last") {
  run_vjp_cases("softmax", kEpsCurved, [](rng::Stream& st) {
    Shape s{rand_dim(st, 1, 4), rand_dim(st, 2, 6)};
    auto make = [&st, &s] {
      std::vector<TensorD> ps{rand_tensor(st, s)};
      std::uint64_t ws = st.next_u64();
      auto build = [ws](TapeD& t, const std::vector<Var>& v) {
        rng::Stream w(ws);
        return weighted_sum(t, t.softmax_last(v[0]), w);
      };
      return std::pair(ps, build);
    };
    for (int i = 0;; ++i) {
      auto cs = make();
      if (i >= 500 || min_abs_grad(cs.first, cs.second) >= kMinGrad) return cs;
    }
  });
}

TEST_CASE("vjp: softmax_xent") {
  run_vjp_cases("xent", kEpsCurved, [](rng::Stream& st) {
    int n = rand_dim(st, 1, 6), k = rand_dim(st, 2, 5);
    std::vector<TensorD> ps{rand_tensor(st, {n, k})};
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& y : labels) y = static_cast<int>(st.below(static_cast<std::uint64_t>(k)));
    auto build = [labels](TapeD& t, const std::vector<Var>& v) {
      return t.softmax_xent(v[0], labels);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: conv1d_dw") {
  run_vjp_cases("conv-dw", kEpsLinear, [](rng::Stream& st) {
    int B = rand_dim(st, 1, 2), C = rand_dim(st, 1, 3), L = rand_dim(st, 2, 6);
    int K = 2 * rand_dim(st, 0, 2) + 1;
    std::vector<TensorD> ps{rand_tensor(st, {B, C, L}), rand_tensor(st, {C, K})};
    std::uint64_t ws = st.next_u64();
    auto build = [ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.conv1d_dw(v[0], v[1]), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: conv1d_pw") {
  run_vjp_cases("conv-pw", kEpsLinear, [](rng::Stream& st) {
    int B = rand_dim(st, 1, 2), C = rand_dim(st, 1, 3), L = rand_dim(st, 2, 5);
    int C2 = rand_dim(st, 1, 4);
    std::vector<TensorD> ps{rand_tensor(st, {B, C, L}), rand_tensor(st, {C2, C})};
    std::uint64_t ws = st.next_u64();
    auto build = [ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.conv1d_pw(v[0], v[1]), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: layernorm_last") {
  // Width 2 is excluded: normalizing a 2-vector collapses it to +-1 up to the
  // variance floor, so the true input gradient is of order the floor itself
  // and the relative metric is meaningless there.
  run_vjp_cases("layernorm", kEpsCurved, [](rng::Stream& st) {
    int rows = rand_dim(st, 1, 4), d = rand_dim(st, 3, 6);
    auto make = [&st, rows, d] {
      TensorD x = rand_tensor(st, {rows, d}, -0.5, 0.5);
      for (int r = 0; r < rows; ++r)
        for (int i = 0; i < d; ++i) x.at2(r, i) += (i % 2 == 0) ? 1.0 : -1.0;
      std::vector<TensorD> ps{x, rand_tensor(st, {d}, 0.5, 1.5), rand_tensor(st, {d})};
      std::uint64_t ws = st.next_u64();
      auto build = [ws](TapeD& t, const std::vector<Var>& v) {
        rng::Stream w(ws);
        return weighted_sum(t, t.layernorm_last(v[0], v[1], v[2]), w);
      };
      return std::pair(ps, build);
    };
    for (int i = 0;; ++i) {
      auto cs = make();
      if (i >= 500 || min_abs_grad(cs.first, cs.second) >= kMinGrad) return cs;
    }
  });
}

TEST_CASE("vjp: bias_add") {
  run_vjp_cases("bias", kEpsLinear, [](rng::Stream& st) {
    Shape s{rand_dim(st, 1, 3), rand_dim(st, 1, 4), rand_dim(st, 1, 4)};
    int axis = static_cast<int>(st.below(3));
    std::vector<TensorD> ps{rand_tensor(st, s), rand_tensor(st, {s[static_cast<std::size_t>(axis)]})};
    std::uint64_t ws = st.next_u64();
    auto build = [axis, ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.bias_add(v[0], v[1], axis), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: avgpool2_last and upsample2_last") {
  run_vjp_cases("pool-upsample", kEpsLinear, [](rng::Stream& st) {
    int B = rand_dim(st, 1, 3), L = rand_dim(st, 2, 8);
    std::vector<TensorD> ps{rand_tensor(st, {B, L})};
    int lout = rand_dim(st, 1, 2 * L);
    std::uint64_t ws = st.next_u64();
    auto build = [lout, ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      Var p = t.avgpool2_last(v[0]);
      return weighted_sum(t, t.upsample2_last(p, lout), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: sym_kernel") {
  run_vjp_cases("sym-kernel", kEpsLinear, [](rng::Stream& st) {
    int C = rand_dim(st, 1, 4), H = rand_dim(st, 1, 4);
    std::vector<TensorD> ps{rand_tensor(st, {C, H})};
    std::uint64_t ws = st.next_u64();
    auto build = [ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.sym_kernel(v[0]), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: channel_proj") {
  run_vjp_cases("channel-proj", kEpsLinear, [](rng::Stream& st) {
    int B = rand_dim(st, 1, 2), C = rand_dim(st, 1, 3), L = rand_dim(st, 2, 4);
    int D = rand_dim(st, 1, 4);
    std::vector<TensorD> ps{rand_tensor(st, {B, C, L}), rand_tensor(st, {C, D, L})};
    std::uint64_t ws = st.next_u64();
    auto build = [ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      return weighted_sum(t, t.channel_proj(v[0], v[1]), w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("vjp: mul_scalar_var and dropout") {
  run_vjp_cases("scalar-var", kEpsLinear, [](rng::Stream& st) {
    Shape s{rand_dim(st, 1, 4), rand_dim(st, 1, 4)};
    std::vector<TensorD> ps{rand_tensor(st, s), rand_tensor(st, {1})};
    TensorD mask(s);
    for (auto& v : mask.data) v = st.uniform() < 0.5 ? 0.0 : 2.0;
    std::uint64_t ws = st.next_u64();
    auto build = [mask, ws](TapeD& t, const std::vector<Var>& v) {
      rng::Stream w(ws);
      Var d = t.dropout(t.mul_scalar_var(v[0], v[1]), mask);
      return weighted_sum(t, d, w);
    };
    return std::pair(ps, build);
  });
}

TEST_CASE("shared subexpressions accumulate, not overwrite") {
  TapeD t;
  Var x = t.leaf(TensorD::scalar(3.0));
  Var y = t.add(x, x);
  t.backward(y);
  CHECK(t.grad(x)[0] == doctest::Approx(2.0));

  TapeD t2;
  Var a = t2.leaf(TensorD::scalar(1.5));
  Var u = t2.add_scalar(a, 1.0);
  Var z = t2.mul(u, u);  // z = (a+1)^2, dz/da = 2(a+1) = 5
  t2.backward(z);
  CHECK(t2.grad(a)[0] == doctest::Approx(5.0));
}

TEST_CASE("shape errors name the operation and shapes") {
  TapeD t;
  Var a = t.leaf(TensorD::zeros({2, 3}));
  Var b = t.leaf(TensorD::zeros({4, 5}));
  try {
    t.matmul(a, b);
    FAIL("expected shape-mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == "shape-mismatch");
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    CHECK(std::string(e.what()).find("(2,3)") != std::string::npos);
    CHECK(std::string(e.what()).find("(4,5)") != std::string::npos);
  }
}

TEST_CASE("grad disabled mode computes values without recording") {
  TapeD t;
  t.set_grad_enabled(false);
  Var x = t.leaf(TensorD::scalar(2.0));
  Var y = t.mul(x, x);
  CHECK(t.val(y)[0] == doctest::Approx(4.0));
  CHECK_THROWS_AS(t.backward(y), Error);
}

TEST_CASE("gelu matches the exact x*Phi(x) definition at reference points") {
  TapeD t;
  Var x = t.input(TensorD({3}, {0.0, 1.0, -1.0}));
  const TensorD& y = t.val(t.gelu(x));
  CHECK(y[0] == doctest::Approx(0.0));
  CHECK(y[1] == doctest::Approx(0.8413447460685429));
  CHECK(y[2] == doctest::Approx(-0.15865525393145707));
}

TEST_CASE("relu subgradient at zero is zero") {
  TapeD t;
  Var x = t.leaf(TensorD({3}, {-1.0, 0.0, 2.0}));
  t.backward(t.sum_all(t.relu(x)));
  TensorD g = t.grad(x);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 1.0);
}

TEST_CASE("float instantiation runs the same graph") {
  ad::TapeF t;
  auto x = t.leaf(ad::TensorF({2, 2}, {1.f, 2.f, 3.f, 4.f}));
  auto y = t.matmul(x, x);
  t.backward(t.sum_all(y));
  CHECK(t.val(y).at2(0, 0) == doctest::Approx(7.f));
  CHECK(t.grad(x).numel() == 4);
}
