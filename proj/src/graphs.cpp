// SPDX-License-Identifier: Apache-2.0
#include "stgmfm/graphs.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <numeric>

#include "stgmfm/dsp.hpp"
#include "stgmfm/error.hpp"

namespace stgmfm::graphs {

ad::TensorD plv_from_phases(const std::vector<std::vector<double>>& phases) {
  const int C = static_cast<int>(phases.size());
  if (C < 1) fail("invalid-data", "plv: need at least one channel");
  const std::size_t T = phases[0].size();
  for (const auto& p : phases)
    if (p.size() != T) fail("shape-mismatch", "plv: phase series lengths differ");
  if (T == 0) fail("invalid-data", "plv: empty phase series");
  ad::TensorD P({C, C});
  for (int i = 0; i < C; ++i) {
    P.at2(i, i) = 1.0;
    for (int j = i + 1; j < C; ++j) {
      double re = 0.0, im = 0.0;
      const double* pi = phases[static_cast<std::size_t>(i)].data();
      const double* pj = phases[static_cast<std::size_t>(j)].data();
      for (std::size_t t = 0; t < T; ++t) {
        double d = pi[t] - pj[t];
        re += std::cos(d);
        im += std::sin(d);
      }
      double v = std::abs(std::complex<double>(re, im)) / static_cast<double>(T);
      P.at2(i, j) = v;
      P.at2(j, i) = v;
    }
  }
  return P;
}

ad::TensorD plv_matrix(const std::vector<data::Trial>& trials) {
  if (trials.empty()) fail("invalid-data", "plv: need at least one trial");
  const int C = trials[0].data.dim(0);
  const int T = trials[0].data.dim(1);
  ad::TensorD acc({C, C});
  for (std::size_t n = 0; n < trials.size(); ++n) {
    const auto& tr = trials[n];
    if (tr.data.dim(0) != C || tr.data.dim(1) != T)
      fail("shape-mismatch", "plv: trial " + std::to_string(n) + " shape differs");
    std::vector<std::vector<double>> phases(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
      std::vector<double> x(static_cast<std::size_t>(T));
      for (int t = 0; t < T; ++t) x[static_cast<std::size_t>(t)] = tr.data.at2(c, t);
      try {
        phases[static_cast<std::size_t>(c)] = dsp::analytic_phase(x).phi;
      } catch (const Error& e) {
        if (e.code() == "degenerate-signal")
          fail("degenerate-signal", "plv: channel " + std::to_string(c) + " of trial " +
                                        std::to_string(n) + " is constant");
        throw;
      }
    }
    ad::TensorD P = plv_from_phases(phases);
    for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += P[i];
  }
  const double inv = 1.0 / static_cast<double>(trials.size());
  for (auto& v : acc.data) v *= inv;
  return acc;
}

ad::TensorD degree_normalize(const ad::TensorD& m, double eps) {
  const int n = m.dim(0);
  std::vector<double> dis(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double d = 0.0;
    for (int j = 0; j < n; ++j) d += m.at2(i, j);
    dis[static_cast<std::size_t>(i)] = 1.0 / std::sqrt(std::max(d, eps));
  }
  ad::TensorD out({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      out.at2(i, j) = dis[static_cast<std::size_t>(i)] * m.at2(i, j) * dis[static_cast<std::size_t>(j)];
  return out;
}

Adjacency build_prior(const ad::TensorD& P, int k) {
  if (P.rank() != 2 || P.dim(0) != P.dim(1))
    fail("shape-mismatch", "build_prior: square matrix required, got " + ad::shape_str(P.shape));
  const int C = P.dim(0);
  if (k < 1 || k > C - 1)
    fail("invalid-topk", "build_prior: k=" + std::to_string(k) + " outside [1," +
                             std::to_string(C - 1) + "]");
  for (double v : P.data)
    if (!(v >= 0.0 && v <= 1.0 + 1e-12))
      fail("invalid-data", "build_prior: PLV entries must lie in [0,1]");

  // Zero diagonal, then keep the k largest entries per row.
  ad::TensorD A({C, C});
  std::vector<int> order(static_cast<std::size_t>(C));
  for (int i = 0; i < C; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      double va = a == i ? 0.0 : P.at2(i, a);
      double vb = b == i ? 0.0 : P.at2(i, b);
      if (va != vb) return va > vb;
      return a < b;
    });
    int kept = 0;
    for (int pos = 0; pos < C && kept < k; ++pos) {
      int j = order[static_cast<std::size_t>(pos)];
      if (j == i) continue;
      A.at2(i, j) = P.at2(i, j);
      ++kept;
    }
  }
  // Symmetrize by max, normalize.
  for (int i = 0; i < C; ++i)
    for (int j = i + 1; j < C; ++j) {
      double v = std::max(A.at2(i, j), A.at2(j, i));
      A.at2(i, j) = v;
      A.at2(j, i) = v;
    }
  Adjacency adj;
  adj.kind = Adjacency::Kind::Channel;
  adj.base = A;
  adj.prior = degree_normalize(A);
  adj.delta = ad::TensorD({C, C});
  return adj;
}

Adjacency slice_prior(int W) {
  if (W < 2) fail("invalid-window", "slice_prior: need at least 2 slices, got " + std::to_string(W));
  ad::TensorD A({W, W});
  for (int w = 0; w + 1 < W; ++w) {
    A.at2(w, w + 1) = 1.0;
    A.at2(w + 1, w) = 1.0;
  }
  Adjacency adj;
  adj.kind = Adjacency::Kind::Slice;
  adj.base = A;
  adj.prior = degree_normalize(A);
  adj.delta = ad::TensorD({W, W});
  return adj;
}

ad::TensorD effective_adjacency(const Adjacency& adj) {
  ad::TapeD t;
  t.set_grad_enabled(false);
  auto base = t.input(adj.base);
  auto delta = t.input(adj.delta);
  return t.val(effective_adjacency_on_tape(t, base, delta));
}

std::string adjacency_csv(const ad::TensorD& m, const std::string& kind) {
  const int n = m.dim(0);
  std::string out = "# " + kind + "," + std::to_string(n) + "\n";
  char buf[40];
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      std::snprintf(buf, sizeof(buf), "%.12g", m.at2(i, j));
      out += buf;
      out += (j + 1 < n) ? "," : "\n";
    }
  }
  return out;
}

}  // namespace stgmfm::graphs
