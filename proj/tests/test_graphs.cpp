// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "stgmfm/graphs.hpp"
#include "stgmfm/error.hpp"
#include "stgmfm/rng.hpp"

using namespace stgmfm;
using ad::TensorD;

namespace {

constexpr double kPi = 3.141592653589793238462643383279;

data::Trial tone_trial(int C, int T, double freq, double fs,
                       const std::vector<double>& phase_per_channel, double amp = 1.0) {
  data::Trial t;
  t.sample_rate_hz = fs;
  t.data = TensorD({C, T});
  for (int c = 0; c < C; ++c)
    for (int s = 0; s < T; ++s)
      t.data.at2(c, s) =
          amp * std::cos(2.0 * kPi * freq * s / fs + phase_per_channel[static_cast<std::size_t>(c)]);
  return t;
}

double spectral_radius(const TensorD& m) {
  const int n = m.dim(0);
  std::vector<double> v(static_cast<std::size_t>(n), 1.0 / std::sqrt(static_cast<double>(n)));
  double lam = 0.0;
  for (int it = 0; it < 200; ++it) {
    std::vector<double> w(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) w[static_cast<std::size_t>(i)] += m.at2(i, j) * v[static_cast<std::size_t>(j)];
    double norm = 0.0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) return 0.0;
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = w[static_cast<std::size_t>(i)] / norm;
    lam = norm;
  }
  return lam;
}

}  // namespace

TEST_CASE("PLV: constant phase offset gives perfect locking") {
  // 10 Hz over 500 samples at 250 Hz is exactly 20 cycles, so the analytic
  // phase carries no spectral leakage and the offset stays constant.
  std::vector<double> phases{0.3, 1.7};
  auto trial = tone_trial(2, 500, 10.0, 250.0, phases);
  auto P = graphs::plv_matrix({trial});
  CHECK(P.at2(0, 0) == doctest::Approx(1.0));
  CHECK(P.at2(0, 1) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(P.at2(1, 0) == P.at2(0, 1));
  for (double v : P.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0 + 1e-12);
  }
}

TEST_CASE("PLV: alternating 0/pi phase differences cancel") {
  const int T = 1000;
  std::vector<std::vector<double>> phases(2, std::vector<double>(T));
  for (int t = 0; t < T; ++t) {
    phases[0][static_cast<std::size_t>(t)] = 0.25;
    phases[1][static_cast<std::size_t>(t)] = 0.25 + ((t % 2 == 0) ? 0.0 : kPi);
  }
  auto P = graphs::plv_from_phases(phases);
  CHECK(std::abs(P.at2(0, 1)) < 1e-12);
}

TEST_CASE("PLV matches a direct complex-sum oracle bit-for-bit") {
  rng::Stream st = rng::substream(31, "plv-oracle");
  const int T = 1000;
  std::vector<std::vector<double>> phases(3, std::vector<double>(T));
  for (auto& ch : phases)
    for (auto& p : ch) p = st.uniform(-kPi, kPi);
  auto P = graphs::plv_from_phases(phases);
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j) {
      double re = 0.0, im = 0.0;
      for (int t = 0; t < T; ++t) {
        double d = phases[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] -
                   phases[static_cast<std::size_t>(j)][static_cast<std::size_t>(t)];
        re += std::cos(d);
        im += std::sin(d);
      }
      re /= T;
      im /= T;
      double oracle = std::sqrt(re * re + im * im);
      CHECK(P.at2(i, j) == oracle);  // same summation order: bit-exact
    }
}

TEST_CASE("PLV is invariant to positive scaling of the signal") {
  std::vector<double> ph{0.0, 0.9, 2.2};
  auto t1 = tone_trial(3, 400, 12.0, 250.0, ph, 1.0);
  auto t2 = tone_trial(3, 400, 12.0, 250.0, ph, 2.0);  // power-of-two: exact
  auto P1 = graphs::plv_matrix({t1});
  auto P2 = graphs::plv_matrix({t2});
  for (std::size_t i = 0; i < P1.numel(); ++i) CHECK(P1[i] == P2[i]);
}

TEST_CASE("PLV names the degenerate channel") {
  data::Trial t;
  t.data = TensorD({3, 100});
  for (int s = 0; s < 100; ++s) {
    t.data.at2(0, s) = std::sin(0.3 * s);
    t.data.at2(1, s) = 4.0;  // constant
    t.data.at2(2, s) = std::cos(0.3 * s);
  }
  try {
    graphs::plv_matrix({t});
    FAIL("expected degenerate-signal");
  } catch (const Error& e) {
    CHECK(e.code() == "degenerate-signal");
    CHECK(std::string(e.what()).find("channel 1") != std::string::npos);
  }
}

TEST_CASE("build_prior: two-channel hand computation") {
  TensorD P({2, 2}, {1.0, 0.5, 0.5, 1.0});
  auto adj = graphs::build_prior(P, 1);
  CHECK(adj.base.at2(0, 0) == 0.0);
  CHECK(adj.base.at2(0, 1) == doctest::Approx(0.5));
  CHECK(adj.base.at2(1, 0) == doctest::Approx(0.5));
  CHECK(adj.prior.at2(0, 1) == doctest::Approx(1.0));
  CHECK(adj.prior.at2(1, 0) == doctest::Approx(1.0));
  CHECK(adj.prior.at2(0, 0) == 0.0);
  CHECK(adj.delta.numel() == 4);
  for (double v : adj.delta.data) CHECK(v == 0.0);
}

TEST_CASE("build_prior: k = C-1 only strips the diagonal") {
  rng::Stream st = rng::substream(32, "full-k");
  const int C = 5;
  TensorD P({C, C});
  for (int i = 0; i < C; ++i) {
    P.at2(i, i) = 1.0;
    for (int j = i + 1; j < C; ++j) {
      double v = st.uniform(0.05, 0.95);
      P.at2(i, j) = v;
      P.at2(j, i) = v;
    }
  }
  auto adj = graphs::build_prior(P, C - 1);
  for (int i = 0; i < C; ++i)
    for (int j = 0; j < C; ++j)
      CHECK(adj.base.at2(i, j) == (i == j ? 0.0 : P.at2(i, j)));
}

TEST_CASE("build_prior: isolated nodes stay zero without NaN") {
  TensorD P({3, 3});
  for (int i = 0; i < 3; ++i) P.at2(i, i) = 1.0;
  auto adj = graphs::build_prior(P, 1);
  for (double v : adj.prior.data) {
    CHECK(v == 0.0);
    CHECK(std::isfinite(v));
  }
}

TEST_CASE("build_prior: ties break to the lower index") {
  TensorD P({4, 4});
  for (int i = 0; i < 4; ++i) P.at2(i, i) = 1.0;
  // Row 0 sees equal values at columns 1, 2, 3.
  P.at2(0, 1) = 0.5;
  P.at2(0, 2) = 0.5;
  P.at2(0, 3) = 0.5;
  auto adj = graphs::build_prior(P, 1);
  CHECK(adj.base.at2(0, 1) == doctest::Approx(0.5));
  CHECK(adj.base.at2(0, 2) == 0.0);
  CHECK(adj.base.at2(0, 3) == 0.0);
}

TEST_CASE("build_prior is permutation-equivariant") {
  rng::Stream st = rng::substream(33, "perm");
  const int C = 6;
  TensorD P({C, C});
  for (int i = 0; i < C; ++i) {
    P.at2(i, i) = 1.0;
    for (int j = i + 1; j < C; ++j) {
      double v = st.uniform(0.01, 0.99);  // distinct with probability 1
      P.at2(i, j) = v;
      P.at2(j, i) = v;
    }
  }
  std::vector<int> perm{0, 1, 2, 3, 4, 5};
  st.shuffle(perm);
  TensorD PP({C, C});
  for (int i = 0; i < C; ++i)
    for (int j = 0; j < C; ++j)
      PP.at2(i, j) = P.at2(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  auto a1 = graphs::build_prior(P, 2);
  auto a2 = graphs::build_prior(PP, 2);
  for (int i = 0; i < C; ++i)
    for (int j = 0; j < C; ++j)
      CHECK(a2.prior.at2(i, j) ==
            doctest::Approx(a1.prior.at2(perm[static_cast<std::size_t>(i)],
                                         perm[static_cast<std::size_t>(j)])).epsilon(1e-12));
}

TEST_CASE("build_prior rejects bad k") {
  TensorD P({3, 3});
  for (auto k : {0, 3, -1}) {
    try {
      graphs::build_prior(P, k);
      FAIL("expected invalid-topk");
    } catch (const Error& e) {
      CHECK(e.code() == "invalid-topk");
    }
  }
}

TEST_CASE("slice prior: path graph shapes and values") {
  auto w2 = graphs::slice_prior(2);
  CHECK(w2.prior.at2(0, 1) == doctest::Approx(1.0));
  CHECK(w2.prior.at2(1, 0) == doctest::Approx(1.0));
  CHECK(w2.prior.at2(0, 0) == 0.0);

  auto w3 = graphs::slice_prior(3);
  double rowsums[3] = {0, 0, 0};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) rowsums[i] += w3.base.at2(i, j);
  CHECK(rowsums[0] == doctest::Approx(1.0));
  CHECK(rowsums[1] == doctest::Approx(2.0));
  CHECK(rowsums[2] == doctest::Approx(1.0));

  auto w9 = graphs::slice_prior(9);
  CHECK(w9.prior.at2(0, 1) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(w9.kind == graphs::Adjacency::Kind::Slice);

  try {
    graphs::slice_prior(1);
    FAIL("expected invalid-window");
  } catch (const Error& e) {
    CHECK(e.code() == "invalid-window");
  }
}

TEST_CASE("priors have spectral radius at most one") {
  rng::Stream st = rng::substream(34, "radius");
  const int C = 8;
  TensorD P({C, C});
  for (int i = 0; i < C; ++i) {
    P.at2(i, i) = 1.0;
    for (int j = i + 1; j < C; ++j) {
      double v = st.uniform(0.0, 1.0);
      P.at2(i, j) = v;
      P.at2(j, i) = v;
    }
  }
  auto adj = graphs::build_prior(P, 3);
  CHECK(spectral_radius(adj.prior) <= 1.0 + 1e-9);
  CHECK(spectral_radius(graphs::slice_prior(9).prior) <= 1.0 + 1e-9);
}

TEST_CASE("effective adjacency: zero delta reproduces the prior exactly") {
  // Triangle plus pendant: degree-irregular, so this would fail if the
  // increment were applied to the normalized matrix instead of the base.
  TensorD P({4, 4});
  auto set = [&](int i, int j, double v) {
    P.at2(i, j) = v;
    P.at2(j, i) = v;
  };
  set(0, 1, 0.9);
  set(0, 2, 0.8);
  set(1, 2, 0.7);
  set(0, 3, 0.6);
  for (int i = 0; i < 4; ++i) P.at2(i, i) = 1.0;
  auto adj = graphs::build_prior(P, 3);
  auto eff = graphs::effective_adjacency(adj);
  for (std::size_t i = 0; i < eff.numel(); ++i)
    CHECK(std::abs(eff[i] - adj.prior[i]) < 1e-9);
}

TEST_CASE("effective adjacency: full cancellation gives the zero matrix") {
  auto adj = graphs::slice_prior(5);
  for (std::size_t i = 0; i < adj.delta.numel(); ++i) adj.delta[i] = -adj.base[i];
  auto eff = graphs::effective_adjacency(adj);
  for (double v : eff.data) CHECK(v == 0.0);
}

TEST_CASE("effective adjacency stays symmetric, nonnegative, hollow, finite") {
  rng::Stream st = rng::substream(35, "eff-props");
  auto adj = graphs::slice_prior(6);
  for (int trial = 0; trial < 20; ++trial) {
    for (auto& v : adj.delta.data) v = st.uniform(-0.5, 0.5);
    auto eff = graphs::effective_adjacency(adj);
    for (int i = 0; i < 6; ++i) {
      CHECK(eff.at2(i, i) == 0.0);
      for (int j = 0; j < 6; ++j) {
        CHECK(eff.at2(i, j) == eff.at2(j, i));
        CHECK(eff.at2(i, j) >= 0.0);
        CHECK(std::isfinite(eff.at2(i, j)));
      }
    }
  }
}

TEST_CASE("effective adjacency gradient matches finite differences") {
  rng::Stream st = rng::substream(36, "eff-grad");
  auto adj = graphs::slice_prior(5);
  TensorD delta({5, 5});
  for (auto& v : delta.data) v = st.uniform(-0.2, 0.2);
  TensorD base = adj.base;
  auto build = [base](ad::TapeD& t, const std::vector<ad::TapeD::Var>& v) {
    auto b = t.input(base);
    return t.sum_all(graphs::effective_adjacency_on_tape(t, b, v[0]));
  };
  auto rep = ad::grad_check({delta}, build, 1e-5);
  INFO("max rel " << rep.max_rel);
  CHECK(rep.max_rel < 1e-4);
}

TEST_CASE("adjacency CSV carries the kind header") {
  auto adj = graphs::slice_prior(3);
  auto csv = graphs::adjacency_csv(adj.prior, "slice");
  CHECK(csv.rfind("# slice,3\n", 0) == 0);
  int rows = 0;
  for (char c : csv)
    if (c == '\n') ++rows;
  CHECK(rows == 4);
}
