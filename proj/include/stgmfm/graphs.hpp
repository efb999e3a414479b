// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "stgmfm/dataio.hpp"
#include "stgmfm/tape.hpp"
#include "stgmfm/tensor.hpp"

namespace stgmfm::graphs {

/// Graph state for one GCN family. `base` is the sparsified, symmetric,
/// zero-diagonal matrix before degree normalization; `prior` is its normalized
/// view (what the GCN sees at delta = 0). The learnable increment `delta`
/// lives in the base domain so the effective adjacency reduces exactly to the
/// prior when the increment vanishes.
struct Adjacency {
  enum class Kind { Channel, Slice };
  Kind kind = Kind::Channel;
  ad::TensorD base;   // n x n, frozen
  ad::TensorD prior;  // n x n, frozen, degree-normalized
  ad::TensorD delta;  // n x n, learnable, initialized to zero

  int n() const { return base.rank() == 2 ? base.dim(0) : 0; }
};

/// PLV from per-channel phase series (C vectors of equal length T):
/// entry (i,j) = |1/T * sum_t exp(i(phi_i(t) - phi_j(t)))|.
ad::TensorD plv_from_phases(const std::vector<std::vector<double>>& phases);

/// Mean over trials of the per-trial PLV matrix. Trials are expected to be
/// band-passed already; phases come from the analytic signal per channel.
ad::TensorD plv_matrix(const std::vector<data::Trial>& trials);

/// Zero diagonal, per-row top-k (ties to the lower index), max-symmetrize,
/// degree-normalize. Returns an Adjacency with zero delta.
Adjacency build_prior(const ad::TensorD& P, int k);

/// Path-graph prior over W slices.
Adjacency slice_prior(int W);

/// renormalize(relu(base + delta)): zero diagonal, mean-symmetrize,
/// degree-normalize with an epsilon-guarded degree.
ad::TensorD effective_adjacency(const Adjacency& adj);

/// CSV serialization with a `# kind,n` header line.
std::string adjacency_csv(const ad::TensorD& m, const std::string& kind);

/// Degree-normalize a nonnegative symmetric matrix: D^{-1/2} M D^{-1/2} with
/// degrees clamped below by eps (zero rows stay zero).
ad::TensorD degree_normalize(const ad::TensorD& m, double eps = 1e-12);

/// Tape version of the effective adjacency so gradients flow into delta.
template <class T>
typename ad::Tape<T>::Var effective_adjacency_on_tape(ad::Tape<T>& t,
                                                      typename ad::Tape<T>::Var base,
                                                      typename ad::Tape<T>::Var delta) {
  using Tp = ad::Tape<T>;
  const int n = t.val(base).dim(0);
  typename Tp::Var m = t.relu(t.add(base, delta));
  m = t.zero_diag(m);
  m = t.scale(t.add(m, t.transpose2(m)), T(0.5));
  typename Tp::Var deg = t.sum_axis(m, 1);
  typename Tp::Var dis = t.rsqrt_eps(deg, T(1e-12));
  typename Tp::Var outer = t.matmul(t.reshape(dis, {n, 1}), t.reshape(dis, {1, n}));
  return t.mul(m, outer);
}

}  // namespace stgmfm::graphs
