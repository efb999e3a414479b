// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "stgmfm/dataio.hpp"
#include "stgmfm/graphs.hpp"
#include "stgmfm/rng.hpp"
#include "stgmfm/tape.hpp"
#include "stgmfm/tensor.hpp"

namespace stgmfm::model {

struct MfmConfig {
  int width = 16;        // feature channels after the lift
  int n_blocks = 1;
  int n_downsample = 1;  // pool-and-remix ladder depth along the inter-period axis
  int top_periods = 1;
  int kernel = 5;        // odd, both image axes
};

struct ModelConfig {
  int n_channels = 23;
  int n_classes = 3;
  int n_samples = 1125;
  double sample_rate_hz = 250.0;
  int window_len = 125;
  int stride = 125;
  int d = 32;     // node feature width
  int k_s = 2;    // channel-graph depth
  int k_t = 2;    // slice-graph depth
  int kernel = 15;  // temporal block depthwise kernel, odd
  MfmConfig mfm;
  double dropout = 0.2;
  int top_k = 6;  // per-row edges kept in the connectivity prior
  double band_lo = 8.0;
  double band_hi = 30.0;
  int rms_window = 25;
  bool plv_broadband = false;  // phase locking on the raw signal instead of the band

  int n_windows() const;
  void validate() const;
};

struct BranchSet {
  bool a = true;
  bool b = true;
  bool c = true;
  int count() const { return (a ? 1 : 0) + (b ? 1 : 0) + (c ? 1 : 0); }
};

struct ModelOptions {
  BranchSet branches;
  bool gated_fusion = false;
  bool decode_branch_a = false;  // decode from z_A instead of the fused logits
  // Test-only degenerate modes; production configs leave both false.
  bool identity_activation = false;  // graph layers apply no nonlinearity
  bool norm_disabled = false;        // temporal block skips layer normalization
};

/// Named parameter tensors in a stable insertion order.
struct ModelParams {
  std::vector<std::string> names;
  std::unordered_map<std::string, ad::TensorD> tensors;

  void add(const std::string& name, ad::TensorD t);
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  ad::TensorD& at(const std::string& name);
  const ad::TensorD& at(const std::string& name) const;
};

/// Seeded init; draws for every branch regardless of the enabled subset so
/// parameter values are comparable across ablation variants.
ModelParams init_params(const ModelConfig& cfg, const ModelOptions& opt, rng::Stream& st);

/// Parameters carrying L1 (graph increments) or excluded from L2 (increments
/// and normalization shifts).
bool is_graph_delta(const std::string& name);
bool l2_excluded(const std::string& name);

/// Per-trial model inputs: standardized windows, period-folded envelope
/// images, and the phase-locking matrix for the connectivity prior.
struct TrialFeatures {
  ad::TensorD windows;              // (W, C, T_w)
  std::vector<int> periods;         // top_periods entries, fallback-filled
  std::vector<ad::TensorD> images;  // per period: (C, p, ceil(T/p))
  ad::TensorD plv;                  // (C, C); empty when PLV is disabled
  int label = 0;
};

TrialFeatures featurize_trial(const data::Trial& trial, const ModelConfig& cfg, bool no_plv);

struct Priors {
  graphs::Adjacency channel;
  graphs::Adjacency slice;
};

/// Channel prior from the mean train-set PLV (or an index-neighborhood graph
/// when PLV is disabled) plus the path prior over slices.
Priors build_priors(const std::vector<TrialFeatures>& train, const ModelConfig& cfg, bool no_plv);

/// k nearest channels by index distance, unit weights, symmetrized.
graphs::Adjacency channel_index_prior(int n_channels, int k);

/// Handles leaf/input creation and caching for named parameters on one tape.
struct TapeBinder {
  ad::TapeD* tape = nullptr;
  const ModelParams* params = nullptr;
  bool trainable = true;
  std::unordered_map<std::string, ad::TapeD::Var> vars;
  std::vector<std::string> used;

  ad::TapeD::Var get(const std::string& name);
};

struct ForwardVars {
  ad::TapeD::Var z_a{-1}, z_b{-1}, z_c{-1};
  ad::TapeD::Var fused{-1};
  ad::TapeD::Var eff_channel{-1}, eff_slice{-1};
};

/// Records the full forward pass for a batch. `drop_stream` non-null and
/// cfg.dropout > 0 enables inverted-scaling dropout on the pooled features.
ForwardVars build_forward(ad::TapeD& t, TapeBinder& bind, const ModelConfig& cfg,
                          const ModelOptions& opt, const Priors& priors,
                          const std::vector<const TrialFeatures*>& batch,
                          rng::Stream* drop_stream);

/// Value-only fused logits (N, K_cls), dropout off.
ad::TensorD forward_logits(const ModelConfig& cfg, const ModelOptions& opt,
                           const ModelParams& params, const Priors& priors,
                           const std::vector<const TrialFeatures*>& batch);

/// Argmax decode per trial (fused logits, or z_A under decode_branch_a).
std::vector<int> predict(const ModelConfig& cfg, const ModelOptions& opt,
                         const ModelParams& params, const Priors& priors,
                         const std::vector<const TrialFeatures*>& batch);

/// One graph propagation step on a 2-D (nodes, features) matrix:
/// act(eff . h . w), with GELU unless disabled.
ad::TensorD gcn_layer(const ad::TensorD& eff, const ad::TensorD& h, const ad::TensorD& w,
                      bool identity_activation = false);

/// The shared per-slice mixer on (..., C, d) features, reading tb.* from
/// `params`: depthwise along features with per-channel kernels, pointwise
/// across channels, bias, GELU, then feature-axis normalization.
ad::TensorD apply_temporal_block(const ad::TensorD& x, const ModelParams& params,
                                 bool norm_disabled = false);

struct Checkpoint {
  ModelConfig config;
  ModelOptions options;
  std::uint64_t seed = 0;
  ModelParams params;
  Priors priors;
};

void save_checkpoint(const Checkpoint& ck, const std::string& dir);
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace stgmfm::model
