// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stgmfm/model.hpp"

namespace stgmfm::train {

struct TrainConfig {
  int epochs = 1000;
  int batch_size = 32;
  double lr = 2e-3;
  double lr_min = 1e-6;
  double lambda_s = 1e-4;  // L1 on the channel-graph increment
  double lambda_t = 1e-4;  // L1 on the slice-graph increment
  double beta = 1e-4;      // L2 carried inside the loss
  double weight_decay = 0.0;  // decoupled decay; off because L2 lives in the loss
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 42;
  double val_fraction = 0.1;
  int finetune_epochs = 30;
  double finetune_lr = 4e-4;
  // Ablations.
  bool no_plv = false;
  bool fixed_spatial_adjacency = false;
  bool no_l1l2 = false;
  model::BranchSet branches;
  bool gated_fusion = false;

  void validate() const;
  model::ModelOptions options() const;
};

/// Closed-form cosine schedule; t past T_max clamps to lr_min.
double cosine_lr(long t, long t_max, double lr_max, double lr_min);

/// One AdamW update on a single tensor. `t` is the 1-based step count already
/// advanced for this update; decay is decoupled from the adaptive step.
void adamw_step(ad::TensorD& theta, const ad::TensorD& grad, ad::TensorD& m, ad::TensorD& v,
                long t, double lr, double beta1, double beta2, double eps, double weight_decay);

struct LossParts {
  ad::TapeD::Var loss{-1};
  double ce = 0.0;
  double l1_s = 0.0;
  double l1_t = 0.0;
  double l2 = 0.0;
};

/// Cross-entropy plus the graph-increment L1 terms and the parameter L2 term.
/// A term with a zero coefficient is not recorded at all, so an unregularized
/// loss is bit-identical to the plain cross-entropy.
LossParts total_loss(ad::TapeD& t, model::TapeBinder& bind, ad::TapeD::Var logits,
                     const std::vector<int>& labels, const TrainConfig& tc);

struct StepLog {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double ce = 0.0;
  double l1_s = 0.0;
  double l1_t = 0.0;
  double l2 = 0.0;
  bool has_val = false;
  double val_acc = 0.0;
  double val_acc_a = -1.0;
  double val_acc_b = -1.0;
  double val_acc_c = -1.0;
};

using StepObserver =
    std::function<void(long step, const ad::TensorD& eff_channel, const ad::TensorD& eff_slice)>;

struct TrainResult {
  model::Checkpoint final_ck;
  model::Checkpoint best_ck;
  std::vector<StepLog> history;
  double best_val_acc = -1.0;
};

/// Full training run. `out_dir` non-empty writes `final/`, `best/`, and
/// `history.jsonl` under it. The observer, when set, receives the effective
/// adjacencies after every optimizer step.
TrainResult train_model(const std::vector<data::Trial>& trials, const model::ModelConfig& cfg,
                        const TrainConfig& tc, const std::string& out_dir = "",
                        const StepObserver& observer = {});

/// Resume a checkpoint on the adaptation split with a fresh optimizer and a
/// fresh (shorter) cosine cycle over `finetune_epochs` at `finetune_lr`.
TrainResult finetune(const model::Checkpoint& start, const std::vector<data::Trial>& adapt,
                     const TrainConfig& tc, const std::string& out_dir = "");

std::string history_to_jsonl(const std::vector<StepLog>& history);

/// Full-model finite-difference gradient check on a tiny geometry (4 channels,
/// 3 slices of 16 samples, feature width 5, single-layer graph stacks, all
/// branches). Returns the largest relative error over every parameter entry;
/// entries where analytic and numeric agree within 1e-7 absolutely are
/// excluded because the relative metric carries no information at zero.
double gradient_fidelity(std::uint64_t seed = 7);

}  // namespace stgmfm::train
