// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "stgmfm/config.hpp"
#include "stgmfm/dataio.hpp"
#include "stgmfm/model.hpp"
#include "stgmfm/train.hpp"

namespace stgmfm::eval {

/// Rows are the true class, columns the predicted class.
struct ConfusionMatrix {
  int k = 0;
  std::vector<long> counts;

  explicit ConfusionMatrix(int classes = 0)
      : k(classes), counts(static_cast<std::size_t>(classes) * classes, 0) {}
  long& at(int truth, int pred) { return counts[static_cast<std::size_t>(truth) * k + pred]; }
  long at(int truth, int pred) const { return counts[static_cast<std::size_t>(truth) * k + pred]; }
  long total() const;
};

struct Metrics {
  double acc = 0.0;    // percent
  double kappa = 0.0;  // [-1, 1]
  double f1 = 0.0;     // percent, macro-averaged
};

/// Accuracy, Cohen's kappa, and macro-F1. A class with no predictions and no
/// support contributes an F1 of zero; chance agreement of one yields kappa 0.
Metrics metrics_from_confusion(const ConfusionMatrix& m);

struct EvalResult {
  Metrics metrics;
  ConfusionMatrix confusion;
};

/// Deterministic per-trial decoding with dropout off. `majority_vote` decodes
/// each slice separately (by replicating it across the slice axis) and takes
/// the plurality label, ties to the lower label.
EvalResult evaluate_model(const model::Checkpoint& ck, const data::Dataset& test,
                          bool majority_vote = false);

struct FoldRow {
  int fold = 0;
  int subject = 0;
  Metrics metrics;
};

struct ProtocolResult {
  std::vector<FoldRow> rows;
  Metrics mean;
  Metrics stdev;  // population standard deviation
};

/// Trains (and fine-tunes when the protocol has an adaptation split) every
/// fold, evaluates the best checkpoint, and aggregates. `out_dir` non-empty
/// writes fold artifacts plus results.csv and results.json; rc.jobs > 1 runs
/// folds on a thread pool. A failing fold aborts the table with its id.
ProtocolResult run_protocol(const data::Dataset& dataset, const config::RunConfig& rc,
                            const std::string& out_dir);

/// Header `fold,subject,acc,kappa,f1`, one row per fold, aggregate last.
std::string results_csv(const ProtocolResult& r);

}  // namespace stgmfm::eval
