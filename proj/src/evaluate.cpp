// SPDX-License-Identifier: Apache-2.0
#include "stgmfm/evaluate.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "json.hpp"
#include "stgmfm/error.hpp"
#include "stgmfm/rng.hpp"

namespace stgmfm::eval {

namespace fs = std::filesystem;
using ad::TensorD;
using nlohmann::json;

long ConfusionMatrix::total() const {
  long t = 0;
  for (long c : counts) t += c;
  return t;
}

Metrics metrics_from_confusion(const ConfusionMatrix& m) {
  if (m.k <= 0 || m.total() == 0) fail("empty-confusion", "confusion matrix has no entries");
  const double total = static_cast<double>(m.total());
  double trace = 0.0;
  for (int c = 0; c < m.k; ++c) trace += static_cast<double>(m.at(c, c));
  const double p_o = trace / total;

  double p_e = 0.0;
  for (int c = 0; c < m.k; ++c) {
    double row = 0.0, col = 0.0;
    for (int j = 0; j < m.k; ++j) {
      row += static_cast<double>(m.at(c, j));
      col += static_cast<double>(m.at(j, c));
    }
    p_e += row * col / (total * total);
  }

  Metrics out;
  out.acc = 100.0 * p_o;
  out.kappa = (1.0 - p_e <= 0.0) ? 0.0 : (p_o - p_e) / (1.0 - p_e);

  double f1_sum = 0.0;
  for (int c = 0; c < m.k; ++c) {
    double tp = static_cast<double>(m.at(c, c));
    double row = 0.0, col = 0.0;
    for (int j = 0; j < m.k; ++j) {
      row += static_cast<double>(m.at(c, j));
      col += static_cast<double>(m.at(j, c));
    }
    double prec = col > 0.0 ? tp / col : 0.0;
    double rec = row > 0.0 ? tp / row : 0.0;
    f1_sum += (prec + rec > 0.0) ? 2.0 * prec * rec / (prec + rec) : 0.0;
  }
  out.f1 = 100.0 * f1_sum / static_cast<double>(m.k);
  return out;
}

namespace {

/// Every slice slot holds slice `w`; geometry stays intact so the slice graph
/// still applies.
model::TrialFeatures replicate_slice(const model::TrialFeatures& f, int w) {
  model::TrialFeatures r = f;
  const int W = f.windows.dim(0);
  const std::size_t block = f.windows.data.size() / static_cast<std::size_t>(W);
  const double* src = f.windows.data.data() + static_cast<std::size_t>(w) * block;
  for (int ww = 0; ww < W; ++ww)
    std::memcpy(r.windows.data.data() + static_cast<std::size_t>(ww) * block, src,
                block * sizeof(double));
  return r;
}

}  // namespace

EvalResult evaluate_model(const model::Checkpoint& ck, const data::Dataset& test,
                          bool majority_vote) {
  if (test.trials.empty()) fail("empty-split", "evaluation needs at least one trial");
  const model::ModelConfig& cfg = ck.config;

  std::vector<model::TrialFeatures> feats;
  feats.reserve(test.trials.size());
  for (const auto& tr : test.trials) feats.push_back(model::featurize_trial(tr, cfg, true));

  EvalResult out;
  out.confusion = ConfusionMatrix(cfg.n_classes);

  if (!majority_vote) {
    constexpr std::size_t kBatch = 32;
    for (std::size_t start = 0; start < feats.size(); start += kBatch) {
      std::size_t stop = std::min(start + kBatch, feats.size());
      std::vector<const model::TrialFeatures*> batch;
      for (std::size_t i = start; i < stop; ++i) batch.push_back(&feats[i]);
      std::vector<int> pred = model::predict(cfg, ck.options, ck.params, ck.priors, batch);
      for (std::size_t i = start; i < stop; ++i)
        ++out.confusion.at(feats[i].label, pred[i - start]);
    }
  } else {
    const int W = cfg.n_windows();
    for (const auto& f : feats) {
      std::vector<model::TrialFeatures> variants;
      variants.reserve(static_cast<std::size_t>(W));
      std::vector<const model::TrialFeatures*> batch;
      for (int w = 0; w < W; ++w) variants.push_back(replicate_slice(f, w));
      for (const auto& v : variants) batch.push_back(&v);
      std::vector<int> pred = model::predict(cfg, ck.options, ck.params, ck.priors, batch);
      std::vector<int> votes(static_cast<std::size_t>(cfg.n_classes), 0);
      for (int p : pred) ++votes[static_cast<std::size_t>(p)];
      int label = 0;
      for (int c = 1; c < cfg.n_classes; ++c)
        if (votes[static_cast<std::size_t>(c)] > votes[static_cast<std::size_t>(label)]) label = c;
      ++out.confusion.at(f.label, label);
    }
  }

  out.metrics = metrics_from_confusion(out.confusion);
  return out;
}

namespace {

std::string fold_dir_name(int fold) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "fold_%02d", fold);
  return buf;
}

FoldRow run_fold(const data::Dataset& dataset, data::Protocol protocol, int fold,
                 const config::RunConfig& rc, const std::string& out_dir) {
  train::TrainConfig tc = rc.train;
  tc.seed = rng::derive(rc.train.seed, "fold", static_cast<std::uint64_t>(fold));

  data::Split sp = data::split_protocol(dataset, protocol, fold);
  std::string fold_dir =
      out_dir.empty() ? "" : (fs::path(out_dir) / fold_dir_name(fold)).string();

  train::TrainResult tr = train::train_model(sp.train.trials, rc.model, tc, fold_dir);
  model::Checkpoint ck = std::move(tr.best_ck);
  if (protocol == data::Protocol::CrossSubjectFinetune) {
    std::string ft_dir = fold_dir.empty() ? "" : (fs::path(fold_dir) / "finetune").string();
    train::TrainResult ft = train::finetune(ck, sp.adapt.trials, tc, ft_dir);
    ck = std::move(ft.best_ck);
  }
  if (rc.decode_branch_a) ck.options.decode_branch_a = true;

  EvalResult er = evaluate_model(ck, sp.test, rc.majority_vote);

  FoldRow row;
  row.fold = fold;
  row.subject = sp.test.trials.front().subject_id;
  row.metrics = er.metrics;
  return row;
}

void aggregate(ProtocolResult& r) {
  const double n = static_cast<double>(r.rows.size());
  Metrics sum, sq;
  for (const FoldRow& row : r.rows) {
    sum.acc += row.metrics.acc;
    sum.kappa += row.metrics.kappa;
    sum.f1 += row.metrics.f1;
  }
  r.mean = {sum.acc / n, sum.kappa / n, sum.f1 / n};
  for (const FoldRow& row : r.rows) {
    sq.acc += (row.metrics.acc - r.mean.acc) * (row.metrics.acc - r.mean.acc);
    sq.kappa += (row.metrics.kappa - r.mean.kappa) * (row.metrics.kappa - r.mean.kappa);
    sq.f1 += (row.metrics.f1 - r.mean.f1) * (row.metrics.f1 - r.mean.f1);
  }
  r.stdev = {std::sqrt(sq.acc / n), std::sqrt(sq.kappa / n), std::sqrt(sq.f1 / n)};
}

}  // namespace

ProtocolResult run_protocol(const data::Dataset& dataset, const config::RunConfig& rc,
                            const std::string& out_dir) {
  data::Protocol protocol = data::protocol_from_string(rc.protocol);
  if (dataset.manifest.num_channels != rc.model.n_channels ||
      dataset.manifest.num_samples != rc.model.n_samples)
    fail("hyper-mismatch", "dataset geometry " + std::to_string(dataset.manifest.num_channels) +
                               "x" + std::to_string(dataset.manifest.num_samples) +
                               " does not match the model config");
  const int n_folds = data::fold_count(dataset, protocol);
  if (n_folds < 1) fail("protocol-error", "dataset yields no folds for " + rc.protocol);

  if (!out_dir.empty()) fs::create_directories(out_dir);

  ProtocolResult res;
  res.rows.resize(static_cast<std::size_t>(n_folds));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_folds));

  const int jobs = std::max(1, std::min(rc.jobs, n_folds));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (;;) {
      int f = next.fetch_add(1);
      if (f >= n_folds) return;
      try {
        res.rows[static_cast<std::size_t>(f)] = run_fold(dataset, protocol, f, rc, out_dir);
      } catch (...) {
        errors[static_cast<std::size_t>(f)] = std::current_exception();
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < jobs; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (int f = 0; f < n_folds; ++f) {
    if (!errors[static_cast<std::size_t>(f)]) continue;
    try {
      std::rethrow_exception(errors[static_cast<std::size_t>(f)]);
    } catch (const Error& e) {
      fail("fold-failed", "fold " + std::to_string(f) + ": [" + e.code() + "] " + e.what());
    } catch (const std::exception& e) {
      fail("fold-failed", "fold " + std::to_string(f) + ": " + e.what());
    }
  }

  aggregate(res);

  if (!out_dir.empty()) {
    {
      std::ofstream f(fs::path(out_dir) / "results.csv");
      if (!f) fail("io-error", "cannot write results.csv in " + out_dir);
      f << results_csv(res);
    }
    json folds = json::array();
    for (const FoldRow& row : res.rows)
      folds.push_back(json{{"fold", row.fold},
                           {"subject", row.subject},
                           {"acc", row.metrics.acc},
                           {"kappa", row.metrics.kappa},
                           {"f1", row.metrics.f1}});
    json j{{"protocol", rc.protocol},
           {"config", json::parse(config::to_flat_json_text(rc))},
           {"folds", folds},
           {"aggregate",
            json{{"acc", json{{"mean", res.mean.acc}, {"std", res.stdev.acc}}},
                 {"kappa", json{{"mean", res.mean.kappa}, {"std", res.stdev.kappa}}},
                 {"f1", json{{"mean", res.mean.f1}, {"std", res.stdev.f1}}}}}};
    std::ofstream f(fs::path(out_dir) / "results.json");
    if (!f) fail("io-error", "cannot write results.json in " + out_dir);
    f << j.dump(2) << "\n";
  }
  return res;
}

std::string results_csv(const ProtocolResult& r) {
  std::string out = "fold,subject,acc,kappa,f1\n";
  char buf[160];
  for (const FoldRow& row : r.rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.2f,%.4f,%.2f\n", row.fold, row.subject,
                  row.metrics.acc, row.metrics.kappa, row.metrics.f1);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "AVG±STD,,%.2f±%.2f,%.4f±%.4f,%.2f±%.2f\n", r.mean.acc,
                r.stdev.acc, r.mean.kappa, r.stdev.kappa, r.mean.f1, r.stdev.f1);
  out += buf;
  return out;
}

}  // namespace stgmfm::eval
