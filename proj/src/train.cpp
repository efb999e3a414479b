// SPDX-License-Identifier: Apache-2.0
#include "stgmfm/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "stgmfm/error.hpp"

namespace stgmfm::train {

namespace fs = std::filesystem;
using ad::TapeD;
using ad::TensorD;
using Var = TapeD::Var;
using nlohmann::json;

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { fail("invalid-config", m); };
  if (epochs < 1) bad("epochs must be at least 1");
  if (batch_size < 1) bad("batch_size must be positive");
  if (!(lr > 0.0) || !(lr_min >= 0.0) || lr_min > lr) bad("learning rates must satisfy 0 <= lr_min <= lr");
  if (lambda_s < 0.0 || lambda_t < 0.0 || beta < 0.0) bad("regularizer coefficients must be nonnegative");
  if (weight_decay < 0.0) bad("weight_decay must be nonnegative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) bad("adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) bad("adam_eps must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) bad("val_fraction must be in [0, 1)");
  if (finetune_epochs < 0) bad("finetune_epochs must be nonnegative");
  if (!(finetune_lr > 0.0)) bad("finetune_lr must be positive");
  if (branches.count() < 1) bad("at least one branch must be enabled");
}

model::ModelOptions TrainConfig::options() const {
  model::ModelOptions opt;
  opt.branches = branches;
  opt.gated_fusion = gated_fusion;
  return opt;
}

double cosine_lr(long t, long t_max, double lr_max, double lr_min) {
  if (t_max <= 0) return t <= 0 ? lr_max : lr_min;
  if (t < 0) fail("invalid-config", "schedule step must be nonnegative");
  if (t > t_max) return lr_min;
  constexpr double kPi = 3.141592653589793238462643383279;
  double c = std::cos(kPi * static_cast<double>(t) / static_cast<double>(t_max));
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c);
}

void adamw_step(TensorD& theta, const TensorD& grad, TensorD& m, TensorD& v, long t, double lr,
                double beta1, double beta2, double eps, double weight_decay) {
  if (theta.shape != grad.shape || theta.shape != m.shape || theta.shape != v.shape)
    fail("shape-mismatch", "optimizer state does not match parameter shape");
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.data.size(); ++i) {
    double g = grad.data[i];
    m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g;
    v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g * g;
    double mh = m.data[i] / bc1;
    double vh = v.data[i] / bc2;
    theta.data[i] -= lr * weight_decay * theta.data[i] + lr * mh / (std::sqrt(vh) + eps);
  }
}

LossParts total_loss(TapeD& t, model::TapeBinder& bind, Var logits,
                     const std::vector<int>& labels, const TrainConfig& tc) {
  LossParts parts;
  Var loss = t.softmax_xent(logits, labels);
  parts.ce = t.val(loss)[0];
  const double ls = tc.no_l1l2 ? 0.0 : tc.lambda_s;
  const double lt = tc.no_l1l2 ? 0.0 : tc.lambda_t;
  const double b = tc.no_l1l2 ? 0.0 : tc.beta;
  if (ls > 0.0) {
    Var l1 = t.sum_all(t.abs_(bind.get("graph.delta_channel")));
    parts.l1_s = t.val(l1)[0];
    loss = t.add(loss, t.scale(l1, ls));
  }
  if (lt > 0.0) {
    Var l1 = t.sum_all(t.abs_(bind.get("graph.delta_slice")));
    parts.l1_t = t.val(l1)[0];
    loss = t.add(loss, t.scale(l1, lt));
  }
  if (b > 0.0) {
    Var sq{-1};
    bool first = true;
    // Sum over parameters the forward pass actually bound, excluding the
    // increments (they carry L1) and normalization shifts.
    std::vector<std::string> used = bind.used;
    for (const std::string& name : used) {
      if (model::l2_excluded(name)) continue;
      Var p = bind.get(name);
      Var term = t.sum_all(t.mul(p, p));
      sq = first ? term : t.add(sq, term);
      first = false;
    }
    if (!first) {
      parts.l2 = t.val(sq)[0];
      loss = t.add(loss, t.scale(sq, b));
    }
  }
  parts.loss = loss;
  return parts;
}

namespace {

double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == truth[i]) ++hit;
  return 100.0 * static_cast<double>(hit) / static_cast<double>(pred.size());
}

struct ValSet {
  std::vector<const model::TrialFeatures*> feats;
  std::vector<int> labels;
};

/// Fused and per-branch accuracies on a frozen snapshot.
void eval_val(const model::ModelConfig& cfg, const model::ModelOptions& opt,
              const model::ModelParams& params, const model::Priors& priors, const ValSet& vs,
              StepLog& log) {
  TapeD t;
  t.set_grad_enabled(false);
  model::TapeBinder bind{&t, &params, false, {}, {}};
  model::ForwardVars fv = model::build_forward(t, bind, cfg, opt, priors, vs.feats, nullptr);
  auto decode = [&](Var z) {
    const TensorD& zz = t.val(z);
    std::vector<int> out(static_cast<std::size_t>(zz.dim(0)), 0);
    for (int n = 0; n < zz.dim(0); ++n) {
      int best = 0;
      for (int k = 1; k < zz.dim(1); ++k)
        if (zz.at2(n, k) > zz.at2(n, best)) best = k;
      out[static_cast<std::size_t>(n)] = best;
    }
    return out;
  };
  log.has_val = true;
  log.val_acc = accuracy(decode(fv.fused), vs.labels);
  if (opt.branches.a) log.val_acc_a = accuracy(decode(fv.z_a), vs.labels);
  if (opt.branches.b) log.val_acc_b = accuracy(decode(fv.z_b), vs.labels);
  if (opt.branches.c) log.val_acc_c = accuracy(decode(fv.z_c), vs.labels);
}

TrainResult run_loop(const std::vector<data::Trial>& trials, const model::ModelConfig& cfg,
                     const TrainConfig& tc, const std::string& out_dir,
                     const StepObserver& observer, int epochs, double lr_max,
                     const model::Checkpoint* resume) {
  cfg.validate();
  tc.validate();
  if (trials.empty()) fail("empty-split", "training needs at least one trial");
  model::ModelOptions opt = resume ? resume->options : tc.options();

  std::vector<model::TrialFeatures> feats;
  feats.reserve(trials.size());
  // A resumed run keeps the checkpoint priors, so per-trial phase locking
  // would go unused.
  const bool need_plv = !tc.no_plv && resume == nullptr;
  for (const auto& tr : trials) feats.push_back(model::featurize_trial(tr, cfg, !need_plv));

  const int N = static_cast<int>(feats.size());
  std::vector<int> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), 0);
  {
    rng::Stream vs = rng::substream(tc.seed, "valsplit");
    vs.shuffle(order);
  }
  int n_val = 0;
  if (resume == nullptr && tc.val_fraction > 0.0 && N >= 5)
    n_val = std::max(1, static_cast<int>(std::lround(tc.val_fraction * N)));
  std::vector<int> val_idx(order.end() - n_val, order.end());
  std::vector<int> train_idx(order.begin(), order.end() - n_val);
  if (train_idx.empty()) fail("empty-split", "validation holdout consumed every trial");

  std::vector<model::TrialFeatures> train_feats;
  for (int i : train_idx) train_feats.push_back(feats[static_cast<std::size_t>(i)]);
  model::Priors priors = resume ? resume->priors : model::build_priors(train_feats, cfg, tc.no_plv);

  model::ModelParams params;
  if (resume) {
    params = resume->params;
  } else {
    rng::Stream init = rng::substream(tc.seed, "init");
    params = model::init_params(cfg, opt, init);
  }

  std::vector<TensorD> m_state, v_state;
  for (const std::string& name : params.names) {
    m_state.push_back(TensorD::zeros(params.at(name).shape));
    v_state.push_back(TensorD::zeros(params.at(name).shape));
  }

  ValSet vs;
  for (int i : val_idx) {
    vs.feats.push_back(&feats[static_cast<std::size_t>(i)]);
    vs.labels.push_back(feats[static_cast<std::size_t>(i)].label);
  }

  const int n_train = static_cast<int>(train_feats.size());
  const long steps_per_epoch = (n_train + tc.batch_size - 1) / tc.batch_size;
  const long total_steps = static_cast<long>(epochs) * steps_per_epoch;
  const long t_max = total_steps - 1;

  TrainResult res;
  res.history.reserve(static_cast<std::size_t>(std::max<long>(total_steps, 0)));
  model::ModelParams best_params = params;
  double best_val = -1.0;

  long step = 0;
  std::vector<int> perm(train_feats.size());
  std::iota(perm.begin(), perm.end(), 0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng::Stream sh = rng::substream(tc.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    sh.shuffle(perm);
    for (long bstart = 0; bstart < n_train; bstart += tc.batch_size) {
      long bend = std::min<long>(bstart + tc.batch_size, n_train);
      std::vector<const model::TrialFeatures*> batch;
      std::vector<int> labels;
      for (long i = bstart; i < bend; ++i) {
        const auto& f = train_feats[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        batch.push_back(&f);
        labels.push_back(f.label);
      }

      TapeD t;
      model::TapeBinder bind{&t, &params, true, {}, {}};
      rng::Stream drop = rng::substream(tc.seed, "dropout", static_cast<std::uint64_t>(step));
      rng::Stream* dropp = cfg.dropout > 0.0 ? &drop : nullptr;
      model::ForwardVars fv = model::build_forward(t, bind, cfg, opt, priors, batch, dropp);
      LossParts lp = total_loss(t, bind, fv.fused, labels, tc);
      double loss_val = t.val(lp.loss)[0];
      t.backward(lp.loss);

      double lr = cosine_lr(step, t_max, lr_max, tc.lr_min);
      if (!std::isfinite(loss_val)) {
        double gn2 = 0.0;
        for (const auto& [name, var] : bind.vars) {
          TensorD g = t.grad(var);
          for (double gv : g.data) gn2 += gv * gv;
        }
        fail("nan-loss", "non-finite loss at step " + std::to_string(step) + ", lr " +
                             std::to_string(lr) + ", grad norm " + std::to_string(std::sqrt(gn2)));
      }

      ++step;
      for (std::size_t pi = 0; pi < params.names.size(); ++pi) {
        const std::string& name = params.names[pi];
        auto it = bind.vars.find(name);
        if (it == bind.vars.end()) continue;
        if (tc.fixed_spatial_adjacency && name == "graph.delta_channel") continue;
        TensorD g = t.grad(it->second);
        adamw_step(params.at(name), g, m_state[pi], v_state[pi], step, lr, tc.beta1, tc.beta2,
                   tc.adam_eps, tc.weight_decay);
      }

      StepLog log;
      log.step = step - 1;
      log.epoch = epoch;
      log.lr = lr;
      log.loss = loss_val;
      log.ce = lp.ce;
      log.l1_s = lp.l1_s;
      log.l1_t = lp.l1_t;
      log.l2 = lp.l2;
      res.history.push_back(log);

      if (observer && fv.eff_channel.id >= 0)
        observer(step - 1, t.val(fv.eff_channel), t.val(fv.eff_slice));
    }

    if (!vs.feats.empty() && !res.history.empty()) {
      eval_val(cfg, opt, params, priors, vs, res.history.back());
      double va = res.history.back().val_acc;
      if (va > best_val) {
        best_val = va;
        best_params = params;
      }
    }
  }

  res.best_val_acc = best_val;
  res.final_ck = model::Checkpoint{cfg, opt, tc.seed, std::move(params), priors};
  res.best_ck = model::Checkpoint{cfg, opt, tc.seed,
                                  best_val >= 0.0 ? std::move(best_params) : res.final_ck.params,
                                  priors};

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    model::save_checkpoint(res.final_ck, (fs::path(out_dir) / "final").string());
    model::save_checkpoint(res.best_ck, (fs::path(out_dir) / "best").string());
    std::ofstream hf(fs::path(out_dir) / "history.jsonl");
    if (!hf) fail("io-error", "cannot write history in " + out_dir);
    hf << history_to_jsonl(res.history);
  }
  return res;
}

}  // namespace

TrainResult train_model(const std::vector<data::Trial>& trials, const model::ModelConfig& cfg,
                        const TrainConfig& tc, const std::string& out_dir,
                        const StepObserver& observer) {
  return run_loop(trials, cfg, tc, out_dir, observer, tc.epochs, tc.lr, nullptr);
}

TrainResult finetune(const model::Checkpoint& start, const std::vector<data::Trial>& adapt,
                     const TrainConfig& tc, const std::string& out_dir) {
  if (adapt.empty()) fail("empty-split", "finetuning needs at least one trial");
  if (adapt.front().data.dim(0) != start.config.n_channels ||
      adapt.front().data.dim(1) != start.config.n_samples)
    fail("hyper-mismatch", "adaptation trials do not match the checkpoint geometry");
  if (tc.finetune_epochs == 0) {
    TrainResult res;
    res.final_ck = start;
    res.best_ck = start;
    return res;
  }
  TrainConfig ft = tc;
  ft.seed = rng::derive(tc.seed, "finetune");
  return run_loop(adapt, start.config, ft, out_dir, {}, tc.finetune_epochs, tc.finetune_lr,
                  &start);
}

double gradient_fidelity(std::uint64_t seed) {
  model::ModelConfig cfg;
  cfg.n_channels = 4;
  cfg.n_classes = 3;
  cfg.n_samples = 48;
  cfg.window_len = 16;
  cfg.stride = 16;
  cfg.d = 5;
  cfg.k_s = 1;
  cfg.k_t = 1;
  cfg.kernel = 3;
  cfg.mfm.width = 3;
  cfg.mfm.kernel = 3;
  cfg.dropout = 0.0;
  cfg.top_k = 2;
  model::ModelOptions opt;

  rng::Stream st(seed);
  const int W = cfg.n_windows();
  std::vector<model::TrialFeatures> feats(2);
  for (auto& f : feats) {
    f.windows = TensorD({W, cfg.n_channels, cfg.window_len});
    for (auto& v : f.windows.data) v = st.normal();
    const int p = 5;
    const int q = (cfg.n_samples + p - 1) / p;
    f.periods = {p};
    f.images.emplace_back(ad::Shape{cfg.n_channels, p, q});
    for (auto& v : f.images.back().data) v = st.normal();
    f.label = static_cast<int>(st.below(static_cast<std::uint64_t>(cfg.n_classes)));
  }
  model::Priors priors = model::build_priors(feats, cfg, true);

  rng::Stream init = rng::substream(seed, "init");
  model::ModelParams params = model::init_params(cfg, opt, init);
  // The increments start at zero, where relu(base + delta) sits on its kink
  // off the retained edges. Nudging them strictly positive keeps the
  // difference quotient on one side.
  for (const char* name : {"graph.delta_channel", "graph.delta_slice"}) {
    for (double& v : params.at(name).data) v = 0.02 + 0.06 * st.uniform();
  }

  TrainConfig tc;
  std::vector<const model::TrialFeatures*> batch{&feats[0], &feats[1]};
  std::vector<int> labels{feats[0].label, feats[1].label};

  std::vector<TensorD> ordered;
  ordered.reserve(params.names.size());
  for (const auto& name : params.names) ordered.push_back(params.at(name));
  auto build = [&](ad::TapeD& t, const std::vector<ad::TapeD::Var>& vs) {
    model::TapeBinder bind{&t, &params, true, {}, {}};
    for (std::size_t i = 0; i < params.names.size(); ++i) {
      bind.vars.emplace(params.names[i], vs[i]);
      bind.used.push_back(params.names[i]);
    }
    model::ForwardVars fv = model::build_forward(t, bind, cfg, opt, priors, batch, nullptr);
    return total_loss(t, bind, fv.fused, labels, tc).loss;
  };
  return ad::grad_check(ordered, build, 1e-5, -1, 1, 1e-7).max_rel;
}

std::string history_to_jsonl(const std::vector<StepLog>& history) {
  std::string out;
  for (const StepLog& s : history) {
    json j{{"step", s.step}, {"epoch", s.epoch}, {"lr", s.lr},     {"loss", s.loss},
           {"ce", s.ce},     {"l1_s", s.l1_s},  {"l1_t", s.l1_t}, {"l2", s.l2}};
    if (s.has_val) {
      j["val_acc"] = s.val_acc;
      if (s.val_acc_a >= 0.0) j["val_acc_a"] = s.val_acc_a;
      if (s.val_acc_b >= 0.0) j["val_acc_b"] = s.val_acc_b;
      if (s.val_acc_c >= 0.0) j["val_acc_c"] = s.val_acc_c;
    }
    out += j.dump();
    out += "\n";
  }
  return out;
}

}  // namespace stgmfm::train
