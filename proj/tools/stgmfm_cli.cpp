// SPDX-License-Identifier: Apache-2.0
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "stgmfm/config.hpp"
#include "stgmfm/dataio.hpp"
#include "stgmfm/error.hpp"
#include "stgmfm/evaluate.hpp"
#include "stgmfm/graphs.hpp"
#include "stgmfm/model.hpp"
#include "stgmfm/train.hpp"

namespace fs = std::filesystem;
using namespace stgmfm;

namespace {

struct Args {
  std::string config_path;
  std::string data;
  std::string out;
  std::string model_dir;
  std::string protocol;
  std::string branches;
  std::uint64_t seed = 0;
  int jobs = 0;
  bool no_plv = false;
  bool fixed_adjacency = false;
  bool no_reg = false;
  bool gated_fusion = false;
  bool majority_vote = false;
  bool decode_branch_a = false;
};

bool given(const CLI::App* sub, const std::string& name) {
  const CLI::Option* opt = sub->get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

config::RunConfig make_run_config(const Args& a, const CLI::App* sub) {
  config::RunConfig rc;
  if (given(sub, "--config")) rc = config::load_run_config(a.config_path);
  if (given(sub, "--seed")) rc.seed = a.seed;
  if (given(sub, "--data")) rc.data_path = a.data;
  if (given(sub, "--out")) rc.out_dir = a.out;
  if (given(sub, "--model")) rc.model_dir = a.model_dir;
  if (given(sub, "--protocol")) rc.protocol = a.protocol;
  if (given(sub, "--jobs")) rc.jobs = a.jobs;
  if (a.no_plv) rc.train.no_plv = true;
  if (a.fixed_adjacency) rc.train.fixed_spatial_adjacency = true;
  if (a.no_reg) rc.train.no_l1l2 = true;
  if (given(sub, "--branches")) rc.train.branches = config::branches_from_string(a.branches);
  if (a.gated_fusion) rc.train.gated_fusion = true;
  if (a.majority_vote) rc.majority_vote = true;
  if (a.decode_branch_a) rc.decode_branch_a = true;
  return rc;
}

void adopt_geometry(config::RunConfig& rc, const data::Manifest& m) {
  rc.model.n_channels = m.num_channels;
  rc.model.n_classes = m.num_classes;
  rc.model.n_samples = m.num_samples;
  rc.model.sample_rate_hz = m.sample_rate_hz;
}

/// Every run directory carries the resolved configuration that produced it.
void echo_config(const config::RunConfig& rc, const std::string& dir) {
  fs::create_directories(dir);
  config::save_run_config(rc, (fs::path(dir) / "config.json").string());
}

void require(bool ok, const std::string& what) {
  if (!ok) fail("invalid-config", "missing required option " + what);
}

int run_synth(const Args& a, const CLI::App* sub) {
  config::RunConfig rc = make_run_config(a, sub);
  require(!rc.out_dir.empty(), "--out");
  rc.resolve();
  data::Dataset ds = data::synth_generate(rc.synth);
  data::save_dataset(ds, rc.out_dir);
  echo_config(rc, rc.out_dir);
  std::printf("wrote %zu trials to %s\n", ds.trials.size(), rc.out_dir.c_str());
  return 0;
}

int run_train(const Args& a, const CLI::App* sub) {
  config::RunConfig rc = make_run_config(a, sub);
  require(!rc.data_path.empty(), "--data");
  require(!rc.out_dir.empty(), "--out");
  data::Dataset ds = data::load_dataset(rc.data_path);
  adopt_geometry(rc, ds.manifest);
  rc.resolve();
  echo_config(rc, rc.out_dir);
  train::TrainResult res = train::train_model(ds.trials, rc.model, rc.train, rc.out_dir);
  if (res.best_val_acc >= 0.0)
    std::printf("trained %zu steps, best validation acc %.2f\n", res.history.size(),
                res.best_val_acc);
  else
    std::printf("trained %zu steps\n", res.history.size());
  return 0;
}

int run_protocol(const Args& a, const CLI::App* sub) {
  config::RunConfig rc = make_run_config(a, sub);
  require(!rc.data_path.empty(), "--data");
  require(!rc.out_dir.empty(), "--out");
  data::Dataset ds = data::load_dataset(rc.data_path);
  adopt_geometry(rc, ds.manifest);
  rc.resolve();
  echo_config(rc, rc.out_dir);
  eval::ProtocolResult res = eval::run_protocol(ds, rc, rc.out_dir);
  std::fputs(eval::results_csv(res).c_str(), stdout);
  return 0;
}

int run_finetune(const Args& a, const CLI::App* sub) {
  config::RunConfig rc = make_run_config(a, sub);
  require(!rc.data_path.empty(), "--data");
  require(!rc.model_dir.empty(), "--model");
  require(!rc.out_dir.empty(), "--out");
  rc.resolve();
  model::Checkpoint ck = model::load_checkpoint(rc.model_dir);
  data::Dataset ds = data::load_dataset(rc.data_path);
  echo_config(rc, rc.out_dir);
  train::TrainResult res = train::finetune(ck, ds.trials, rc.train, rc.out_dir);
  std::printf("fine-tuned %zu steps\n", res.history.size());
  return 0;
}

int run_eval(const Args& a, const CLI::App* sub) {
  config::RunConfig rc = make_run_config(a, sub);
  require(!rc.data_path.empty(), "--data");
  require(!rc.model_dir.empty(), "--model");
  model::Checkpoint ck = model::load_checkpoint(rc.model_dir);
  if (rc.decode_branch_a) ck.options.decode_branch_a = true;
  data::Dataset ds = data::load_dataset(rc.data_path);
  eval::EvalResult res = eval::evaluate_model(ck, ds, rc.majority_vote);
  std::printf("acc=%.2f kappa=%.4f f1=%.2f\n", res.metrics.acc, res.metrics.kappa,
              res.metrics.f1);
  if (!rc.out_dir.empty()) {
    echo_config(rc, rc.out_dir);
    nlohmann::json j{{"acc", res.metrics.acc},
                     {"kappa", res.metrics.kappa},
                     {"f1", res.metrics.f1},
                     {"n_trials", res.confusion.total()}};
    std::ofstream mf(fs::path(rc.out_dir) / "metrics.json");
    if (!mf) fail("io-error", "cannot write metrics.json in " + rc.out_dir);
    mf << j.dump(2) << "\n";
    std::ofstream cf(fs::path(rc.out_dir) / "confusion.csv");
    if (!cf) fail("io-error", "cannot write confusion.csv in " + rc.out_dir);
    for (int r = 0; r < res.confusion.k; ++r) {
      for (int c = 0; c < res.confusion.k; ++c)
        cf << res.confusion.at(r, c) << (c + 1 < res.confusion.k ? ',' : '\n');
    }
  }
  return 0;
}

int run_graph_dump(const Args& a, const CLI::App* sub) {
  config::RunConfig rc = make_run_config(a, sub);
  require(!rc.model_dir.empty(), "--model");
  require(!rc.out_dir.empty(), "--out");
  model::Checkpoint ck = model::load_checkpoint(rc.model_dir);
  fs::create_directories(rc.out_dir);
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream f(fs::path(rc.out_dir) / name);
    if (!f) fail("io-error", "cannot write " + name + " in " + rc.out_dir);
    f << text;
  };
  graphs::Adjacency ch = ck.priors.channel;
  graphs::Adjacency sl = ck.priors.slice;
  if (ck.params.has("graph.delta_channel")) ch.delta = ck.params.at("graph.delta_channel");
  if (ck.params.has("graph.delta_slice")) sl.delta = ck.params.at("graph.delta_slice");
  write("channel_prior.csv", graphs::adjacency_csv(ch.prior, "channel_prior"));
  write("channel_effective.csv",
        graphs::adjacency_csv(graphs::effective_adjacency(ch), "channel_effective"));
  write("slice_prior.csv", graphs::adjacency_csv(sl.prior, "slice_prior"));
  write("slice_effective.csv",
        graphs::adjacency_csv(graphs::effective_adjacency(sl), "slice_effective"));
  std::printf("wrote 4 adjacency tables to %s\n", rc.out_dir.c_str());
  return 0;
}

int run_gradcheck(const Args& a, const CLI::App* sub) {
  std::uint64_t seed = given(sub, "--seed") ? a.seed : 7;
  double max_rel = train::gradient_fidelity(seed);
  std::printf("max relative error %.3e\n", max_rel);
  return max_rel < 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tri-branch graph decoder for dry-electrode motor imagery EEG"};
  app.require_subcommand(1);

  Args a;
  auto add_common = [&a](CLI::App* sub) {
    sub->add_option("--config", a.config_path, "flat JSON configuration file");
    sub->add_option("--seed", a.seed, "root seed for every derived stream");
    sub->add_option("--out", a.out, "output directory");
  };
  auto add_data = [&a](CLI::App* sub) {
    sub->add_option("--data", a.data, "dataset directory");
  };
  auto add_model = [&a](CLI::App* sub) {
    sub->add_option("--model", a.model_dir, "checkpoint directory");
  };
  auto add_ablations = [&a](CLI::App* sub) {
    sub->add_flag("--no-plv", a.no_plv, "index-neighborhood prior instead of phase locking");
    sub->add_flag("--fixed-adjacency", a.fixed_adjacency, "freeze the channel-graph increment");
    sub->add_flag("--no-reg", a.no_reg, "drop the L1 and L2 terms from the loss");
    sub->add_option("--branches", a.branches, "enabled branches, e.g. A,B,C");
    sub->add_flag("--gated-fusion", a.gated_fusion, "sigmoid gate per branch before fusion");
  };
  auto add_decode = [&a](CLI::App* sub) {
    sub->add_flag("--majority-vote", a.majority_vote, "per-slice decoding with plurality vote");
    sub->add_flag("--decode-branch-a", a.decode_branch_a, "decode from branch A alone");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic EEG dataset");
  add_common(synth);

  CLI::App* train_cmd = app.add_subcommand("train", "train on one dataset split");
  add_common(train_cmd);
  add_data(train_cmd);
  add_ablations(train_cmd);

  CLI::App* protocol = app.add_subcommand("protocol", "run a full cross-validation protocol");
  add_common(protocol);
  add_data(protocol);
  add_ablations(protocol);
  add_decode(protocol);
  protocol->add_option("--protocol", a.protocol,
                       "cross-session, cross-subject, or cross-subject-ft");
  protocol->add_option("--jobs", a.jobs, "parallel folds");

  CLI::App* finetune = app.add_subcommand("finetune", "adapt a checkpoint to new trials");
  add_common(finetune);
  add_data(finetune);
  add_model(finetune);

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd);
  add_data(eval_cmd);
  add_model(eval_cmd);
  add_decode(eval_cmd);

  CLI::App* graph_dump = app.add_subcommand("graph-dump", "dump prior and learned adjacencies");
  add_common(graph_dump);
  add_model(graph_dump);

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference check of the full model gradient");
  add_common(gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::fprintf(stderr, "error: cli: %s\n", e.what());
    return 2;
  }

  try {
    if (synth->parsed()) return run_synth(a, synth);
    if (train_cmd->parsed()) return run_train(a, train_cmd);
    if (protocol->parsed()) return run_protocol(a, protocol);
    if (finetune->parsed()) return run_finetune(a, finetune);
    if (eval_cmd->parsed()) return run_eval(a, eval_cmd);
    if (graph_dump->parsed()) return run_graph_dump(a, graph_dump);
    if (gradcheck->parsed()) return run_gradcheck(a, gradcheck);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", e.code().c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
    return 1;
  }
  return 0;
}
