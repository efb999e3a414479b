// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int status = -1;
  std::string out;
  std::string err;
};

fs::path work_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "stgmfm_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

CmdResult run_cli(const std::string& args) {
  static int n = 0;
  fs::path of = work_root() / ("stdout_" + std::to_string(n) + ".txt");
  fs::path ef = work_root() / ("stderr_" + std::to_string(n) + ".txt");
  ++n;
  std::string cmd = std::string(STGMFM_CLI_PATH) + " " + args + " > " + of.string() + " 2> " +
                    ef.string();
  int raw = std::system(cmd.c_str());
  CmdResult r;
  if (raw != -1 && WIFEXITED(raw)) r.status = WEXITSTATUS(raw);
  r.out = slurp(of);
  r.err = slurp(ef);
  return r;
}

/// Small geometry and a two-epoch budget so every subcommand runs in seconds.
fs::path write_config() {
  fs::path p = work_root() / "cfg.json";
  std::ofstream f(p);
  f << R"({
  "synth.n_subjects": 2,
  "synth.n_sessions": 2,
  "synth.trials_per_class": 2,
  "synth.n_channels": 8,
  "synth.n_samples": 250,
  "synth.n_classes": 3,
  "synth.sample_rate_hz": 250.0,
  "synth.snr_db": 1e9,
  "synth.drift_amp": 0.0,
  "synth.transient_rate": 0.0,
  "synth.erd_depth": 0.8,
  "model.window_len": 125,
  "model.stride": 125,
  "model.d": 6,
  "model.k_s": 1,
  "model.k_t": 1,
  "model.kernel": 9,
  "model.mfm_width": 4,
  "model.mfm_kernel": 3,
  "model.mfm_top_periods": 2,
  "model.dropout": 0.0,
  "model.top_k": 3,
  "train.epochs": 2,
  "train.batch_size": 8,
  "train.val_fraction": 0.25,
  "train.finetune_epochs": 1
})";
  return p;
}

bool same_dataset_bytes(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> names;
  for (const auto& e : fs::directory_iterator(a))
    if (e.path().filename() != "config.json") names.push_back(e.path().filename());
  for (const auto& name : names) {
    if (!fs::exists(b / name)) return false;
    if (slurp(a / name) != slurp(b / name)) return false;
  }
  return !names.empty();
}

}  // namespace

TEST_CASE("dataset synthesis is reproducible from the seed alone") {
  fs::path cfg = write_config();
  fs::path da = work_root() / "data_a";
  fs::path db = work_root() / "data_b";
  fs::path dc = work_root() / "data_c";

  CmdResult r1 = run_cli("synth --config " + cfg.string() + " --seed 7 --out " + da.string());
  REQUIRE(r1.status == 0);
  CHECK(r1.out.find("wrote 24 trials") != std::string::npos);
  CmdResult r2 = run_cli("synth --config " + cfg.string() + " --seed 7 --out " + db.string());
  REQUIRE(r2.status == 0);
  CHECK(same_dataset_bytes(da, db));

  CmdResult r3 = run_cli("synth --config " + cfg.string() + " --seed 8 --out " + dc.string());
  REQUIRE(r3.status == 0);
  CHECK_FALSE(same_dataset_bytes(da, dc));

  // The run directory carries the resolved configuration.
  nlohmann::json echo = nlohmann::json::parse(slurp(da / "config.json"));
  CHECK(echo["seed"] == 7);
  CHECK(echo["synth.n_channels"] == 8);
  CHECK(echo["train.epochs"] == 2);
}

TEST_CASE("train, evaluate, fine-tune, and dump graphs end to end") {
  fs::path cfg = write_config();
  fs::path data = work_root() / "data_pipeline";
  REQUIRE(run_cli("synth --config " + cfg.string() + " --seed 3 --out " + data.string()).status ==
          0);

  fs::path tdir = work_root() / "train_run";
  CmdResult tr =
      run_cli("train --config " + cfg.string() + " --seed 3 --data " + data.string() + " --out " +
              tdir.string());
  REQUIRE(tr.status == 0);
  CHECK(tr.out.find("trained") != std::string::npos);
  CHECK(tr.out.find("best validation acc") != std::string::npos);
  CHECK(fs::exists(tdir / "final" / "params.json"));
  CHECK(fs::exists(tdir / "best" / "params.json"));
  CHECK(fs::exists(tdir / "history.jsonl"));
  CHECK(fs::exists(tdir / "config.json"));

  fs::path edir = work_root() / "eval_run";
  CmdResult ev = run_cli("eval --data " + data.string() + " --model " + (tdir / "final").string() +
                         " --out " + edir.string());
  REQUIRE(ev.status == 0);
  CHECK(ev.out.rfind("acc=", 0) == 0);
  CHECK(ev.out.find("kappa=") != std::string::npos);
  CHECK(ev.out.find("f1=") != std::string::npos);
  nlohmann::json metrics = nlohmann::json::parse(slurp(edir / "metrics.json"));
  CHECK(metrics["n_trials"] == 24);
  std::string conf = slurp(edir / "confusion.csv");
  CHECK(std::count(conf.begin(), conf.end(), '\n') == 3);

  CmdResult mv = run_cli("eval --data " + data.string() + " --model " + (tdir / "final").string() +
                         " --majority-vote");
  REQUIRE(mv.status == 0);
  CHECK(mv.out.rfind("acc=", 0) == 0);

  fs::path fdir = work_root() / "finetune_run";
  CmdResult ft = run_cli("finetune --config " + cfg.string() + " --data " + data.string() +
                         " --model " + (tdir / "final").string() + " --out " + fdir.string());
  REQUIRE(ft.status == 0);
  CHECK(ft.out.find("fine-tuned") != std::string::npos);
  CHECK(fs::exists(fdir / "final" / "params.json"));

  fs::path gdir = work_root() / "graphs_run";
  CmdResult gd =
      run_cli("graph-dump --model " + (tdir / "final").string() + " --out " + gdir.string());
  REQUIRE(gd.status == 0);
  for (const char* name :
       {"channel_prior.csv", "channel_effective.csv", "slice_prior.csv", "slice_effective.csv"})
    CHECK(fs::exists(gdir / name));
  std::string prior = slurp(gdir / "channel_prior.csv");
  CHECK(prior.rfind("# channel_prior,8", 0) == 0);
}

TEST_CASE("protocol subcommand prints the fold table") {
  fs::path cfg = write_config();
  fs::path data = work_root() / "data_protocol";
  REQUIRE(run_cli("synth --config " + cfg.string() + " --seed 5 --out " + data.string()).status ==
          0);
  fs::path pdir = work_root() / "protocol_run";
  CmdResult pr = run_cli("protocol --config " + cfg.string() + " --seed 5 --data " +
                         data.string() + " --out " + pdir.string() +
                         " --protocol cross-subject --jobs 2");
  REQUIRE(pr.status == 0);
  CHECK(pr.out.rfind("fold,subject,acc,kappa,f1", 0) == 0);
  CHECK(pr.out.find("AVG±STD") != std::string::npos);
  CHECK(fs::exists(pdir / "results.csv"));
  CHECK(fs::exists(pdir / "results.json"));
  CHECK(slurp(pdir / "results.csv") == pr.out);
}

TEST_CASE("gradient check subcommand reports and gates on the error") {
  CmdResult r = run_cli("gradcheck");
  CHECK(r.status == 0);
  CHECK(r.out.find("max relative error") != std::string::npos);
}

TEST_CASE("failures arrive as coded error lines on stderr") {
  CmdResult missing = run_cli("synth");
  CHECK(missing.status == 1);
  CHECK(missing.err.rfind("error: invalid-config:", 0) == 0);
  CHECK(missing.err.find("--out") != std::string::npos);

  CmdResult nodata =
      run_cli("train --data " + (work_root() / "no_such_dir").string() + " --out " +
              (work_root() / "x").string());
  CHECK(nodata.status == 1);
  CHECK(nodata.err.rfind("error: corrupt-manifest:", 0) == 0);

  fs::path bad = work_root() / "bad.json";
  std::ofstream(bad) << "{ nope";
  CmdResult badcfg = run_cli("synth --config " + bad.string() + " --out " +
                             (work_root() / "y").string());
  CHECK(badcfg.status == 1);
  CHECK(badcfg.err.rfind("error: invalid-config:", 0) == 0);

  fs::path unknown = work_root() / "unknown.json";
  std::ofstream(unknown) << R"({"nope.key": 1})";
  CmdResult unk = run_cli("synth --config " + unknown.string() + " --out " +
                          (work_root() / "z").string());
  CHECK(unk.status == 1);
  CHECK(unk.err.find("unknown config key 'nope.key'") != std::string::npos);

  CmdResult badflag = run_cli("synth --bogus");
  CHECK(badflag.status == 2);
  CHECK(badflag.err.rfind("error: cli:", 0) == 0);

  CmdResult nosub = run_cli("");
  CHECK(nosub.status == 2);

  CmdResult help = run_cli("--help");
  CHECK(help.status == 0);
  CHECK(help.out.find("synth") != std::string::npos);
}
