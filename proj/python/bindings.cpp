// SPDX-License-Identifier: Apache-2.0
#include <pybind11/complex.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "stgmfm/config.hpp"
#include "stgmfm/dataio.hpp"
#include "stgmfm/dsp.hpp"
#include "stgmfm/error.hpp"
#include "stgmfm/evaluate.hpp"
#include "stgmfm/graphs.hpp"
#include "stgmfm/model.hpp"
#include "stgmfm/train.hpp"

namespace py = pybind11;
using namespace stgmfm;

namespace {

ad::TensorD tensor_from_np(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  ad::Shape shape;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<int>(a.shape(i)));
  ad::TensorD t(shape);
  std::memcpy(t.data.data(), a.data(), sizeof(double) * t.data.size());
  return t;
}

py::array_t<double> np_from_tensor(const ad::TensorD& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<double> a(shape);
  std::memcpy(a.mutable_data(), t.data.data(), sizeof(double) * t.data.size());
  return a;
}

/// Flat dotted-key overrides, applied through the same codec as --config files.
config::RunConfig config_from_dict(const py::dict& overrides) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& item : overrides) {
    const std::string key = py::cast<std::string>(item.first);
    const py::handle v = item.second;
    if (py::isinstance<py::bool_>(v))
      j[key] = py::cast<bool>(v);
    else if (py::isinstance<py::int_>(v))
      j[key] = py::cast<long long>(v);
    else if (py::isinstance<py::float_>(v))
      j[key] = py::cast<double>(v);
    else if (py::isinstance<py::str>(v))
      j[key] = py::cast<std::string>(v);
    else
      fail("invalid-config", "config value for '" + key + "' must be a scalar");
  }
  config::RunConfig rc;
  config::apply_flat_json_text(rc, j.dump());
  return rc;
}

config::RunConfig pipeline_config(const py::dict& overrides, const py::object& seed) {
  config::RunConfig rc = config_from_dict(overrides);
  if (!seed.is_none()) rc.seed = py::cast<std::uint64_t>(seed);
  return rc;
}

void adopt_geometry(config::RunConfig& rc, const data::Manifest& m) {
  rc.model.n_channels = m.num_channels;
  rc.model.n_classes = m.num_classes;
  rc.model.n_samples = m.num_samples;
  rc.model.sample_rate_hz = m.sample_rate_hz;
}

py::dict metrics_dict(const eval::Metrics& m) {
  py::dict d;
  d["acc"] = m.acc;
  d["kappa"] = m.kappa;
  d["f1"] = m.f1;
  return d;
}

py::dict adjacency_dict(const graphs::Adjacency& adj) {
  py::dict d;
  d["base"] = np_from_tensor(adj.base);
  d["prior"] = np_from_tensor(adj.prior);
  return d;
}

}  // namespace

PYBIND11_MODULE(_stgmfm, m) {
  m.doc() = "tri-branch graph decoder for dry-electrode motor imagery EEG";

  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      std::string msg = e.code() + ": " + e.what();
      PyErr_SetString(PyExc_ValueError, msg.c_str());
    }
  });

  // Signal primitives.
  m.def(
      "rfft",
      [](const std::vector<double>& x) {
        dsp::Spectrum s = dsp::rfft(x);
        return py::array_t<std::complex<double>>(
            static_cast<py::ssize_t>(s.bins.size()), s.bins.data());
      },
      py::arg("x"), "Half-spectrum of a real signal, unnormalized forward convention.");
  m.def(
      "analytic_phase",
      [](const std::vector<double>& x) { return dsp::analytic_phase(x).phi; }, py::arg("x"),
      "Instantaneous phase of the analytic signal, radians.");
  m.def("bandpass", &dsp::bandpass, py::arg("x"), py::arg("lo_hz"), py::arg("hi_hz"),
        py::arg("fs"), "Brick-wall frequency-domain bandpass.");
  m.def("rms_envelope", &dsp::rms_envelope, py::arg("x"), py::arg("win"),
        "Sliding RMS with reflective left padding.");
  m.def(
      "dominant_periods",
      [](const std::vector<double>& x, int k) {
        std::vector<std::pair<int, double>> out;
        for (const dsp::PeriodPick& p : dsp::dominant_periods(x, k))
          out.emplace_back(p.period, p.amplitude);
        return out;
      },
      py::arg("x"), py::arg("k"),
      "Top-k non-DC periods as (samples, magnitude), strongest first.");
  m.def("window_count", &data::window_count, py::arg("n_samples"), py::arg("window_len"),
        py::arg("stride"), "floor((T - W_n)/Str) + 1.");

  // Graph primitives.
  m.def(
      "plv_from_phases",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& phases) {
        if (phases.ndim() != 2) fail("invalid-data", "phases must be a (C, T) array");
        std::vector<std::vector<double>> rows(static_cast<std::size_t>(phases.shape(0)));
        for (py::ssize_t c = 0; c < phases.shape(0); ++c) {
          rows[static_cast<std::size_t>(c)].assign(
              phases.data() + c * phases.shape(1), phases.data() + (c + 1) * phases.shape(1));
        }
        return np_from_tensor(graphs::plv_from_phases(rows));
      },
      py::arg("phases"), "Pairwise phase-locking values of per-channel phase series.");
  m.def(
      "build_prior",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& P, int k) {
        return adjacency_dict(graphs::build_prior(tensor_from_np(P), k));
      },
      py::arg("P"), py::arg("top_k"),
      "Sparsify, symmetrize, and degree-normalize a connectivity matrix.");
  m.def(
      "slice_prior", [](int W) { return adjacency_dict(graphs::slice_prior(W)); }, py::arg("W"),
      "Path-graph prior over time slices.");
  m.def(
      "degree_normalize",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& M) {
        return np_from_tensor(graphs::degree_normalize(tensor_from_np(M)));
      },
      py::arg("M"), "Symmetric degree normalization with an epsilon-guarded degree.");
  m.def(
      "effective_adjacency",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& base,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& delta) {
        graphs::Adjacency adj;
        adj.base = tensor_from_np(base);
        adj.delta = tensor_from_np(delta);
        return np_from_tensor(graphs::effective_adjacency(adj));
      },
      py::arg("base"), py::arg("delta"),
      "renormalize(relu(base + delta)) with zero diagonal and mean symmetrization.");
  m.def(
      "gcn_layer",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& eff,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& h,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& w,
         bool identity_activation) {
        return np_from_tensor(model::gcn_layer(tensor_from_np(eff), tensor_from_np(h),
                                               tensor_from_np(w), identity_activation));
      },
      py::arg("eff"), py::arg("h"), py::arg("w"), py::arg("identity_activation") = false,
      "One graph propagation step act(eff . h . w).");

  // Featurization.
  m.def(
      "featurize",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& data,
         double sample_rate_hz, const py::dict& config, bool no_plv) {
        if (data.ndim() != 2) fail("invalid-data", "trial data must be a (C, T) array");
        config::RunConfig rc = config_from_dict(config);
        rc.model.n_channels = static_cast<int>(data.shape(0));
        rc.model.n_samples = static_cast<int>(data.shape(1));
        rc.model.sample_rate_hz = sample_rate_hz;
        rc.model.validate();
        data::Trial trial;
        trial.data = tensor_from_np(data);
        trial.sample_rate_hz = sample_rate_hz;
        model::TrialFeatures f = model::featurize_trial(trial, rc.model, no_plv);
        py::dict d;
        d["windows"] = np_from_tensor(f.windows);
        d["periods"] = f.periods;
        py::list images;
        for (const auto& img : f.images) images.append(np_from_tensor(img));
        d["images"] = images;
        d["plv"] = f.plv.numel() > 0 ? py::object(np_from_tensor(f.plv)) : py::object(py::none());
        return d;
      },
      py::arg("data"), py::arg("sample_rate_hz") = 250.0, py::arg("config") = py::dict(),
      py::arg("no_plv") = false,
      "Standardized windows, period-folded envelope images, and the phase-locking matrix.");

  // Metrics and schedules.
  m.def(
      "metrics_from_confusion",
      [](const py::array_t<long long, py::array::c_style | py::array::forcecast>& counts) {
        if (counts.ndim() != 2 || counts.shape(0) != counts.shape(1))
          fail("invalid-data", "confusion matrix must be square");
        eval::ConfusionMatrix cm(static_cast<int>(counts.shape(0)));
        for (int i = 0; i < cm.k; ++i)
          for (int j = 0; j < cm.k; ++j) cm.at(i, j) = static_cast<long>(counts.at(i, j));
        return metrics_dict(eval::metrics_from_confusion(cm));
      },
      py::arg("counts"), "Accuracy, Cohen's kappa, and macro-F1 from a confusion matrix.");
  m.def("cosine_lr", &train::cosine_lr, py::arg("t"), py::arg("t_max"), py::arg("lr_max"),
        py::arg("lr_min"), "Closed-form cosine schedule value at step t.");
  m.def("gradient_fidelity", &train::gradient_fidelity, py::arg("seed") = 7,
        "Full-model finite-difference gradient error on a tiny geometry.");

  // Pipeline operations; directory layout matches the command-line tool.
  m.def(
      "synth",
      [](const std::string& out_dir, const py::dict& config, const py::object& seed) {
        config::RunConfig rc = pipeline_config(config, seed);
        rc.out_dir = out_dir;
        rc.resolve();
        data::Dataset ds = data::synth_generate(rc.synth);
        data::save_dataset(ds, out_dir);
        config::save_run_config(rc, out_dir + "/config.json");
        return ds.trials.size();
      },
      py::arg("out_dir"), py::arg("config") = py::dict(), py::arg("seed") = py::none(),
      "Generate a synthetic dataset; returns the trial count.");
  m.def(
      "train",
      [](const std::string& data_dir, const std::string& out_dir, const py::dict& config,
         const py::object& seed) {
        config::RunConfig rc = pipeline_config(config, seed);
        rc.data_path = data_dir;
        rc.out_dir = out_dir;
        data::Dataset ds = data::load_dataset(data_dir);
        adopt_geometry(rc, ds.manifest);
        rc.resolve();
        std::filesystem::create_directories(out_dir);
        config::save_run_config(rc, out_dir + "/config.json");
        train::TrainResult res = train::train_model(ds.trials, rc.model, rc.train, out_dir);
        py::dict d;
        d["steps"] = res.history.size();
        d["best_val_acc"] =
            res.best_val_acc >= 0.0 ? py::object(py::float_(res.best_val_acc)) : py::none();
        d["final_loss"] = res.history.empty() ? py::object(py::none())
                                              : py::object(py::float_(res.history.back().loss));
        return d;
      },
      py::arg("data_dir"), py::arg("out_dir"), py::arg("config") = py::dict(),
      py::arg("seed") = py::none(), "Train on one dataset split; writes final/, best/, history.");
  m.def(
      "finetune",
      [](const std::string& data_dir, const std::string& model_dir, const std::string& out_dir,
         const py::dict& config, const py::object& seed) {
        config::RunConfig rc = pipeline_config(config, seed);
        rc.resolve();
        model::Checkpoint ck = model::load_checkpoint(model_dir);
        data::Dataset ds = data::load_dataset(data_dir);
        train::TrainResult res = train::finetune(ck, ds.trials, rc.train, out_dir);
        return res.history.size();
      },
      py::arg("data_dir"), py::arg("model_dir"), py::arg("out_dir"),
      py::arg("config") = py::dict(), py::arg("seed") = py::none(),
      "Adapt a checkpoint to new trials; returns the step count.");
  m.def(
      "evaluate",
      [](const std::string& data_dir, const std::string& model_dir, bool majority_vote,
         bool decode_branch_a) {
        model::Checkpoint ck = model::load_checkpoint(model_dir);
        if (decode_branch_a) ck.options.decode_branch_a = true;
        data::Dataset ds = data::load_dataset(data_dir);
        eval::EvalResult res = eval::evaluate_model(ck, ds, majority_vote);
        py::dict d = metrics_dict(res.metrics);
        const int k = res.confusion.k;
        py::array_t<long long> conf({k, k});
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) conf.mutable_at(i, j) = res.confusion.at(i, j);
        d["confusion"] = conf;
        return d;
      },
      py::arg("data_dir"), py::arg("model_dir"), py::arg("majority_vote") = false,
      py::arg("decode_branch_a") = false, "Evaluate a checkpoint on a dataset directory.");
  m.def(
      "run_protocol",
      [](const std::string& data_dir, const std::string& protocol, const std::string& out_dir,
         const py::dict& config, const py::object& seed, int jobs) {
        config::RunConfig rc = pipeline_config(config, seed);
        rc.data_path = data_dir;
        rc.protocol = protocol;
        rc.jobs = jobs;
        data::Dataset ds = data::load_dataset(data_dir);
        adopt_geometry(rc, ds.manifest);
        rc.resolve();
        if (!out_dir.empty()) {
          std::filesystem::create_directories(out_dir);
          config::save_run_config(rc, out_dir + "/config.json");
        }
        eval::ProtocolResult res = eval::run_protocol(ds, rc, out_dir);
        py::list rows;
        for (const eval::FoldRow& row : res.rows) {
          py::dict r = metrics_dict(row.metrics);
          r["fold"] = row.fold;
          r["subject"] = row.subject;
          rows.append(r);
        }
        py::dict d;
        d["rows"] = rows;
        d["mean"] = metrics_dict(res.mean);
        d["std"] = metrics_dict(res.stdev);
        d["csv"] = eval::results_csv(res);
        return d;
      },
      py::arg("data_dir"), py::arg("protocol"), py::arg("out_dir") = std::string(),
      py::arg("config") = py::dict(), py::arg("seed") = py::none(), py::arg("jobs") = 1,
      "Run a cross-validation protocol; returns fold rows, aggregates, and the CSV table.");
}
