// SPDX-License-Identifier: Apache-2.0
#include "stgmfm/dataio.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

#include "json.hpp"
#include "stgmfm/dsp.hpp"
#include "stgmfm/error.hpp"
#include "stgmfm/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "trial payloads are little-endian floats; big-endian hosts are unsupported");

namespace stgmfm::data {

namespace fs = std::filesystem;
using nlohmann::json;

Protocol protocol_from_string(const std::string& s) {
  if (s == "cross-session") return Protocol::CrossSession;
  if (s == "cross-subject") return Protocol::CrossSubject;
  if (s == "cross-subject-ft") return Protocol::CrossSubjectFinetune;
  fail("invalid-protocol", "unknown protocol '" + s + "'");
}

std::string protocol_to_string(Protocol p) {
  switch (p) {
    case Protocol::CrossSession: return "cross-session";
    case Protocol::CrossSubject: return "cross-subject";
    case Protocol::CrossSubjectFinetune: return "cross-subject-ft";
  }
  return "?";
}

int window_count(int T, int W_n, int Str) {
  if (Str <= 0) fail("invalid-stride", "stride must be positive, got " + std::to_string(Str));
  if (W_n <= 0 || W_n > T)
    fail("invalid-window", "window length " + std::to_string(W_n) +
                               " out of range for trial length " + std::to_string(T));
  return (T - W_n) / Str + 1;
}

WindowedBatch window_trials(const Dataset& dataset, int W_n, int Str) {
  const int C = dataset.manifest.num_channels;
  const int T = dataset.manifest.num_samples;
  const int W = window_count(T, W_n, Str);
  const int N = static_cast<int>(dataset.trials.size());
  WindowedBatch batch;
  batch.window_len = W_n;
  batch.stride = Str;
  batch.tensor = ad::TensorD({N, W, C, W_n});
  for (int n = 0; n < N; ++n) {
    const ad::TensorD& x = dataset.trials[static_cast<std::size_t>(n)].data;
    for (int w = 0; w < W; ++w) {
      const int off = w * Str;
      for (int c = 0; c < C; ++c) {
        const double* src = x.ptr() + static_cast<std::size_t>(c) * T + off;
        double* dst = batch.tensor.ptr() +
                      (((static_cast<std::size_t>(n) * W + w) * C + c) * W_n);
        std::copy_n(src, W_n, dst);
      }
    }
  }
  return batch;
}

void imagery_interval(const SynthConfig& config, int& begin, int& end) {
  // 1.0 s to 3.5 s at the configured rate, clamped to the trial.
  begin = std::min(config.n_samples, static_cast<int>(std::lround(1.0 * config.sample_rate_hz)));
  end = std::min(config.n_samples, static_cast<int>(std::lround(3.5 * config.sample_rate_hz)));
}

namespace {

// Three disjoint channel groups acting as class-specific spatial patterns.
std::vector<int> class_pattern(int label, int n_channels) {
  static const int groups[3][4] = {{3, 4, 5, 6}, {10, 11, 12, 13}, {17, 18, 19, 20}};
  std::vector<int> out;
  for (int c : groups[label % 3])
    if (c < n_channels) out.push_back(c);
  if (out.empty()) out.push_back(label % n_channels);
  return out;
}

bool noise_disabled(double snr_db) { return !std::isfinite(snr_db) || snr_db >= 1e6; }

double band_power(const std::vector<double>& x, double lo, double hi, double fs) {
  dsp::Spectrum s = dsp::rfft(x, fs);
  const int L = s.length;
  double acc = 0.0;
  for (std::size_t k = 1; k < s.bins.size(); ++k) {
    double f = static_cast<double>(k) * fs / L;
    if (f >= lo && f <= hi) acc += std::norm(s.bins[k]);
  }
  return acc / (static_cast<double>(L) * L);
}

}  // namespace

Dataset synth_generate(const SynthConfig& cfg) {
  if (cfg.trials_per_class < 1)
    fail("invalid-config", "synth: trials_per_class must be >= 1");
  if (cfg.erd_depth < 0.0 || cfg.erd_depth > 1.0)
    fail("invalid-config", "synth: erd_depth must lie in [0,1]");
  if (cfg.n_subjects < 1 || cfg.n_sessions < 1 || cfg.n_channels < 1 || cfg.n_classes < 1)
    fail("invalid-config", "synth: counts must be positive");
  if (cfg.n_samples < 8 || cfg.sample_rate_hz <= 0.0)
    fail("invalid-config", "synth: invalid trial geometry");

  const int C = cfg.n_channels, T = cfg.n_samples;
  const double fsr = cfg.sample_rate_hz;
  int img_b, img_e;
  imagery_interval(cfg, img_b, img_e);

  Dataset ds;
  ds.manifest.num_channels = C;
  ds.manifest.num_classes = cfg.n_classes;
  ds.manifest.num_samples = T;
  ds.manifest.sample_rate_hz = fsr;
  for (int c = 0; c < C; ++c) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "ch%02d", c + 1);
    ds.manifest.channel_names.emplace_back(buf);
  }

  for (int s = 0; s < cfg.n_subjects; ++s) {
    // Per-subject electrode gains, re-derived identically for every trial so
    // generation stays a pure function of the config.
    std::vector<double> subj_gain(static_cast<std::size_t>(C));
    {
      rng::Stream gs = rng::substream(cfg.seed, "subject-gain", static_cast<std::uint64_t>(s));
      for (int c = 0; c < C; ++c) subj_gain[static_cast<std::size_t>(c)] = gs.uniform(0.85, 1.15);
    }
    for (int e = 0; e < cfg.n_sessions; ++e) {
      double sess_gain;
      {
        rng::Stream es = rng::substream(cfg.seed, "session-gain", static_cast<std::uint64_t>(s),
                                        static_cast<std::uint64_t>(e));
        sess_gain = es.uniform(0.95, 1.05);
      }
      for (int y = 0; y < cfg.n_classes; ++y) {
        for (int i = 0; i < cfg.trials_per_class; ++i) {
          const std::uint64_t trial_idx =
              static_cast<std::uint64_t>(y) * static_cast<std::uint64_t>(cfg.trials_per_class) +
              static_cast<std::uint64_t>(i);
          rng::Stream st = rng::substream(cfg.seed, "trial", static_cast<std::uint64_t>(s),
                                          static_cast<std::uint64_t>(e), trial_idx);
          Trial trial;
          trial.label = y;
          trial.subject_id = s;
          trial.session_id = e;
          trial.sample_rate_hz = fsr;
          trial.data = ad::TensorD({C, T});

          std::vector<int> active = class_pattern(y, C);
          std::vector<char> is_active(static_cast<std::size_t>(C), 0);
          for (int c : active) is_active[static_cast<std::size_t>(c)] = 1;

          // Clean rhythm: per-channel mu and beta tones with random phases.
          std::vector<std::vector<double>> clean(static_cast<std::size_t>(C),
                                                 std::vector<double>(static_cast<std::size_t>(T)));
          for (int c = 0; c < C; ++c) {
            double f_mu = st.uniform(9.0, 13.0);
            double f_be = st.uniform(18.0, 26.0);
            double p_mu = st.uniform(0.0, 6.283185307179586);
            double p_be = st.uniform(0.0, 6.283185307179586);
            double base_amp = 10.0 * subj_gain[static_cast<std::size_t>(c)] * sess_gain;
            for (int t = 0; t < T; ++t) {
              double amp = base_amp;
              if (is_active[static_cast<std::size_t>(c)] && t >= img_b && t < img_e)
                amp *= (1.0 - cfg.erd_depth);
              double ph = 6.283185307179586 * t / fsr;
              clean[static_cast<std::size_t>(c)][static_cast<std::size_t>(t)] =
                  amp * (std::sin(f_mu * ph + p_mu) + 0.6 * std::sin(f_be * ph + p_be));
            }
          }

          // Evoked slow response: a cue-locked 1.5 Hz wave during imagery,
          // the phase-locked counterpart of the induced band-power drop.
          // Every channel carries the same magnitude; the class determines
          // only the polarity topography (which side of the dipole a channel
          // sees), so channel-wise amplitude statistics stay class-neutral.
          // Its phase is tied to the cue, not drawn per trial, so
          // raw-waveform decoders can transfer it across subjects; it lies
          // below the mu band and leaves band power and band-limited phases
          // untouched.
          if (cfg.erd_depth > 0.0 && img_e > img_b) {
            const double f_slow = 1.5;
            const double edge = 0.25 * fsr;
            const int shift = std::array<int, 3>{2, 0, 1}[y % 3];
            for (int c = 0; c < C; ++c) {
              double sign = ((c >> shift) & 1) ? -1.0 : 1.0;
              double amp = 20.0 * cfg.erd_depth * subj_gain[static_cast<std::size_t>(c)] *
                           sess_gain;
              for (int t = img_b; t < img_e; ++t) {
                double rise = std::min(1.0, static_cast<double>(t - img_b) / edge);
                double fall = std::min(1.0, static_cast<double>(img_e - 1 - t) / edge);
                double env = 0.25 * (1.0 - std::cos(3.141592653589793 * rise)) *
                             (1.0 - std::cos(3.141592653589793 * fall));
                clean[static_cast<std::size_t>(c)][static_cast<std::size_t>(t)] -=
                    sign * amp * env *
                    std::cos(6.283185307179586 * f_slow * (t - img_b) / fsr);
              }
            }
          }

          // Slow sinusoidal baseline drift per channel.
          std::vector<std::vector<double>> extra(static_cast<std::size_t>(C),
                                                 std::vector<double>(static_cast<std::size_t>(T), 0.0));
          for (int c = 0; c < C; ++c) {
            double f_d = st.uniform(0.1, 0.3);
            double p_d = st.uniform(0.0, 6.283185307179586);
            for (int t = 0; t < T; ++t)
              extra[static_cast<std::size_t>(c)][static_cast<std::size_t>(t)] +=
                  cfg.drift_amp * std::sin(6.283185307179586 * f_d * t / fsr + p_d);
          }

          // Poisson-timed step transients: each event offsets one electrode
          // from its onset to the end of the trial.
          if (cfg.transient_rate > 0.0) {
            double rate_per_sample = cfg.transient_rate / fsr;
            double pos = 0.0;
            while (true) {
              double u = st.uniform();
              if (u >= 1.0) u = 0.9999999999999999;
              pos += -std::log(1.0 - u) / rate_per_sample;
              if (pos >= static_cast<double>(T)) break;
              int t0 = static_cast<int>(pos);
              int c = static_cast<int>(st.below(static_cast<std::uint64_t>(C)));
              double amp = st.uniform(20.0, 60.0) * (st.uniform() < 0.5 ? -1.0 : 1.0);
              for (int t = t0; t < T; ++t)
                extra[static_cast<std::size_t>(c)][static_cast<std::size_t>(t)] += amp;
            }
          }

          // 1/f noise, scaled per channel to the requested band-power SNR.
          if (!noise_disabled(cfg.snr_db)) {
            double target_ratio = std::pow(10.0, cfg.snr_db / 10.0);
            for (int c = 0; c < C; ++c) {
              std::vector<double> white(static_cast<std::size_t>(T));
              for (int t = 0; t < T; ++t) white[static_cast<std::size_t>(t)] = st.normal();
              dsp::Spectrum sp = dsp::rfft(white, fsr);
              sp.bins[0] = {0.0, 0.0};
              for (std::size_t k = 1; k < sp.bins.size(); ++k) {
                double f = static_cast<double>(k) * fsr / T;
                sp.bins[k] *= 1.0 / std::sqrt(f);
              }
              std::vector<double> pink = dsp::irfft(sp);
              double p_sig = band_power(clean[static_cast<std::size_t>(c)], 8.0, 30.0, fsr);
              double p_noise = band_power(pink, 8.0, 30.0, fsr);
              double scale = (p_noise > 0.0 && p_sig > 0.0)
                                 ? std::sqrt(p_sig / (target_ratio * p_noise))
                                 : 0.0;
              for (int t = 0; t < T; ++t)
                extra[static_cast<std::size_t>(c)][static_cast<std::size_t>(t)] +=
                    scale * pink[static_cast<std::size_t>(t)];
            }
          }

          for (int c = 0; c < C; ++c)
            for (int t = 0; t < T; ++t) {
              double v = clean[static_cast<std::size_t>(c)][static_cast<std::size_t>(t)] +
                         extra[static_cast<std::size_t>(c)][static_cast<std::size_t>(t)];
              // Quantize to the storage type so save/load round trips exactly.
              trial.data.at2(c, t) = static_cast<double>(static_cast<float>(v));
            }
          ds.trials.push_back(std::move(trial));
        }
      }
    }
  }
  return ds;
}

namespace {

std::vector<int> sorted_subjects(const Dataset& ds) {
  std::set<int> s;
  for (const auto& t : ds.trials) s.insert(t.subject_id);
  return {s.begin(), s.end()};
}

std::vector<int> sorted_sessions(const Dataset& ds, int subject) {
  std::set<int> s;
  for (const auto& t : ds.trials)
    if (t.subject_id == subject) s.insert(t.session_id);
  return {s.begin(), s.end()};
}

Dataset select(const Dataset& ds, const std::function<bool(const Trial&)>& keep) {
  Dataset out;
  out.manifest = ds.manifest;
  for (const auto& t : ds.trials)
    if (keep(t)) out.trials.push_back(t);
  return out;
}

}  // namespace

int fold_count(const Dataset& dataset, Protocol protocol) {
  auto subjects = sorted_subjects(dataset);
  if (protocol == Protocol::CrossSession) {
    int folds = 0;
    for (int s : subjects) folds += static_cast<int>(sorted_sessions(dataset, s).size());
    return folds;
  }
  return static_cast<int>(subjects.size());
}

Split split_protocol(const Dataset& dataset, Protocol protocol, int fold) {
  auto subjects = sorted_subjects(dataset);
  if (subjects.empty()) fail("protocol-error", "split: dataset has no trials");
  Split out;

  if (protocol == Protocol::CrossSession) {
    // Folds enumerate (subject, train-session) pairs in sorted order; the
    // remaining session of the same subject is the test set.
    int idx = 0;
    for (int s : subjects) {
      auto sessions = sorted_sessions(dataset, s);
      if (sessions.size() != 2)
        fail("protocol-error", "cross-session requires exactly 2 sessions per subject; subject " +
                                   std::to_string(s) + " has " + std::to_string(sessions.size()));
      for (std::size_t which = 0; which < sessions.size(); ++which) {
        if (idx == fold) {
          int train_sess = sessions[which];
          int test_sess = sessions[1 - which];
          out.train = select(dataset, [&](const Trial& t) {
            return t.subject_id == s && t.session_id == train_sess;
          });
          out.test = select(dataset, [&](const Trial& t) {
            return t.subject_id == s && t.session_id == test_sess;
          });
          out.adapt.manifest = dataset.manifest;
          if (out.train.trials.empty() || out.test.trials.empty())
            fail("protocol-error", "cross-session fold " + std::to_string(fold) + " is empty");
          return out;
        }
        ++idx;
      }
    }
    fail("index-out-of-range", "cross-session fold " + std::to_string(fold) + " of " +
                                   std::to_string(idx));
  }

  if (fold < 0 || fold >= static_cast<int>(subjects.size()))
    fail("index-out-of-range", "fold " + std::to_string(fold) + " of " +
                                   std::to_string(subjects.size()) + " subjects");
  int held = subjects[static_cast<std::size_t>(fold)];
  out.train = select(dataset, [&](const Trial& t) { return t.subject_id != held; });
  out.adapt.manifest = dataset.manifest;

  if (protocol == Protocol::CrossSubject) {
    out.test = select(dataset, [&](const Trial& t) { return t.subject_id == held; });
  } else {
    auto sessions = sorted_sessions(dataset, held);
    if (sessions.size() < 2)
      fail("protocol-error", "cross-subject-ft requires >= 2 sessions for the held-out subject");
    int adapt_sess = sessions.front();
    out.adapt = select(dataset, [&](const Trial& t) {
      return t.subject_id == held && t.session_id == adapt_sess;
    });
    out.test = select(dataset, [&](const Trial& t) {
      return t.subject_id == held && t.session_id != adapt_sess;
    });
  }
  if (out.train.trials.empty() || out.test.trials.empty())
    fail("protocol-error", "fold " + std::to_string(fold) + " produces an empty partition");
  return out;
}

void save_dataset(const Dataset& dataset, const std::string& path) {
  fs::create_directories(path);
  const int C = dataset.manifest.num_channels;
  const int T = dataset.manifest.num_samples;
  json man;
  man["version"] = 1;
  man["num_channels"] = C;
  man["num_classes"] = dataset.manifest.num_classes;
  man["num_samples"] = T;
  man["sample_rate_hz"] = dataset.manifest.sample_rate_hz;
  man["channel_names"] = dataset.manifest.channel_names;
  man["trials"] = json::array();
  for (std::size_t i = 0; i < dataset.trials.size(); ++i) {
    const Trial& t = dataset.trials[i];
    if (t.data.rank() != 2 || t.data.dim(0) != C || t.data.dim(1) != T)
      fail("shape-mismatch", "save: trial " + std::to_string(i) + " has shape " +
                                 ad::shape_str(t.data.shape));
    char name[32];
    std::snprintf(name, sizeof(name), "trial_%05zu.f32", i);
    json rec;
    rec["file"] = name;
    rec["label"] = t.label;
    rec["subject_id"] = t.subject_id;
    rec["session_id"] = t.session_id;
    man["trials"].push_back(rec);

    std::vector<float> buf(t.data.numel());
    for (std::size_t j = 0; j < buf.size(); ++j) buf[j] = static_cast<float>(t.data[j]);
    std::ofstream f(fs::path(path) / name, std::ios::binary);
    if (!f) fail("io-error", "save: cannot open trial file for writing");
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f) fail("io-error", "save: short write on trial file");
  }
  std::ofstream mf(fs::path(path) / "manifest.json");
  if (!mf) fail("io-error", "save: cannot open manifest for writing");
  mf << man.dump(2) << "\n";
}

Dataset load_dataset(const std::string& path) {
  std::ifstream mf(fs::path(path) / "manifest.json");
  if (!mf) fail("corrupt-manifest", "load: missing manifest.json under " + path);
  json man;
  try {
    mf >> man;
  } catch (const json::exception& e) {
    fail("corrupt-manifest", std::string("load: manifest parse failure: ") + e.what());
  }
  try {
    if (man.at("version").get<int>() != 1)
      fail("unsupported-version", "load: dataset version " + man["version"].dump());
    Dataset ds;
    ds.manifest.num_channels = man.at("num_channels").get<int>();
    ds.manifest.num_classes = man.at("num_classes").get<int>();
    ds.manifest.num_samples = man.at("num_samples").get<int>();
    ds.manifest.sample_rate_hz = man.at("sample_rate_hz").get<double>();
    ds.manifest.channel_names = man.at("channel_names").get<std::vector<std::string>>();
    const int C = ds.manifest.num_channels;
    const int T = ds.manifest.num_samples;
    if (C < 1 || T < 1) fail("corrupt-manifest", "load: non-positive geometry in manifest");
    for (const auto& rec : man.at("trials")) {
      Trial t;
      t.label = rec.at("label").get<int>();
      t.subject_id = rec.at("subject_id").get<int>();
      t.session_id = rec.at("session_id").get<int>();
      t.sample_rate_hz = ds.manifest.sample_rate_hz;
      if (t.label < 0 || t.label >= ds.manifest.num_classes)
        fail("corrupt-manifest", "load: label " + std::to_string(t.label) +
                                     " outside declared class count");
      std::string file = rec.at("file").get<std::string>();
      std::ifstream f(fs::path(path) / file, std::ios::binary | std::ios::ate);
      if (!f) fail("io-error", "load: missing trial file " + file);
      std::streamsize bytes = f.tellg();
      std::streamsize expect =
          static_cast<std::streamsize>(sizeof(float)) * C * T;
      if (bytes != expect)
        fail("shape-mismatch", "load: trial file " + file + " holds " + std::to_string(bytes) +
                                   " bytes, manifest implies " + std::to_string(expect));
      f.seekg(0);
      std::vector<float> buf(static_cast<std::size_t>(C) * T);
      f.read(reinterpret_cast<char*>(buf.data()), expect);
      if (!f) fail("io-error", "load: short read on " + file);
      t.data = ad::TensorD({C, T});
      for (std::size_t j = 0; j < buf.size(); ++j) {
        double v = static_cast<double>(buf[j]);
        if (!std::isfinite(v))
          fail("invalid-data", "load: non-finite sample in " + file);
        t.data[j] = v;
      }
      ds.trials.push_back(std::move(t));
    }
    return ds;
  } catch (const json::exception& e) {
    fail("corrupt-manifest", std::string("load: manifest field error: ") + e.what());
  }
}

}  // namespace stgmfm::data
