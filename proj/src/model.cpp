// SPDX-License-Identifier: Apache-2.0
#include "stgmfm/model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "stgmfm/dsp.hpp"
#include "stgmfm/error.hpp"

namespace stgmfm::model {

namespace fs = std::filesystem;
using ad::Shape;
using ad::TapeD;
using ad::TensorD;
using Var = TapeD::Var;
using nlohmann::json;

int ModelConfig::n_windows() const { return data::window_count(n_samples, window_len, stride); }

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { fail("invalid-config", m); };
  if (n_channels < 2) bad("n_channels must be at least 2");
  if (n_classes < 2) bad("n_classes must be at least 2");
  if (n_samples < 2) bad("n_samples must be at least 2");
  if (sample_rate_hz <= 0.0) bad("sample_rate_hz must be positive");
  if (window_len < 1 || window_len > n_samples) bad("window_len out of range");
  if (stride < 1) bad("stride must be positive");
  if (n_windows() < 2) bad("config must yield at least 2 windows");
  if (d < 1) bad("d must be positive");
  if (k_s < 1 || k_t < 1) bad("graph depths must be at least 1");
  if (kernel < 1 || kernel % 2 == 0) bad("temporal kernel must be odd and positive");
  if (mfm.width < 1) bad("mfm width must be positive");
  if (mfm.n_blocks < 1) bad("mfm n_blocks must be at least 1");
  if (mfm.n_downsample < 0) bad("mfm n_downsample must be nonnegative");
  if (mfm.top_periods < 1) bad("mfm top_periods must be at least 1");
  if (mfm.kernel < 1 || mfm.kernel % 2 == 0) bad("mfm kernel must be odd and positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) bad("dropout must be in [0, 1)");
  if (top_k < 1 || top_k > n_channels - 1) bad("top_k must be in [1, n_channels - 1]");
  if (!(band_lo > 0.0 && band_lo < band_hi && band_hi < sample_rate_hz / 2.0))
    bad("band must satisfy 0 < lo < hi < fs/2");
  if (rms_window < 1 || rms_window > n_samples) bad("rms_window out of range");
}

void ModelParams::add(const std::string& name, TensorD t) {
  if (tensors.count(name)) fail("invalid-config", "duplicate parameter name: " + name);
  names.push_back(name);
  tensors.emplace(name, std::move(t));
}

TensorD& ModelParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail("invalid-config", "unknown parameter: " + name);
  return it->second;
}

const TensorD& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail("invalid-config", "unknown parameter: " + name);
  return it->second;
}

bool is_graph_delta(const std::string& name) {
  return name == "graph.delta_channel" || name == "graph.delta_slice";
}

bool l2_excluded(const std::string& name) {
  return is_graph_delta(name) || name == "tb.ln_b";
}

namespace {

TensorD uniform_init(rng::Stream& st, Shape shape, int fan_in) {
  double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  TensorD t(std::move(shape));
  for (auto& v : t.data) v = st.uniform(-s, s);
  return t;
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, const ModelOptions& opt, rng::Stream& st) {
  cfg.validate();
  const int C = cfg.n_channels, d = cfg.d, K = cfg.n_classes;
  const int Tw = cfg.window_len, W = cfg.n_windows(), m = cfg.mfm.width;
  ModelParams p;

  p.add("a.proj", uniform_init(st, {C, d, Tw}, Tw));
  for (int l = 0; l < cfg.k_s; ++l)
    p.add("a.ws." + std::to_string(l), uniform_init(st, {d, d}, d));
  p.add("a.slice_proj", uniform_init(st, {d, d}, d));
  for (int l = 0; l < cfg.k_t; ++l)
    p.add("a.wt." + std::to_string(l), uniform_init(st, {d, d}, d));
  p.add("a.head_w", uniform_init(st, {d, K}, d));
  p.add("a.head_b", TensorD::zeros({K}));

  p.add("b.proj", uniform_init(st, {C, d, Tw}, Tw));
  for (int l = 0; l < cfg.k_t; ++l)
    p.add("b.wt." + std::to_string(l), uniform_init(st, {d, d}, d));
  for (int l = 0; l < cfg.k_s; ++l)
    p.add("b.ws." + std::to_string(l), uniform_init(st, {d, d}, d));
  p.add("b.head_w", uniform_init(st, {d, K}, d));
  p.add("b.head_b", TensorD::zeros({K}));

  p.add("tb.dw", uniform_init(st, {C, cfg.kernel}, cfg.kernel));
  p.add("tb.pw", uniform_init(st, {C, C}, C));
  p.add("tb.pw_b", TensorD::zeros({C}));
  p.add("tb.ln_g", TensorD::full({d}, 1.0));
  p.add("tb.ln_b", TensorD::zeros({d}));

  p.add("graph.delta_channel", TensorD::zeros({C, C}));
  p.add("graph.delta_slice", TensorD::zeros({W, W}));

  p.add("c.lift", uniform_init(st, {m, C}, C));
  p.add("c.lift_b", TensorD::zeros({m}));
  for (int i = 0; i < cfg.mfm.n_blocks; ++i) {
    p.add("c.seas." + std::to_string(i), uniform_init(st, {m, cfg.mfm.kernel}, cfg.mfm.kernel));
    p.add("c.trend." + std::to_string(i), uniform_init(st, {m, cfg.mfm.kernel}, cfg.mfm.kernel));
    for (int j = 0; j < cfg.mfm.n_downsample; ++j)
      p.add("c.coarse." + std::to_string(i) + "." + std::to_string(j),
            uniform_init(st, {m, cfg.mfm.kernel}, cfg.mfm.kernel));
  }
  p.add("c.head_w", uniform_init(st, {m, K}, m));
  p.add("c.head_b", TensorD::zeros({K}));

  const int nb = opt.branches.count();
  if (nb < 1) fail("invalid-config", "at least one branch must be enabled");
  TensorD fw = TensorD::zeros({K, nb * K});
  for (int i = 0; i < nb; ++i)
    for (int k = 0; k < K; ++k) fw.at2(k, i * K + k) = 1.0 / nb;
  p.add("fuse.w", std::move(fw));
  p.add("fuse.b", TensorD::zeros({K}));
  if (opt.gated_fusion) p.add("fuse.gate", TensorD::zeros({nb}));
  return p;
}

namespace {

std::vector<double> channel_row(const TensorD& data, int c) {
  const int T = data.dim(1);
  std::vector<double> x(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) x[static_cast<std::size_t>(t)] = data.at2(c, t);
  return x;
}

/// Per-channel zero mean, unit variance over the trial.
TensorD standardize(const TensorD& data) {
  const int C = data.dim(0), T = data.dim(1);
  TensorD out({C, T});
  for (int c = 0; c < C; ++c) {
    double mu = 0.0;
    for (int t = 0; t < T; ++t) mu += data.at2(c, t);
    mu /= T;
    double var = 0.0;
    for (int t = 0; t < T; ++t) {
      double dv = data.at2(c, t) - mu;
      var += dv * dv;
    }
    double sd = std::sqrt(var / T);
    double inv = 1.0 / std::max(sd, 1e-8);
    for (int t = 0; t < T; ++t) out.at2(c, t) = (data.at2(c, t) - mu) * inv;
  }
  return out;
}

int fallback_period(const ModelConfig& cfg) {
  int p = static_cast<int>(std::lround(cfg.sample_rate_hz / 10.0));
  return std::clamp(p, 2, cfg.n_samples);
}

}  // namespace

TrialFeatures featurize_trial(const data::Trial& trial, const ModelConfig& cfg, bool no_plv) {
  if (trial.data.rank() != 2) fail("invalid-data", "trial tensor must be 2-D");
  if (trial.data.dim(0) != cfg.n_channels)
    fail("channel-mismatch", "trial has " + std::to_string(trial.data.dim(0)) +
                                 " channels, model expects " + std::to_string(cfg.n_channels));
  if (trial.data.dim(1) != cfg.n_samples)
    fail("invalid-data", "trial has " + std::to_string(trial.data.dim(1)) +
                             " samples, model expects " + std::to_string(cfg.n_samples));
  const int C = cfg.n_channels, T = cfg.n_samples;
  const int W = cfg.n_windows(), Tw = cfg.window_len;
  const double fs = cfg.sample_rate_hz;

  TrialFeatures f;
  f.label = trial.label;
  TensorD z = standardize(trial.data);

  f.windows = TensorD({W, C, Tw});
  for (int w = 0; w < W; ++w) {
    int off = w * cfg.stride;
    for (int c = 0; c < C; ++c)
      for (int t = 0; t < Tw; ++t) f.windows.at3(w, c, t) = z.at2(c, off + t);
  }

  // Band-limited amplitude envelopes feed both the frequency mixer and the
  // phase-locking prior.
  TensorD env({C, T});
  data::Trial band_trial;
  band_trial.sample_rate_hz = fs;
  band_trial.data = TensorD({C, T});
  for (int c = 0; c < C; ++c) {
    std::vector<double> row = channel_row(z, c);
    std::vector<double> banded = dsp::bandpass(row, cfg.band_lo, cfg.band_hi, fs);
    for (int t = 0; t < T; ++t) band_trial.data.at2(c, t) = banded[static_cast<std::size_t>(t)];
    std::vector<double> e = dsp::rms_envelope(banded, cfg.rms_window);
    for (int t = 0; t < T; ++t) env.at2(c, t) = e[static_cast<std::size_t>(t)];
  }

  std::vector<double> mean_env(static_cast<std::size_t>(T), 0.0);
  for (int t = 0; t < T; ++t) {
    double acc = 0.0;
    for (int c = 0; c < C; ++c) acc += env.at2(c, t);
    mean_env[static_cast<std::size_t>(t)] = acc / C;
  }
  std::vector<dsp::PeriodPick> picks;
  try {
    picks = dsp::dominant_periods(mean_env, cfg.mfm.top_periods);
  } catch (const Error& e) {
    // A flat envelope carries no period; the fallback fills in below.
    if (e.code() != "no-period") throw;
  }
  for (const auto& pk : picks) f.periods.push_back(std::clamp(pk.period, 2, T));
  while (static_cast<int>(f.periods.size()) < cfg.mfm.top_periods)
    f.periods.push_back(fallback_period(cfg));

  for (int p : f.periods) {
    int Q = (T + p - 1) / p;
    TensorD img({C, p, Q});
    for (int c = 0; c < C; ++c)
      for (int q = 0; q < Q; ++q)
        for (int i = 0; i < p; ++i) {
          int t = q * p + i;
          img.at3(c, i, q) = t < T ? env.at2(c, t) : 0.0;
        }
    f.images.push_back(std::move(img));
  }

  if (!no_plv) {
    const data::Trial& src = cfg.plv_broadband ? trial : band_trial;
    data::Trial plv_in = src;
    if (cfg.plv_broadband) plv_in.data = z;
    f.plv = graphs::plv_matrix({plv_in});
  }
  return f;
}

graphs::Adjacency channel_index_prior(int n_channels, int k) {
  if (k < 1 || k > n_channels - 1) fail("invalid-topk", "k must be in [1, n_channels - 1]");
  TensorD base = TensorD::zeros({n_channels, n_channels});
  for (int i = 0; i < n_channels; ++i) {
    // The k nearest indices, expanding outward, ties to the lower index.
    int added = 0;
    for (int off = 1; added < k; ++off) {
      if (i - off >= 0 && added < k) {
        base.at2(i, i - off) = 1.0;
        ++added;
      }
      if (i + off < n_channels && added < k) {
        base.at2(i, i + off) = 1.0;
        ++added;
      }
      if (off > n_channels) break;
    }
  }
  for (int i = 0; i < n_channels; ++i)
    for (int j = 0; j < i; ++j) {
      double v = std::max(base.at2(i, j), base.at2(j, i));
      base.at2(i, j) = base.at2(j, i) = v;
    }
  graphs::Adjacency adj;
  adj.kind = graphs::Adjacency::Kind::Channel;
  adj.prior = graphs::degree_normalize(base);
  adj.base = std::move(base);
  adj.delta = TensorD::zeros({n_channels, n_channels});
  return adj;
}

Priors build_priors(const std::vector<TrialFeatures>& train, const ModelConfig& cfg,
                    bool no_plv) {
  Priors pr;
  if (no_plv) {
    pr.channel = channel_index_prior(cfg.n_channels, cfg.top_k);
  } else {
    if (train.empty()) fail("invalid-data", "cannot build a connectivity prior from zero trials");
    const int C = cfg.n_channels;
    TensorD mean = TensorD::zeros({C, C});
    for (const auto& f : train)
      for (std::size_t i = 0; i < mean.data.size(); ++i) mean.data[i] += f.plv.data[i];
    for (auto& v : mean.data) v /= static_cast<double>(train.size());
    pr.channel = graphs::build_prior(mean, cfg.top_k);
  }
  pr.slice = graphs::slice_prior(cfg.n_windows());
  return pr;
}

Var TapeBinder::get(const std::string& name) {
  auto it = vars.find(name);
  if (it != vars.end()) return it->second;
  const TensorD& t = params->at(name);
  Var v = trainable ? tape->leaf(t) : tape->input(t);
  vars.emplace(name, v);
  used.push_back(name);
  return v;
}

namespace {

/// Bias sits on the channel axis, which is second-to-last for every caller.
Var temporal_block_on_tape(TapeD& t, TapeBinder& bind, Var h, bool norm_disabled) {
  const int axis = static_cast<int>(t.val(h).rank()) - 2;
  Var v = t.conv1d_dw(h, bind.get("tb.dw"));
  v = t.conv1d_pw(v, bind.get("tb.pw"));
  v = t.bias_add(v, bind.get("tb.pw_b"), axis);
  v = t.gelu(v);
  if (!norm_disabled) v = t.layernorm_last(v, bind.get("tb.ln_g"), bind.get("tb.ln_b"));
  return v;
}

struct BuildCtx {
  TapeD& t;
  TapeBinder& bind;
  const ModelConfig& cfg;
  const ModelOptions& opt;
  int N;

  Var act(Var v) { return opt.identity_activation ? v : t.gelu(v); }

  /// Graph propagation over the given node axis of a (N, W, C, d) tensor:
  /// move the axis first, left-multiply the effective adjacency, restore, and
  /// apply the feature weight.
  Var gcn(Var h, Var eff, Var weight, int node_axis) {
    const Shape& s = t.val(h).shape;
    const int n0 = s[0], n1 = s[1], n2 = s[2], d = s[3];
    if (node_axis == 2) {
      Var hp = t.reshape(t.permute(h, {2, 0, 1, 3}), {n2, n0 * n1 * d});
      Var hg = t.permute(t.reshape(t.matmul(eff, hp), {n2, n0, n1, d}), {1, 2, 0, 3});
      Var hf = t.matmul(t.reshape(hg, {n0 * n1 * n2, d}), weight);
      return act(t.reshape(hf, {n0, n1, n2, d}));
    }
    Var hp = t.reshape(t.permute(h, {1, 0, 2, 3}), {n1, n0 * n2 * d});
    Var hg = t.permute(t.reshape(t.matmul(eff, hp), {n1, n0, n2, d}), {1, 0, 2, 3});
    Var hf = t.matmul(t.reshape(hg, {n0 * n1 * n2, d}), weight);
    return act(t.reshape(hf, {n0, n1, n2, d}));
  }

  Var temporal_block(Var h) { return temporal_block_on_tape(t, bind, h, opt.norm_disabled); }

  Var maybe_dropout(Var f, rng::Stream* drop) {
    if (drop == nullptr || cfg.dropout <= 0.0) return f;
    const double p = cfg.dropout;
    TensorD mask(t.val(f).shape);
    for (auto& m : mask.data) m = drop->uniform() < p ? 0.0 : 1.0 / (1.0 - p);
    return t.dropout(f, std::move(mask));
  }

  Var head(Var f, const std::string& prefix) {
    return t.bias_add(t.matmul(f, bind.get(prefix + ".head_w")), bind.get(prefix + ".head_b"), 1);
  }

  Var branch_a(Var x, Var eff_c, Var eff_s, rng::Stream* drop) {
    const int W = cfg.n_windows(), d = cfg.d;
    Var h = t.channel_proj(x, bind.get("a.proj"));
    for (int l = 0; l < cfg.k_s; ++l)
      h = gcn(h, eff_c, bind.get("a.ws." + std::to_string(l)), 2);
    h = temporal_block(h);
    Var u = t.mean_axis(h, 2);
    u = t.reshape(t.matmul(t.reshape(u, {N * W, d}), bind.get("a.slice_proj")), {N, W, d});
    for (int l = 0; l < cfg.k_t; ++l) {
      Var up = t.reshape(t.permute(u, {1, 0, 2}), {W, N * d});
      Var ug = t.permute(t.reshape(t.matmul(eff_s, up), {W, N, d}), {1, 0, 2});
      u = act(t.reshape(t.matmul(t.reshape(ug, {N * W, d}), bind.get("a.wt." + std::to_string(l))),
                        {N, W, d}));
    }
    Var f = maybe_dropout(t.mean_axis(u, 1), drop);
    return head(f, "a");
  }

  Var branch_b(Var x, Var eff_c, Var eff_s, rng::Stream* drop) {
    Var h = t.channel_proj(x, bind.get("b.proj"));
    for (int l = 0; l < cfg.k_t; ++l)
      h = gcn(h, eff_s, bind.get("b.wt." + std::to_string(l)), 1);
    h = temporal_block(h);
    for (int l = 0; l < cfg.k_s; ++l)
      h = gcn(h, eff_c, bind.get("b.ws." + std::to_string(l)), 2);
    Var f = maybe_dropout(t.mean_axis(t.mean_axis(h, 2), 1), drop);
    return head(f, "b");
  }

  Var mfm_image(Var img, int p, int Q) {
    const int m = cfg.mfm.width;
    Var v = t.conv1d_pw(t.reshape(img, {cfg.n_channels, p * Q}), bind.get("c.lift"));
    v = t.bias_add(v, bind.get("c.lift_b"), 0);
    v = t.reshape(v, {m, p, Q});
    for (int i = 0; i < cfg.mfm.n_blocks; ++i) {
      std::string si = std::to_string(i);
      Var s = t.permute(v, {2, 0, 1});
      s = t.gelu(t.conv1d_dw(s, bind.get("c.seas." + si)));
      v = t.add(v, t.permute(s, {1, 2, 0}));
      Var tr = t.permute(v, {1, 0, 2});
      tr = t.gelu(t.conv1d_dw(tr, bind.get("c.trend." + si)));
      v = t.add(v, t.permute(tr, {1, 0, 2}));
      Var coarse = v;
      int q = Q;
      for (int j = 0; j < cfg.mfm.n_downsample && q >= 2; ++j) {
        coarse = t.avgpool2_last(coarse);
        q /= 2;
        Var cp = t.permute(coarse, {1, 0, 2});
        cp = t.gelu(t.conv1d_dw(cp, bind.get("c.coarse." + si + "." + std::to_string(j))));
        coarse = t.permute(cp, {1, 0, 2});
        Var up = coarse;
        int len = q;
        while (len < Q) {
          int next = std::min(2 * len, Q);
          up = t.upsample2_last(up, next);
          len = next;
        }
        v = t.add(v, up);
      }
    }
    return t.mean_axis(t.reshape(v, {m, p * Q}), 1);
  }

  Var branch_c(const std::vector<const TrialFeatures*>& batch, rng::Stream* drop) {
    const int m = cfg.mfm.width;
    std::vector<Var> rows;
    rows.reserve(batch.size());
    for (const TrialFeatures* tf : batch) {
      Var acc{-1};
      for (std::size_t pi = 0; pi < tf->images.size(); ++pi) {
        const TensorD& img = tf->images[pi];
        Var g = mfm_image(t.input(img), img.dim(1), img.dim(2));
        acc = pi == 0 ? g : t.add(acc, g);
      }
      Var row = t.reshape(t.scale(acc, 1.0 / static_cast<double>(tf->images.size())), {1, m});
      rows.push_back(row);
    }
    Var f = maybe_dropout(t.concat(rows, 0), drop);
    return head(f, "c");
  }
};

}  // namespace

ForwardVars build_forward(TapeD& t, TapeBinder& bind, const ModelConfig& cfg,
                          const ModelOptions& opt, const Priors& priors,
                          const std::vector<const TrialFeatures*>& batch,
                          rng::Stream* drop_stream) {
  if (batch.empty()) fail("invalid-data", "forward pass needs a non-empty batch");
  if (opt.branches.count() < 1) fail("invalid-config", "at least one branch must be enabled");
  const int N = static_cast<int>(batch.size());
  const int W = cfg.n_windows(), C = cfg.n_channels, Tw = cfg.window_len, K = cfg.n_classes;

  BuildCtx ctx{t, bind, cfg, opt, N};
  ForwardVars out;

  Var x{-1};
  if (opt.branches.a || opt.branches.b) {
    TensorD xb({N, W, C, Tw});
    for (int n = 0; n < N; ++n) {
      const TensorD& w = batch[static_cast<std::size_t>(n)]->windows;
      if (w.shape != Shape{W, C, Tw})
        fail("shape-mismatch", "trial windows " + ad::shape_str(w.shape) +
                                   " do not match the model geometry");
      std::copy(w.data.begin(), w.data.end(), xb.data.begin() + static_cast<std::ptrdiff_t>(n) * w.numel());
    }
    x = t.input(std::move(xb));
    out.eff_channel = graphs::effective_adjacency_on_tape(
        t, t.input(priors.channel.base), bind.get("graph.delta_channel"));
    out.eff_slice = graphs::effective_adjacency_on_tape(t, t.input(priors.slice.base),
                                                        bind.get("graph.delta_slice"));
  }

  std::vector<Var> parts;
  if (opt.branches.a) {
    out.z_a = ctx.branch_a(x, out.eff_channel, out.eff_slice, drop_stream);
    parts.push_back(out.z_a);
  }
  if (opt.branches.b) {
    out.z_b = ctx.branch_b(x, out.eff_channel, out.eff_slice, drop_stream);
    parts.push_back(out.z_b);
  }
  if (opt.branches.c) {
    out.z_c = ctx.branch_c(batch, drop_stream);
    parts.push_back(out.z_c);
  }

  if (opt.gated_fusion) {
    Var gates = t.sigmoid(bind.get("fuse.gate"));
    for (std::size_t i = 0; i < parts.size(); ++i)
      parts[i] = t.mul_scalar_var(parts[i], t.slice(gates, 0, static_cast<int>(i),
                                                    static_cast<int>(i) + 1));
  }
  Var cat = parts.size() == 1 ? parts[0] : t.concat(parts, 1);
  out.fused = t.bias_add(t.matmul(cat, t.transpose2(bind.get("fuse.w"))), bind.get("fuse.b"), 1);
  if (t.val(out.fused).shape != Shape{N, K})
    fail("shape-mismatch", "fused logits have shape " + ad::shape_str(t.val(out.fused).shape));
  return out;
}

ad::TensorD gcn_layer(const TensorD& eff, const TensorD& h, const TensorD& w,
                      bool identity_activation) {
  TapeD t;
  t.set_grad_enabled(false);
  Var v = t.matmul(t.matmul(t.input(eff), t.input(h)), t.input(w));
  if (!identity_activation) v = t.gelu(v);
  return t.val(v);
}

ad::TensorD apply_temporal_block(const TensorD& x, const ModelParams& params,
                                 bool norm_disabled) {
  TapeD t;
  t.set_grad_enabled(false);
  TapeBinder bind{&t, &params, false, {}, {}};
  return t.val(temporal_block_on_tape(t, bind, t.input(x), norm_disabled));
}

ad::TensorD forward_logits(const ModelConfig& cfg, const ModelOptions& opt,
                           const ModelParams& params, const Priors& priors,
                           const std::vector<const TrialFeatures*>& batch) {
  TapeD t;
  t.set_grad_enabled(false);
  TapeBinder bind{&t, &params, false, {}, {}};
  ForwardVars fv = build_forward(t, bind, cfg, opt, priors, batch, nullptr);
  return t.val(opt.decode_branch_a && opt.branches.a ? fv.z_a : fv.fused);
}

std::vector<int> predict(const ModelConfig& cfg, const ModelOptions& opt,
                         const ModelParams& params, const Priors& priors,
                         const std::vector<const TrialFeatures*>& batch) {
  TensorD z = forward_logits(cfg, opt, params, priors, batch);
  const int N = z.dim(0), K = z.dim(1);
  std::vector<int> out(static_cast<std::size_t>(N), 0);
  for (int n = 0; n < N; ++n) {
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (z.at2(n, k) > z.at2(n, best)) best = k;
    out[static_cast<std::size_t>(n)] = best;
  }
  return out;
}

namespace {

json config_to_json(const ModelConfig& c) {
  return json{{"n_channels", c.n_channels},
              {"n_classes", c.n_classes},
              {"n_samples", c.n_samples},
              {"sample_rate_hz", c.sample_rate_hz},
              {"window_len", c.window_len},
              {"stride", c.stride},
              {"d", c.d},
              {"k_s", c.k_s},
              {"k_t", c.k_t},
              {"kernel", c.kernel},
              {"mfm_width", c.mfm.width},
              {"mfm_n_blocks", c.mfm.n_blocks},
              {"mfm_n_downsample", c.mfm.n_downsample},
              {"mfm_top_periods", c.mfm.top_periods},
              {"mfm_kernel", c.mfm.kernel},
              {"dropout", c.dropout},
              {"top_k", c.top_k},
              {"band_lo", c.band_lo},
              {"band_hi", c.band_hi},
              {"rms_window", c.rms_window},
              {"plv_broadband", c.plv_broadband}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_channels = j.at("n_channels").get<int>();
  c.n_classes = j.at("n_classes").get<int>();
  c.n_samples = j.at("n_samples").get<int>();
  c.sample_rate_hz = j.at("sample_rate_hz").get<double>();
  c.window_len = j.at("window_len").get<int>();
  c.stride = j.at("stride").get<int>();
  c.d = j.at("d").get<int>();
  c.k_s = j.at("k_s").get<int>();
  c.k_t = j.at("k_t").get<int>();
  c.kernel = j.at("kernel").get<int>();
  c.mfm.width = j.at("mfm_width").get<int>();
  c.mfm.n_blocks = j.at("mfm_n_blocks").get<int>();
  c.mfm.n_downsample = j.at("mfm_n_downsample").get<int>();
  c.mfm.top_periods = j.at("mfm_top_periods").get<int>();
  c.mfm.kernel = j.at("mfm_kernel").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.top_k = j.at("top_k").get<int>();
  c.band_lo = j.at("band_lo").get<double>();
  c.band_hi = j.at("band_hi").get<double>();
  c.rms_window = j.at("rms_window").get<int>();
  c.plv_broadband = j.at("plv_broadband").get<bool>();
  return c;
}

json options_to_json(const ModelOptions& o) {
  return json{{"branch_a", o.branches.a},
              {"branch_b", o.branches.b},
              {"branch_c", o.branches.c},
              {"gated_fusion", o.gated_fusion},
              {"decode_branch_a", o.decode_branch_a},
              {"identity_activation", o.identity_activation},
              {"norm_disabled", o.norm_disabled}};
}

ModelOptions options_from_json(const json& j) {
  ModelOptions o;
  o.branches.a = j.at("branch_a").get<bool>();
  o.branches.b = j.at("branch_b").get<bool>();
  o.branches.c = j.at("branch_c").get<bool>();
  o.gated_fusion = j.at("gated_fusion").get<bool>();
  o.decode_branch_a = j.at("decode_branch_a").get<bool>();
  o.identity_activation = j.at("identity_activation").get<bool>();
  o.norm_disabled = j.at("norm_disabled").get<bool>();
  return o;
}

void write_blob(const fs::path& path, const TensorD& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("io-error", "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!f) fail("io-error", "short write to " + path.string());
}

TensorD read_blob(const fs::path& path, Shape shape) {
  TensorD t(std::move(shape));
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("io-error", "cannot read " + path.string());
  f.read(reinterpret_cast<char*>(t.data.data()),
         static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (f.gcount() != static_cast<std::streamsize>(t.data.size() * sizeof(double)))
    fail("shape-mismatch", "parameter blob " + path.string() + " is truncated");
  char extra;
  if (f.read(&extra, 1); f.gcount() != 0)
    fail("shape-mismatch", "parameter blob " + path.string() + " has trailing bytes");
  return t;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& dir) {
  fs::create_directories(dir);
  json meta;
  meta["version"] = 1;
  meta["seed"] = ck.seed;
  meta["config"] = config_to_json(ck.config);
  meta["options"] = options_to_json(ck.options);
  json plist = json::array();
  for (const std::string& name : ck.params.names) {
    const TensorD& t = ck.params.at(name);
    plist.push_back(json{{"name", name}, {"shape", t.shape}});
    write_blob(fs::path(dir) / (name + ".f64"), t);
  }
  meta["params"] = plist;
  meta["prior_channel_shape"] = ck.priors.channel.base.shape;
  meta["prior_slice_shape"] = ck.priors.slice.base.shape;
  write_blob(fs::path(dir) / "prior_channel.f64", ck.priors.channel.base);
  write_blob(fs::path(dir) / "prior_slice.f64", ck.priors.slice.base);
  std::ofstream f(fs::path(dir) / "params.json");
  if (!f) fail("io-error", "cannot write checkpoint metadata in " + dir);
  f << meta.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "params.json");
  if (!f) fail("io-error", "cannot read checkpoint metadata in " + dir);
  json meta;
  try {
    meta = json::parse(f);
  } catch (const json::exception& e) {
    fail("corrupt-manifest", std::string("checkpoint metadata: ") + e.what());
  }
  if (meta.at("version").get<int>() != 1)
    fail("unsupported-version", "checkpoint version " + meta.at("version").dump());
  Checkpoint ck;
  ck.seed = meta.at("seed").get<std::uint64_t>();
  ck.config = config_from_json(meta.at("config"));
  ck.options = options_from_json(meta.at("options"));
  for (const auto& p : meta.at("params")) {
    std::string name = p.at("name").get<std::string>();
    Shape shape = p.at("shape").get<Shape>();
    ck.params.add(name, read_blob(fs::path(dir) / (name + ".f64"), std::move(shape)));
  }
  Shape cs = meta.at("prior_channel_shape").get<Shape>();
  Shape ss = meta.at("prior_slice_shape").get<Shape>();
  ck.priors.channel.kind = graphs::Adjacency::Kind::Channel;
  ck.priors.channel.base = read_blob(fs::path(dir) / "prior_channel.f64", std::move(cs));
  ck.priors.channel.prior = graphs::degree_normalize(ck.priors.channel.base);
  ck.priors.channel.delta = TensorD::zeros(ck.priors.channel.base.shape);
  ck.priors.slice.kind = graphs::Adjacency::Kind::Slice;
  ck.priors.slice.base = read_blob(fs::path(dir) / "prior_slice.f64", std::move(ss));
  ck.priors.slice.prior = graphs::degree_normalize(ck.priors.slice.base);
  ck.priors.slice.delta = TensorD::zeros(ck.priors.slice.base.shape);
  return ck;
}

}  // namespace stgmfm::model
