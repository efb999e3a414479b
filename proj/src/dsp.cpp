// SPDX-License-Identifier: Apache-2.0
#include "stgmfm/dsp.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>

#include "stgmfm/error.hpp"

namespace stgmfm::dsp {

namespace {

// FFTW plan creation/destruction is not thread-safe; execution is. Planning
// with FFTW_ESTIMATE costs microseconds, so plans are made per call under a
// lock rather than cached.
std::mutex& plan_mutex() {
  static std::mutex m;
  return m;
}

struct FftwReal {
  double* p;
  explicit FftwReal(std::size_t n) : p(static_cast<double*>(fftw_malloc(sizeof(double) * n))) {}
  ~FftwReal() { fftw_free(p); }
  FftwReal(const FftwReal&) = delete;
  FftwReal& operator=(const FftwReal&) = delete;
};

struct FftwCplx {
  fftw_complex* p;
  explicit FftwCplx(std::size_t n)
      : p(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n))) {}
  ~FftwCplx() { fftw_free(p); }
  FftwCplx(const FftwCplx&) = delete;
  FftwCplx& operator=(const FftwCplx&) = delete;
};

struct PlanGuard {
  fftw_plan plan;
  ~PlanGuard() {
    std::lock_guard<std::mutex> lk(plan_mutex());
    fftw_destroy_plan(plan);
  }
};

}  // namespace

Spectrum rfft(const std::vector<double>& x, double sample_rate_hz) {
  const int L = static_cast<int>(x.size());
  if (L < 2) fail("invalid-length", "rfft: need at least 2 samples, got " + std::to_string(L));
  const int nb = L / 2 + 1;
  FftwReal in(static_cast<std::size_t>(L));
  FftwCplx out(static_cast<std::size_t>(nb));
  std::copy(x.begin(), x.end(), in.p);
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lk(plan_mutex());
    plan = fftw_plan_dft_r2c_1d(L, in.p, out.p, FFTW_ESTIMATE | FFTW_PRESERVE_INPUT);
  }
  PlanGuard guard{plan};
  fftw_execute(plan);
  Spectrum s;
  s.length = L;
  s.sample_rate_hz = sample_rate_hz;
  s.bins.resize(static_cast<std::size_t>(nb));
  for (int k = 0; k < nb; ++k)
    s.bins[static_cast<std::size_t>(k)] = {out.p[k][0], out.p[k][1]};
  return s;
}

std::vector<double> irfft(const Spectrum& s) {
  const int L = s.length;
  if (L < 2) fail("invalid-length", "irfft: spectrum length under 2");
  const int nb = L / 2 + 1;
  if (static_cast<int>(s.bins.size()) != nb)
    fail("invalid-length", "irfft: expected " + std::to_string(nb) + " bins, got " +
                               std::to_string(s.bins.size()));
  FftwCplx in(static_cast<std::size_t>(nb));
  FftwReal out(static_cast<std::size_t>(L));
  for (int k = 0; k < nb; ++k) {
    in.p[k][0] = s.bins[static_cast<std::size_t>(k)].real();
    in.p[k][1] = s.bins[static_cast<std::size_t>(k)].imag();
  }
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lk(plan_mutex());
    plan = fftw_plan_dft_c2r_1d(L, in.p, out.p, FFTW_ESTIMATE);
  }
  PlanGuard guard{plan};
  fftw_execute(plan);
  std::vector<double> y(static_cast<std::size_t>(L));
  const double inv = 1.0 / static_cast<double>(L);
  for (int t = 0; t < L; ++t) y[static_cast<std::size_t>(t)] = out.p[t] * inv;
  return y;
}

PhaseSeries analytic_phase(const std::vector<double>& x) {
  const int L = static_cast<int>(x.size());
  if (L < 4) fail("invalid-length", "analytic_phase: need at least 4 samples");
  bool constant = true;
  for (int t = 1; t < L && constant; ++t) constant = (x[static_cast<std::size_t>(t)] == x[0]);
  if (constant) fail("degenerate-signal", "analytic_phase: input is constant");

  // Full complex transform, then one-sided doubling and inverse.
  FftwCplx buf(static_cast<std::size_t>(L));
  FftwCplx out(static_cast<std::size_t>(L));
  for (int t = 0; t < L; ++t) {
    buf.p[t][0] = x[static_cast<std::size_t>(t)];
    buf.p[t][1] = 0.0;
  }
  fftw_plan fwd;
  {
    std::lock_guard<std::mutex> lk(plan_mutex());
    fwd = fftw_plan_dft_1d(L, buf.p, out.p, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  {
    PlanGuard guard{fwd};
    fftw_execute(fwd);
  }
  const int half = L / 2;
  for (int k = 1; k < (L + 1) / 2; ++k) {
    out.p[k][0] *= 2.0;
    out.p[k][1] *= 2.0;
  }
  // DC stays single; for even L so does the Nyquist bin (index L/2). All
  // negative-frequency bins (past the half point) are zeroed.
  for (int k = half + 1; k < L; ++k) {
    out.p[k][0] = 0.0;
    out.p[k][1] = 0.0;
  }
  fftw_plan bwd;
  {
    std::lock_guard<std::mutex> lk(plan_mutex());
    bwd = fftw_plan_dft_1d(L, out.p, buf.p, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  {
    PlanGuard guard{bwd};
    fftw_execute(bwd);
  }
  PhaseSeries ps;
  ps.phi.resize(static_cast<std::size_t>(L));
  const double inv = 1.0 / static_cast<double>(L);
  for (int t = 0; t < L; ++t)
    ps.phi[static_cast<std::size_t>(t)] = std::atan2(buf.p[t][1] * inv, buf.p[t][0] * inv);
  return ps;
}

std::vector<double> bandpass(const std::vector<double>& x, double lo_hz, double hi_hz,
                             double fs) {
  if (!(lo_hz > 0.0) || !(lo_hz < hi_hz) || !(hi_hz < fs / 2.0))
    fail("invalid-band", "bandpass: require 0 < lo < hi < fs/2, got [" + std::to_string(lo_hz) +
                             ", " + std::to_string(hi_hz) + ") at fs " + std::to_string(fs));
  Spectrum s = rfft(x, fs);
  const int L = s.length;
  for (std::size_t k = 0; k < s.bins.size(); ++k) {
    double f = static_cast<double>(k) * fs / static_cast<double>(L);
    if (f < lo_hz || f > hi_hz) s.bins[k] = {0.0, 0.0};
  }
  return irfft(s);
}

std::vector<double> rms_envelope(const std::vector<double>& x, int win) {
  const int T = static_cast<int>(x.size());
  if (win < 1 || win > T)
    fail("invalid-window", "rms_envelope: window " + std::to_string(win) +
                               " out of range for length " + std::to_string(T));
  // Reflectively pad win-1 samples on the left: pad[-1-i] = x[i].
  std::vector<double> sq(static_cast<std::size_t>(T + win - 1));
  for (int i = 0; i < win - 1; ++i) {
    double v = x[static_cast<std::size_t>(std::min(win - 2 - i, T - 1))];
    sq[static_cast<std::size_t>(i)] = v * v;
  }
  for (int t = 0; t < T; ++t) {
    double v = x[static_cast<std::size_t>(t)];
    sq[static_cast<std::size_t>(win - 1 + t)] = v * v;
  }
  std::vector<double> prefix(sq.size() + 1, 0.0);
  for (std::size_t i = 0; i < sq.size(); ++i) prefix[i + 1] = prefix[i] + sq[i];
  std::vector<double> y(static_cast<std::size_t>(T));
  const double inv = 1.0 / static_cast<double>(win);
  for (int t = 0; t < T; ++t) {
    double acc = prefix[static_cast<std::size_t>(t + win)] - prefix[static_cast<std::size_t>(t)];
    y[static_cast<std::size_t>(t)] = std::sqrt(std::max(0.0, acc * inv));
  }
  return y;
}

std::vector<PeriodPick> dominant_periods(const std::vector<double>& x, int k) {
  const int L = static_cast<int>(x.size());
  if (k < 1) fail("invalid-length", "dominant_periods: k must be >= 1");
  if (L < 4) fail("invalid-length", "dominant_periods: need at least 4 samples");
  Spectrum s = rfft(x);
  const int nb = static_cast<int>(s.bins.size());
  std::vector<double> mag(static_cast<std::size_t>(nb));
  for (int i = 0; i < nb; ++i) mag[static_cast<std::size_t>(i)] = std::abs(s.bins[static_cast<std::size_t>(i)]);
  double max_non_dc = 0.0;
  for (int i = 1; i < nb; ++i) max_non_dc = std::max(max_non_dc, mag[static_cast<std::size_t>(i)]);
  // Numerically-zero spectrum away from DC carries no period information.
  if (max_non_dc <= 1e-9 * std::max(1.0, mag[0]))
    fail("no-period", "dominant_periods: all non-DC bins are zero");
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(nb - 1));
  for (int i = 1; i < nb; ++i) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (mag[static_cast<std::size_t>(a)] != mag[static_cast<std::size_t>(b)])
      return mag[static_cast<std::size_t>(a)] > mag[static_cast<std::size_t>(b)];
    return a < b;
  });
  std::vector<PeriodPick> picks;
  int take = std::min<int>(k, static_cast<int>(order.size()));
  picks.reserve(static_cast<std::size_t>(take));
  for (int i = 0; i < take; ++i) {
    int bin = order[static_cast<std::size_t>(i)];
    PeriodPick p;
    p.period = static_cast<int>(std::lround(static_cast<double>(L) / static_cast<double>(bin)));
    p.amplitude = mag[static_cast<std::size_t>(bin)];
    picks.push_back(p);
  }
  return picks;
}

}  // namespace stgmfm::dsp
