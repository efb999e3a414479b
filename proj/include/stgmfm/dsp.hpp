// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <complex>
#include <vector>

namespace stgmfm::dsp {

/// Half-spectrum of a real signal. Unnormalized forward convention: bin k
/// holds sum_t x[t] exp(-2*pi*i*k*t/L); frequencies are k*fs/L.
struct Spectrum {
  std::vector<std::complex<double>> bins;  // floor(L/2)+1 entries, bin 0 = DC
  int length = 0;                          // L, original sample count
  double sample_rate_hz = 0.0;
};

/// Instantaneous phase of the analytic signal, radians, one value per sample.
struct PhaseSeries {
  std::vector<double> phi;
  int channel = -1;
};

struct PeriodPick {
  int period = 0;  // samples, round(L / bin_index)
  double amplitude = 0.0;
};

Spectrum rfft(const std::vector<double>& x, double sample_rate_hz = 0.0);
std::vector<double> irfft(const Spectrum& s);

/// Phase of x + i*H[x] built in the frequency domain (negative bins zeroed,
/// positive doubled, DC and Nyquist kept singly).
PhaseSeries analytic_phase(const std::vector<double>& x);

/// Brick-wall frequency-domain bandpass: bins outside [lo_hz, hi_hz] zeroed.
std::vector<double> bandpass(const std::vector<double>& x, double lo_hz, double hi_hz,
                             double fs);

/// Sliding RMS with reflective padding at the left edge; same output length.
std::vector<double> rms_envelope(const std::vector<double>& x, int win);

/// The k non-DC bins with largest magnitude, as (round(L/bin), magnitude),
/// sorted by descending magnitude, ties to the lower bin index.
std::vector<PeriodPick> dominant_periods(const std::vector<double>& x, int k);

}  // namespace stgmfm::dsp
