// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stgmfm/tensor.hpp"

namespace stgmfm::data {

/// One recorded trial: channels x samples, in microvolts.
struct Trial {
  ad::TensorD data;  // (C, T)
  int label = 0;
  int subject_id = 0;
  int session_id = 0;
  double sample_rate_hz = 0.0;
};

struct Manifest {
  int num_channels = 0;
  int num_classes = 0;
  int num_samples = 0;
  double sample_rate_hz = 0.0;
  std::vector<std::string> channel_names;
};

struct Dataset {
  Manifest manifest;
  std::vector<Trial> trials;
};

/// Sliding-window view over all trials: (N, W, C, T_w) with T_w = window_len.
struct WindowedBatch {
  ad::TensorD tensor;
  int window_len = 0;
  int stride = 0;
};

struct SynthConfig {
  int n_subjects = 2;
  int n_sessions = 2;
  int trials_per_class = 4;
  double snr_db = 5.0;          // band-power SNR in 8-30 Hz; +inf or >=1e6 disables noise
  double drift_amp = 20.0;      // microvolts
  double transient_rate = 0.2;  // events per second
  double erd_depth = 0.5;       // fractional amplitude drop on active channels
  std::uint64_t seed = 42;
  // Recording geometry; defaults give nine 125-sample slices per trial.
  int n_channels = 23;
  int n_samples = 1125;
  int n_classes = 3;
  double sample_rate_hz = 250.0;
};

struct Split {
  Dataset train;
  Dataset adapt;  // empty except for CrossSubjectFinetune
  Dataset test;
};

enum class Protocol { CrossSession, CrossSubject, CrossSubjectFinetune };

Protocol protocol_from_string(const std::string& s);
std::string protocol_to_string(Protocol p);

/// Number of windows: floor((T - W_n)/Str) + 1.
int window_count(int T, int W_n, int Str);

WindowedBatch window_trials(const Dataset& dataset, int W_n, int Str);

Dataset synth_generate(const SynthConfig& config);

/// Sample indices [begin, end) of the simulated imagery interval used by the
/// generator's amplitude modulation.
void imagery_interval(const SynthConfig& config, int& begin, int& end);

/// Fold counts per protocol for a dataset.
int fold_count(const Dataset& dataset, Protocol protocol);

Split split_protocol(const Dataset& dataset, Protocol protocol, int fold);

void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace stgmfm::data
