// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "stgmfm/dataio.hpp"
#include "stgmfm/model.hpp"
#include "stgmfm/train.hpp"

namespace stgmfm::config {

/// Everything a run needs, serialized as flat JSON with dotted keys
/// ("model.d", "train.lr", "synth.n_subjects") plus top-level operational
/// values. One `seed` drives every subsystem stream.
struct RunConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  data::SynthConfig synth;
  std::uint64_t seed = 42;
  std::string data_path;
  std::string out_dir;
  std::string model_dir;
  std::string protocol = "cross-session";
  int jobs = 1;
  bool majority_vote = false;
  bool decode_branch_a = false;

  /// Pushes `seed` into the subsystem configs and validates the whole bundle.
  void resolve();
};

model::BranchSet branches_from_string(const std::string& s);
std::string branches_to_string(const model::BranchSet& b);

/// Serialized form: every key present, keys sorted, two-space indent.
std::string to_flat_json_text(const RunConfig& rc);

/// Applies keys from a flat JSON object over `rc`. Unknown keys, nested
/// objects, and type mismatches are configuration errors.
void apply_flat_json_text(RunConfig& rc, const std::string& text);

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& rc, const std::string& path);

}  // namespace stgmfm::config
