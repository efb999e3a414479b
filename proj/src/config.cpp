// SPDX-License-Identifier: Apache-2.0
#include "stgmfm/config.hpp"

#include <cctype>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "json.hpp"
#include "stgmfm/error.hpp"

namespace stgmfm::config {

using nlohmann::json;

model::BranchSet branches_from_string(const std::string& s) {
  model::BranchSet b{false, false, false};
  std::stringstream ss(s);
  std::string tok;
  bool any = false;
  while (std::getline(ss, tok, ',')) {
    std::string t;
    for (char c : tok)
      if (!std::isspace(static_cast<unsigned char>(c))) t += static_cast<char>(std::toupper(c));
    if (t.empty()) continue;
    if (t == "A")
      b.a = true;
    else if (t == "B")
      b.b = true;
    else if (t == "C")
      b.c = true;
    else
      fail("invalid-config", "unknown branch '" + tok + "' (expected A, B, or C)");
    any = true;
  }
  if (!any) fail("invalid-config", "branch list '" + s + "' names no branch");
  return b;
}

std::string branches_to_string(const model::BranchSet& b) {
  std::string s;
  auto app = [&s](const char* t) {
    if (!s.empty()) s += ',';
    s += t;
  };
  if (b.a) app("A");
  if (b.b) app("B");
  if (b.c) app("C");
  return s;
}

namespace {

struct Field {
  const char* key;
  std::function<void(RunConfig&, const json&)> set;
  std::function<json(RunConfig&)> get;
};

[[noreturn]] void type_error(const std::string& key, const char* want, const json& v) {
  fail("invalid-config", "key '" + key + "' expects " + want + ", got " + v.dump());
}

int as_int(const std::string& key, const json& v) {
  if (!v.is_number_integer()) type_error(key, "an integer", v);
  return v.get<int>();
}

double as_double(const std::string& key, const json& v) {
  if (!v.is_number()) type_error(key, "a number", v);
  return v.get<double>();
}

bool as_bool(const std::string& key, const json& v) {
  if (!v.is_boolean()) type_error(key, "a boolean", v);
  return v.get<bool>();
}

std::uint64_t as_seed(const std::string& key, const json& v) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0) return v.get<std::uint64_t>();
  type_error(key, "a nonnegative integer", v);
}

std::string as_string(const std::string& key, const json& v) {
  if (!v.is_string()) type_error(key, "a string", v);
  return v.get<std::string>();
}

Field make_int(const char* key, std::function<int&(RunConfig&)> ref) {
  return Field{key, [ref, key](RunConfig& rc, const json& v) { ref(rc) = as_int(key, v); },
               [ref](RunConfig& rc) { return json(ref(rc)); }};
}

Field make_double(const char* key, std::function<double&(RunConfig&)> ref) {
  return Field{key, [ref, key](RunConfig& rc, const json& v) { ref(rc) = as_double(key, v); },
               [ref](RunConfig& rc) { return json(ref(rc)); }};
}

Field make_bool(const char* key, std::function<bool&(RunConfig&)> ref) {
  return Field{key, [ref, key](RunConfig& rc, const json& v) { ref(rc) = as_bool(key, v); },
               [ref](RunConfig& rc) { return json(ref(rc)); }};
}

Field make_string(const char* key, std::function<std::string&(RunConfig&)> ref) {
  return Field{key, [ref, key](RunConfig& rc, const json& v) { ref(rc) = as_string(key, v); },
               [ref](RunConfig& rc) { return json(ref(rc)); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    auto I = [&f](const char* k, std::function<int&(RunConfig&)> r) { f.push_back(make_int(k, std::move(r))); };
    auto D = [&f](const char* k, std::function<double&(RunConfig&)> r) { f.push_back(make_double(k, std::move(r))); };
    auto B = [&f](const char* k, std::function<bool&(RunConfig&)> r) { f.push_back(make_bool(k, std::move(r))); };
    auto S = [&f](const char* k, std::function<std::string&(RunConfig&)> r) { f.push_back(make_string(k, std::move(r))); };

    I("model.n_channels", [](RunConfig& rc) -> int& { return rc.model.n_channels; });
    I("model.n_classes", [](RunConfig& rc) -> int& { return rc.model.n_classes; });
    I("model.n_samples", [](RunConfig& rc) -> int& { return rc.model.n_samples; });
    D("model.sample_rate_hz", [](RunConfig& rc) -> double& { return rc.model.sample_rate_hz; });
    I("model.window_len", [](RunConfig& rc) -> int& { return rc.model.window_len; });
    I("model.stride", [](RunConfig& rc) -> int& { return rc.model.stride; });
    I("model.d", [](RunConfig& rc) -> int& { return rc.model.d; });
    I("model.k_s", [](RunConfig& rc) -> int& { return rc.model.k_s; });
    I("model.k_t", [](RunConfig& rc) -> int& { return rc.model.k_t; });
    I("model.kernel", [](RunConfig& rc) -> int& { return rc.model.kernel; });
    I("model.mfm_width", [](RunConfig& rc) -> int& { return rc.model.mfm.width; });
    I("model.mfm_n_blocks", [](RunConfig& rc) -> int& { return rc.model.mfm.n_blocks; });
    I("model.mfm_n_downsample", [](RunConfig& rc) -> int& { return rc.model.mfm.n_downsample; });
    I("model.mfm_top_periods", [](RunConfig& rc) -> int& { return rc.model.mfm.top_periods; });
    I("model.mfm_kernel", [](RunConfig& rc) -> int& { return rc.model.mfm.kernel; });
    D("model.dropout", [](RunConfig& rc) -> double& { return rc.model.dropout; });
    I("model.top_k", [](RunConfig& rc) -> int& { return rc.model.top_k; });
    D("model.band_lo", [](RunConfig& rc) -> double& { return rc.model.band_lo; });
    D("model.band_hi", [](RunConfig& rc) -> double& { return rc.model.band_hi; });
    I("model.rms_window", [](RunConfig& rc) -> int& { return rc.model.rms_window; });
    B("model.plv_broadband", [](RunConfig& rc) -> bool& { return rc.model.plv_broadband; });

    I("train.epochs", [](RunConfig& rc) -> int& { return rc.train.epochs; });
    I("train.batch_size", [](RunConfig& rc) -> int& { return rc.train.batch_size; });
    D("train.lr", [](RunConfig& rc) -> double& { return rc.train.lr; });
    D("train.lr_min", [](RunConfig& rc) -> double& { return rc.train.lr_min; });
    D("train.lambda_s", [](RunConfig& rc) -> double& { return rc.train.lambda_s; });
    D("train.lambda_t", [](RunConfig& rc) -> double& { return rc.train.lambda_t; });
    D("train.beta", [](RunConfig& rc) -> double& { return rc.train.beta; });
    D("train.weight_decay", [](RunConfig& rc) -> double& { return rc.train.weight_decay; });
    D("train.beta1", [](RunConfig& rc) -> double& { return rc.train.beta1; });
    D("train.beta2", [](RunConfig& rc) -> double& { return rc.train.beta2; });
    D("train.adam_eps", [](RunConfig& rc) -> double& { return rc.train.adam_eps; });
    D("train.val_fraction", [](RunConfig& rc) -> double& { return rc.train.val_fraction; });
    I("train.finetune_epochs", [](RunConfig& rc) -> int& { return rc.train.finetune_epochs; });
    D("train.finetune_lr", [](RunConfig& rc) -> double& { return rc.train.finetune_lr; });
    B("train.no_plv", [](RunConfig& rc) -> bool& { return rc.train.no_plv; });
    B("train.fixed_spatial_adjacency", [](RunConfig& rc) -> bool& { return rc.train.fixed_spatial_adjacency; });
    B("train.no_l1l2", [](RunConfig& rc) -> bool& { return rc.train.no_l1l2; });
    B("train.gated_fusion", [](RunConfig& rc) -> bool& { return rc.train.gated_fusion; });
    f.push_back(Field{"train.branches",
                      [](RunConfig& rc, const json& v) {
                        rc.train.branches = branches_from_string(as_string("train.branches", v));
                      },
                      [](RunConfig& rc) { return json(branches_to_string(rc.train.branches)); }});

    I("synth.n_subjects", [](RunConfig& rc) -> int& { return rc.synth.n_subjects; });
    I("synth.n_sessions", [](RunConfig& rc) -> int& { return rc.synth.n_sessions; });
    I("synth.trials_per_class", [](RunConfig& rc) -> int& { return rc.synth.trials_per_class; });
    D("synth.snr_db", [](RunConfig& rc) -> double& { return rc.synth.snr_db; });
    D("synth.drift_amp", [](RunConfig& rc) -> double& { return rc.synth.drift_amp; });
    D("synth.transient_rate", [](RunConfig& rc) -> double& { return rc.synth.transient_rate; });
    D("synth.erd_depth", [](RunConfig& rc) -> double& { return rc.synth.erd_depth; });
    I("synth.n_channels", [](RunConfig& rc) -> int& { return rc.synth.n_channels; });
    I("synth.n_samples", [](RunConfig& rc) -> int& { return rc.synth.n_samples; });
    I("synth.n_classes", [](RunConfig& rc) -> int& { return rc.synth.n_classes; });
    D("synth.sample_rate_hz", [](RunConfig& rc) -> double& { return rc.synth.sample_rate_hz; });

    f.push_back(Field{"seed",
                      [](RunConfig& rc, const json& v) { rc.seed = as_seed("seed", v); },
                      [](RunConfig& rc) { return json(rc.seed); }});
    S("data", [](RunConfig& rc) -> std::string& { return rc.data_path; });
    S("out", [](RunConfig& rc) -> std::string& { return rc.out_dir; });
    S("model_dir", [](RunConfig& rc) -> std::string& { return rc.model_dir; });
    S("protocol", [](RunConfig& rc) -> std::string& { return rc.protocol; });
    I("jobs", [](RunConfig& rc) -> int& { return rc.jobs; });
    B("majority_vote", [](RunConfig& rc) -> bool& { return rc.majority_vote; });
    B("decode_branch_a", [](RunConfig& rc) -> bool& { return rc.decode_branch_a; });
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const Field& f : fields())
    if (key == f.key) return &f;
  return nullptr;
}

}  // namespace

void RunConfig::resolve() {
  train.seed = seed;
  synth.seed = seed;
  model.validate();
  train.validate();
  if (jobs < 1) fail("invalid-config", "jobs must be at least 1");
  data::protocol_from_string(protocol);
}

std::string to_flat_json_text(const RunConfig& rc) {
  RunConfig copy = rc;
  json j = json::object();
  for (const Field& f : fields()) j[f.key] = f.get(copy);
  return j.dump(2) + "\n";
}

void apply_flat_json_text(RunConfig& rc, const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail("invalid-config", std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail("invalid-config", "config root must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const Field* f = find_field(key);
    if (f == nullptr) fail("invalid-config", "unknown config key '" + key + "'");
    if (value.is_object() || value.is_array())
      fail("invalid-config", "config keys are flat; '" + key + "' holds a container");
    f->set(rc, value);
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail("missing-file", "cannot open config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  RunConfig rc;
  apply_flat_json_text(rc, ss.str());
  return rc;
}

void save_run_config(const RunConfig& rc, const std::string& path) {
  std::ofstream f(path);
  if (!f) fail("io-error", "cannot write config '" + path + "'");
  f << to_flat_json_text(rc);
}

}  // namespace stgmfm::config
