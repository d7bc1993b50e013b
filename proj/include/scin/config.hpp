#pragma once

// Structured config file: a preset profile plus per-section overrides.
//
//   {
//     "profile": "fast",
//     "model": { "base_channels": 8, ... },
//     "data": { "samples_per_cohort": 100, "fractions": [0.6,0.2,0.2],
//               "split_seed": 7, "msl_k": 10,
//               "cohorts": { "a": {...}, "b": {...}, "c": {...}, "msl_base": {...} } },
//     "eval": { "min_size": 3, "min_overlap_fraction": 0.0, "small_max": 10,
//               "checkpoint": "...", "cohort": "trial-A", "conditioned_on": "trial-A" },
//     "gen-data": { "out": "data" },
//     "train": { "epochs": 15, "lr": 0.003, "mode": "scin-pool", "cohorts": [...], "data": "dir" },
//     "finetune": { "epochs": 40, "samples": 10, "init": "mean", "checkpoint": "...", "cohort": "trial-C" },
//     "experiment": { "seeds": [1,2,3], "jobs": 1, "data": "dir", "auto_generate": false },
//     "gradcheck": { "seed": 1234, "double_precision": true }
//   }

#include <nlohmann/json.hpp>

#include <set>
#include <string>

#include "scin/checkpoint.hpp"
#include "scin/dataset_io.hpp"
#include "scin/experiments.hpp"

namespace scin {

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where, const std::set<std::string>& known) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError(where + "." + it.key() + ": unknown field");
}

template <typename V>
void read_field(const nlohmann::json& j, const std::string& where, const char* key, V& dst) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(dst);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

}  // namespace detail

inline InitPolicy parse_init_policy(const std::string& s, const std::string& where) {
  if (s == "mean") return InitPolicy::mean_of_existing();
  if (s == "ones-zeros") return InitPolicy::ones_zeros();
  if (s.rfind("copy:", 0) == 0 && s.size() > 5) return InitPolicy::copy(s.substr(5));
  throw ConfigError(where + ": expected mean | ones-zeros | copy:<source>, got '" + s + "'");
}

/// Reads training hyperparameters on top of `t`. Keys outside `extra` and the
/// known hyperparameters are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& where, TrainConfig t,
                                          const std::set<std::string>& extra = {}) {
  std::set<std::string> known{"epochs", "batch_size", "lr", "seed", "eval_every", "patience", "init"};
  known.insert(extra.begin(), extra.end());
  detail::reject_unknown(j, where, known);
  detail::read_field(j, where, "epochs", t.epochs);
  detail::read_field(j, where, "batch_size", t.batch_size);
  detail::read_field(j, where, "lr", t.lr);
  detail::read_field(j, where, "seed", t.seed);
  detail::read_field(j, where, "eval_every", t.eval_every);
  detail::read_field(j, where, "patience", t.patience);
  if (j.contains("init")) {
    std::string s;
    detail::read_field(j, where, "init", s);
    t.init = parse_init_policy(s, where + ".init");
  }
  try {
    t.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return t;
}

inline SourcesMode parse_sources_mode(const std::string& s, const std::string& where) {
  if (s == "naive-pool") return SourcesMode::naive_pool();
  if (s == "scin-pool") return SourcesMode::scin_pool();
  if (s.rfind("single:", 0) == 0 && s.size() > 7) return SourcesMode::single_source(s.substr(7));
  throw ConfigError(where + ": expected single:<cohort> | naive-pool | scin-pool, got '" + s + "'");
}

/// Builds the experiment configuration: preset named by "profile", then the
/// model, data, eval, train, finetune and experiment sections.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& root) {
  detail::reject_unknown(root, "config",
                         {"profile", "model", "data", "eval", "gen-data", "train", "finetune", "experiment",
                          "gradcheck"});
  std::string profile = "fast";
  detail::read_field(root, "config", "profile", profile);
  ExperimentConfig c = ExperimentConfig::preset(profile);
  if (root.contains("model")) {
    detail::reject_unknown(root["model"], "model",
                           {"in_channels", "base_channels", "depth", "dropout_p", "leaky_slope", "norm_eps"});
    c.model = model_config_from_json(root["model"], "model", c.model);
  }
  if (root.contains("data")) {
    const auto& d = root["data"];
    detail::reject_unknown(d, "data", {"samples_per_cohort", "fractions", "split_seed", "msl_k", "cohorts"});
    detail::read_field(d, "data", "samples_per_cohort", c.samples_per_cohort);
    detail::read_field(d, "data", "fractions", c.fractions);
    detail::read_field(d, "data", "split_seed", c.split_seed);
    detail::read_field(d, "data", "msl_k", c.msl_k);
    if (c.samples_per_cohort < 3) throw ConfigError("data.samples_per_cohort: must be >= 3");
    if (c.msl_k < 1) throw ConfigError("data.msl_k: must be >= 1");
    if (d.contains("cohorts")) {
      const auto& cj = d["cohorts"];
      detail::reject_unknown(cj, "data.cohorts", {"a", "b", "c", "msl_base"});
      if (cj.contains("a")) c.cohort_a = cohort_spec_from_json(cj["a"], "data.cohorts.a", c.cohort_a);
      if (cj.contains("b")) c.cohort_b = cohort_spec_from_json(cj["b"], "data.cohorts.b", c.cohort_b);
      if (cj.contains("c")) c.cohort_c = cohort_spec_from_json(cj["c"], "data.cohorts.c", c.cohort_c);
      if (cj.contains("msl_base")) c.msl_base = cohort_spec_from_json(cj["msl_base"], "data.cohorts.msl_base", c.msl_base);
    }
  }
  if (root.contains("eval")) {
    const auto& e = root["eval"];
    detail::reject_unknown(e, "eval",
                           {"min_size", "min_overlap_fraction", "small_max", "checkpoint", "cohort", "conditioned_on",
                            "data"});
    detail::read_field(e, "eval", "min_size", c.eval.detection.min_size);
    detail::read_field(e, "eval", "min_overlap_fraction", c.eval.detection.min_overlap_fraction);
    detail::read_field(e, "eval", "small_max", c.eval.small_max);
    if (c.eval.detection.min_overlap_fraction < 0 || c.eval.detection.min_overlap_fraction > 1) {
      throw ConfigError("eval.min_overlap_fraction: must lie in [0,1]");
    }
  }
  if (root.contains("train")) {
    c.train = train_config_from_json(root["train"], "train", c.train, {"mode", "cohorts", "data"});
  }
  if (root.contains("finetune")) {
    c.finetune =
        train_config_from_json(root["finetune"], "finetune", c.finetune, {"samples", "checkpoint", "cohort", "source", "data"});
    detail::read_field(root["finetune"], "finetune", "samples", c.finetune_samples);
    if (c.finetune_samples < 1) throw ConfigError("finetune.samples: must be >= 1");
  }
  if (root.contains("gen-data")) detail::reject_unknown(root["gen-data"], "gen-data", {"out"});
  if (root.contains("gradcheck")) detail::reject_unknown(root["gradcheck"], "gradcheck", {"seed", "double_precision"});
  if (root.contains("experiment")) {
    const auto& e = root["experiment"];
    detail::reject_unknown(e, "experiment", {"seeds", "jobs", "data", "auto_generate", "compare"});
    detail::read_field(e, "experiment", "seeds", c.seeds);
    detail::read_field(e, "experiment", "jobs", c.jobs);
    if (c.seeds.empty()) throw ConfigError("experiment.seeds: must list at least one seed");
    if (c.jobs < 1) throw ConfigError("experiment.jobs: must be >= 1");
  }
  return c;
}

}  // namespace scin
