#pragma once

// JSON run configuration.
//
//   {
//     "schema_version": 1,
//     "paradigm": "dumo", "beta": 0.7, ..., "seed": 0,
//     "model":   { "hidden_dim": 256, ... },
//     "eval":    { "samples": 2000, "repetitions": 3, "estimator": "unbiased", "bandwidth": null, ... },
//     "dataset": { "name": "moons", "n": 10000, ... }
//   }
//
// Every key is optional except schema_version; missing keys take the defaults
// below. Unknown keys are errors. resolved_json() writes every field
// explicitly so a run can be reproduced from that file alone.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dumo/data.hpp"
#include "dumo/errors.hpp"
#include "dumo/training.hpp"

namespace dumo {

inline constexpr int kSchemaVersion = 1;

// Final-evaluation MMD above this marks a run as diverged. An all-zeros
// generated set scores far above it on every bundled dataset; healthy
// one-step models sit well below.
inline constexpr double kDefaultMmdCeiling = 0.1;

struct RunConfig {
  TrainConfig train;
  DatasetSpec dataset;
  double mmd_ceiling = kDefaultMmdCeiling;
};

inline int dataset_num_classes(const DatasetSpec& d) {
  if (!d.conditional) return 0;
  if (d.name == "moons") return 2;
  if (d.name == "gaussian_mixture") return d.components;
  return 0;
}

inline void validate(const RunConfig& c) {
  c.dataset.validate();
  c.train.validate(dataset_num_classes(c.dataset));
  if (!(c.mmd_ceiling > 0.0)) throw ConfigError("mmd_ceiling must be positive");
}

inline std::string to_string(MmdEstimator e) { return e == MmdEstimator::biased ? "biased" : "unbiased"; }

inline MmdEstimator parse_estimator(const std::string& s) {
  if (s == "biased") return MmdEstimator::biased;
  if (s == "unbiased") return MmdEstimator::unbiased;
  throw ConfigError("unknown MMD estimator '" + s + "' (expected biased or unbiased)");
}

inline nlohmann::json to_json(const DatasetSpec& d) {
  return {{"name", d.name},         {"n", d.n},           {"heldout", d.heldout},
          {"noise", d.noise},       {"components", d.components}, {"radius", d.radius},
          {"conditional", d.conditional}, {"seed", d.seed}};
}

inline nlohmann::json resolved_json(const RunConfig& c) {
  const auto& t = c.train;
  nlohmann::json bw = t.eval.mmd.bandwidth ? nlohmann::json(*t.eval.mmd.bandwidth) : nlohmann::json(nullptr);
  return {{"schema_version", kSchemaVersion},
          {"paradigm", to_string(t.paradigm)},
          {"beta", t.beta},
          {"rho", t.rho},
          {"zeta", t.zeta},
          {"p_uncond", t.p_uncond},
          {"theta1", t.theta1},
          {"theta2", t.theta2},
          {"lr", t.lr},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},
          {"weight_decay", t.weight_decay},
          {"batch_size", t.batch_size},
          {"steps", t.steps},
          {"ema_decay", t.ema_decay},
          {"fd_epsilon", t.fd_epsilon},
          {"seed", t.seed},
          {"eval_every", t.eval_every},
          {"eval_live", t.eval_live},
          {"eval_euler_steps", t.eval_euler_steps},
          {"use_f32", t.use_f32},
          {"mmd_ceiling", c.mmd_ceiling},
          {"model",
           {{"hidden_dim", t.model.hidden_dim},
            {"depth", t.model.depth},
            {"time_embed_dim", t.model.time_embed_dim},
            {"max_frequency", t.model.max_frequency}}},
          {"eval",
           {{"samples", t.eval.samples},
            {"repetitions", t.eval.repetitions},
            {"estimator", to_string(t.eval.mmd.estimator)},
            {"bandwidth", bw},
            {"subsample_seed", t.eval.mmd.subsample_seed},
            {"max_median_points", t.eval.mmd.max_median_points}}},
          {"dataset", to_json(c.dataset)}};
}

namespace detail {

// Keys of `given` absent from `schema`, as dotted paths.
inline void unknown_keys(const nlohmann::json& given, const nlohmann::json& schema, const std::string& prefix,
                         std::vector<std::string>& out) {
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.contains(it.key())) {
      out.push_back(path);
    } else if (schema.at(it.key()).is_object()) {
      if (!it.value().is_object()) throw ConfigError("config key '" + path + "' must be an object");
      unknown_keys(it.value(), schema.at(it.key()), path, out);
    }
  }
}

// Recursive overlay; unlike a merge patch, null values are kept.
inline void overlay(nlohmann::json& base, const nlohmann::json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object()) {
      overlay(base[it.key()], it.value());
    } else {
      base[it.key()] = it.value();
    }
  }
}

template <typename T>
T field(const nlohmann::json& j, const std::string& key, const std::string& path) {
  const auto& v = j.at(key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError("config key '" + path + key + "' must be a boolean");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError("config key '" + path + key + "' must be an integer");
    if (std::is_unsigned_v<T> && v.get<long long>() < 0 && !v.is_number_unsigned()) {
      throw ConfigError("config key '" + path + key + "' must be non-negative");
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError("config key '" + path + key + "' must be a number");
  } else {
    if (!v.is_string()) throw ConfigError("config key '" + path + key + "' must be a string");
  }
  return v.get<T>();
}

}  // namespace detail

inline void check_schema_version(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!j.contains("schema_version")) throw ConfigError("config is missing schema_version");
  if (!j.at("schema_version").is_number_integer() || j.at("schema_version").get<int>() != kSchemaVersion) {
    throw ConfigError("unsupported schema_version (expected " + std::to_string(kSchemaVersion) + ")");
  }
}

inline DatasetSpec parse_dataset_fields(const nlohmann::json& d, const std::string& path) {
  using detail::field;
  DatasetSpec s;
  s.name = field<std::string>(d, "name", path);
  s.n = field<int>(d, "n", path);
  s.heldout = field<int>(d, "heldout", path);
  s.noise = field<double>(d, "noise", path);
  s.components = field<int>(d, "components", path);
  s.radius = field<double>(d, "radius", path);
  s.conditional = field<bool>(d, "conditional", path);
  s.seed = field<std::uint64_t>(d, "seed", path);
  s.validate();
  return s;
}

inline RunConfig parse_run_config(const nlohmann::json& given) {
  check_schema_version(given);
  nlohmann::json j = resolved_json(RunConfig{});
  std::vector<std::string> unknown;
  detail::unknown_keys(given, j, "", unknown);
  if (!unknown.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
  detail::overlay(j, given);

  using detail::field;
  RunConfig c;
  auto& t = c.train;
  t.paradigm = parse_paradigm(field<std::string>(j, "paradigm", ""));
  t.beta = field<double>(j, "beta", "");
  t.rho = field<double>(j, "rho", "");
  t.zeta = field<double>(j, "zeta", "");
  t.p_uncond = field<double>(j, "p_uncond", "");
  t.theta1 = field<double>(j, "theta1", "");
  t.theta2 = field<double>(j, "theta2", "");
  t.lr = field<double>(j, "lr", "");
  t.adam_beta1 = field<double>(j, "adam_beta1", "");
  t.adam_beta2 = field<double>(j, "adam_beta2", "");
  t.adam_eps = field<double>(j, "adam_eps", "");
  t.weight_decay = field<double>(j, "weight_decay", "");
  t.batch_size = field<int>(j, "batch_size", "");
  t.steps = field<long>(j, "steps", "");
  t.ema_decay = field<double>(j, "ema_decay", "");
  t.fd_epsilon = field<double>(j, "fd_epsilon", "");
  t.seed = field<std::uint64_t>(j, "seed", "");
  t.eval_every = field<long>(j, "eval_every", "");
  t.eval_live = field<bool>(j, "eval_live", "");
  t.eval_euler_steps = field<int>(j, "eval_euler_steps", "");
  t.use_f32 = field<bool>(j, "use_f32", "");
  c.mmd_ceiling = field<double>(j, "mmd_ceiling", "");

  const auto& m = j.at("model");
  t.model.hidden_dim = field<int>(m, "hidden_dim", "model.");
  t.model.depth = field<int>(m, "depth", "model.");
  t.model.time_embed_dim = field<int>(m, "time_embed_dim", "model.");
  t.model.max_frequency = field<double>(m, "max_frequency", "model.");

  const auto& e = j.at("eval");
  t.eval.samples = field<int>(e, "samples", "eval.");
  t.eval.repetitions = field<int>(e, "repetitions", "eval.");
  t.eval.mmd.estimator = parse_estimator(field<std::string>(e, "estimator", "eval."));
  if (e.at("bandwidth").is_null()) {
    t.eval.mmd.bandwidth.reset();
  } else {
    t.eval.mmd.bandwidth = field<double>(e, "bandwidth", "eval.");
  }
  t.eval.mmd.subsample_seed = field<std::uint64_t>(e, "subsample_seed", "eval.");
  t.eval.mmd.max_median_points = field<int>(e, "max_median_points", "eval.");

  c.dataset = parse_dataset_fields(j.at("dataset"), "dataset.");
  validate(c);
  return c;
}

// A dataset spec file is either a run config (its "dataset" block is used) or
// {"schema_version": 1, <dataset keys>}.
inline DatasetSpec parse_dataset_spec(const nlohmann::json& given) {
  check_schema_version(given);
  if (given.contains("dataset")) return parse_run_config(given).dataset;
  nlohmann::json schema = to_json(DatasetSpec{});
  schema["schema_version"] = kSchemaVersion;
  std::vector<std::string> unknown;
  detail::unknown_keys(given, schema, "", unknown);
  if (!unknown.empty()) {
    std::string msg = "unknown dataset keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
  detail::overlay(schema, given);
  return parse_dataset_fields(schema, "");
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(read_json_file(path));
}

}  // namespace dumo
