#pragma once

// Run directories, sweeps, and the sample / eval workflows behind the CLI.
//
// A run directory holds
//   resolved-config.json   every config field, defaults included
//   metrics.jsonl          one MetricsRecord per step
//   checkpoint.bin         live + EMA parameters, rewritten at each evaluation
//   timing.json            wall-clock figures (kept out of the metrics stream)

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dumo/checkpoint.hpp"
#include "dumo/config.hpp"
#include "dumo/data.hpp"
#include "dumo/eval.hpp"
#include "dumo/sampling.hpp"
#include "dumo/training.hpp"

namespace dumo {

namespace fs = std::filesystem;

// Refuses to touch an existing output unless `force` is set.
inline void claim_output(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) {
    throw ConfigError("output '" + path.string() + "' already exists (use --force to overwrite)");
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << text;
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

struct RunOutcome {
  std::vector<MetricsRecord> log;
  bool diverged = false;  // non-finite loss or final MMD above the ceiling
  std::optional<long> divergence_step;
  std::string divergence_reason;
  std::optional<double> final_mmd;
  double wall_seconds = 0.0;
  ModelParams<double> params;
  ModelParams<double> ema;
};

namespace detail {

template <typename Real>
Checkpoint make_checkpoint(const RunConfig& cfg, const Normalization& norm, const TrainState<Real>& s) {
  Checkpoint ck;
  ck.config = s.params.config;
  ck.step = s.step;
  ck.set("params", s.params);
  ck.set("ema", s.ema);
  ck.rng_states = s.streams.states();
  ck.meta = {{"train_config", resolved_json(cfg)},
             {"paradigm", to_string(cfg.train.paradigm)},
             {"precision", cfg.train.use_f32 ? "f32" : "f64"},
             {"normalization", normalization_json(norm)}};
  return ck;
}

template <typename Real>
RunOutcome run_typed(const RunConfig& cfg, const DatasetSplit& split, const fs::path* ckpt_path) {
  TrainHooks<Real> hooks;
  if (ckpt_path) {
    hooks.on_checkpoint = [&](const TrainState<Real>& s) {
      write_checkpoint(*ckpt_path, make_checkpoint(cfg, split.train.normalization, s));
    };
  }
  auto res = train<Real>(cfg.train, split, hooks);
  RunOutcome out;
  out.log = std::move(res.log);
  out.params = res.params.template cast<double>();
  out.ema = res.ema.template cast<double>();
  out.wall_seconds = out.log.empty() ? 0.0 : out.log.back().wall_seconds;
  if (!res.diverged && !out.log.empty()) out.final_mmd = out.log.back().mmd;
  const auto flag = divergence_flag(out.log, cfg.mmd_ceiling);
  out.diverged = flag.diverged;
  out.divergence_step = flag.step;
  if (res.diverged) {
    out.divergence_reason = res.divergence_reason;
  } else if (flag.diverged) {
    out.divergence_reason = "final MMD above ceiling";
  }
  return out;
}

}  // namespace detail

// Trains one configuration. If `ckpt_path` is given, checkpoints are written
// at every evaluation and at termination.
inline RunOutcome run_config(const RunConfig& cfg, const fs::path* ckpt_path = nullptr) {
  validate(cfg);
  const DatasetSplit split = make_split(cfg.dataset);
  return cfg.train.use_f32 ? detail::run_typed<float>(cfg, split, ckpt_path)
                           : detail::run_typed<double>(cfg, split, ckpt_path);
}

inline std::string metrics_text(const std::vector<MetricsRecord>& log) {
  std::ostringstream os;
  write_jsonl(os, log);
  return os.str();
}

inline RunOutcome run_to_directory(const RunConfig& cfg, const fs::path& dir, bool force) {
  validate(cfg);
  claim_output(dir, force);
  fs::create_directories(dir);
  write_text(dir / "resolved-config.json", resolved_json(cfg).dump(2) + "\n");
  const fs::path ckpt = dir / "checkpoint.bin";
  RunOutcome out = run_config(cfg, &ckpt);
  write_text(dir / "metrics.jsonl", metrics_text(out.log));
  nlohmann::json timing = {{"wall_seconds", out.wall_seconds},
                           {"steps_completed", out.log.empty() ? 0 : out.log.back().step},
                           {"seconds_per_step", out.log.empty() ? 0.0 : out.wall_seconds / double(out.log.size())}};
  write_text(dir / "timing.json", timing.dump(2) + "\n");
  nlohmann::json status = {{"diverged", out.diverged},
                           {"divergence_step", out.divergence_step ? nlohmann::json(*out.divergence_step) : nullptr},
                           {"reason", out.divergence_reason},
                           {"final_mmd", out.final_mmd ? detail::finite_or_null(*out.final_mmd) : nlohmann::json(nullptr)}};
  write_text(dir / "status.json", status.dump(2) + "\n");
  return out;
}

// ----------------------------------------------------------------------------
// Sweeps
// ----------------------------------------------------------------------------

struct SweepAxis {
  std::string key;  // dotted path into the resolved config, e.g. "rho" or "model.hidden_dim"
  std::vector<nlohmann::json> values;
};

struct ExperimentSpec {
  nlohmann::json base;  // resolved run config
  std::vector<SweepAxis> axes;
  int replicates = 3;
  std::string out;  // may be overridden on the command line
};

namespace detail {

inline nlohmann::json* find_path(nlohmann::json& j, const std::string& dotted) {
  nlohmann::json* node = &j;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) return nullptr;
    node = &(*node)[part];
  }
  return node;
}

}  // namespace detail

// {"schema_version": 1, "config": {...}, "axes": {"rho": [0, 0.8, 1]},
//  "replicates": 3, "out": "runs/rho"}
// Axes are applied in key order; seeds are config.seed + k for k < replicates.
inline ExperimentSpec parse_experiment_spec(const nlohmann::json& j) {
  check_schema_version(j);
  std::vector<std::string> unknown;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    if (k != "schema_version" && k != "config" && k != "axes" && k != "replicates" && k != "out") {
      unknown.push_back(k);
    }
  }
  if (!unknown.empty()) {
    std::string msg = "unknown experiment keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
  ExperimentSpec spec;
  nlohmann::json config = j.value("config", nlohmann::json::object());
  if (!config.contains("schema_version")) config["schema_version"] = kSchemaVersion;
  spec.base = resolved_json(parse_run_config(config));
  if (j.contains("replicates")) {
    if (!j.at("replicates").is_number_integer()) throw ConfigError("replicates must be an integer");
    spec.replicates = j.at("replicates").get<int>();
  }
  if (spec.replicates < 1) throw ConfigError("replicates must be at least 1");
  if (j.contains("out")) spec.out = j.at("out").get<std::string>();
  const auto axes = j.value("axes", nlohmann::json::object());
  if (!axes.is_object()) throw ConfigError("axes must be an object of key -> list of values");
  for (auto it = axes.begin(); it != axes.end(); ++it) {
    nlohmann::json probe = spec.base;
    const nlohmann::json* slot = detail::find_path(probe, it.key());
    if (!slot || slot->is_object() || it.key() == "schema_version" || it.key() == "seed") {
      throw ConfigError("sweep axis '" + it.key() + "' does not name a config field");
    }
    if (!it.value().is_array() || it.value().empty()) {
      throw ConfigError("sweep axis '" + it.key() + "' needs a non-empty list of values");
    }
    SweepAxis axis{it.key(), {}};
    for (const auto& v : it.value()) axis.values.push_back(v);
    spec.axes.push_back(std::move(axis));
  }
  return spec;
}

struct SweepCell {
  std::vector<nlohmann::json> values;  // one per axis
  nlohmann::json config;               // resolved config with the axis values applied, base seed
};

// Cartesian product in row-major order over the axes (last axis fastest).
inline std::vector<SweepCell> sweep_cells(const ExperimentSpec& spec) {
  std::vector<SweepCell> cells(1, SweepCell{{}, spec.base});
  for (const auto& axis : spec.axes) {
    std::vector<SweepCell> next;
    for (const auto& c : cells) {
      for (const auto& v : axis.values) {
        SweepCell n = c;
        n.values.push_back(v);
        *detail::find_path(n.config, axis.key) = v;
        next.push_back(std::move(n));
      }
    }
    cells = std::move(next);
  }
  return cells;
}

struct ReplicateResult {
  std::uint64_t seed = 0;
  std::optional<double> mmd;
  bool diverged = false;
  std::string error;  // non-empty if the run could not be configured or crashed
};

struct CellSummary {
  std::vector<nlohmann::json> values;
  std::vector<ReplicateResult> replicates;
  double median_mmd = 0.0;  // diverged or failed replicates count as +inf
  int diverged = 0;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline double replicate_score(const ReplicateResult& r) {
  if (r.diverged || !r.error.empty() || !r.mmd || !std::isfinite(*r.mmd)) {
    return std::numeric_limits<double>::infinity();
  }
  return *r.mmd;
}

inline std::string cell_dir_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "cell-%03zu", i);
  return buf;
}

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return format_double(v);
}

inline std::string csv_value(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_float()) return format_double(v.get<double>());
  return v.dump();
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string summary_csv(const ExperimentSpec& spec, const std::vector<CellSummary>& cells) {
  std::ostringstream os;
  os << "cell";
  for (const auto& a : spec.axes) os << "," << a.key;
  os << ",median_mmd,diverged";
  for (int k = 0; k < spec.replicates; ++k) os << ",seed_" << k << ",mmd_" << k << ",diverged_" << k;
  os << ",errors\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    os << i;
    for (const auto& v : c.values) os << "," << csv_escape(csv_value(v));
    os << "," << csv_number(c.median_mmd) << "," << c.diverged;
    std::string errors;
    for (const auto& r : c.replicates) {
      os << "," << r.seed << "," << (r.mmd ? csv_number(*r.mmd) : "nan") << "," << (r.diverged ? 1 : 0);
      if (!r.error.empty()) errors += (errors.empty() ? "" : "; ") + std::string("seed ") + std::to_string(r.seed) + ": " + r.error;
    }
    os << "," << csv_escape(errors) << "\n";
  }
  return os.str();
}

struct SweepOptions {
  int threads = 1;
  bool write_runs = true;  // per-replicate run directories under out/
  bool quiet = true;
};

// Runs every (cell, replicate) job on a pool of `threads` workers. Jobs are
// self-contained, so results do not depend on scheduling; the summary is
// assembled afterwards in cell order.
inline std::vector<CellSummary> run_sweep(const ExperimentSpec& spec, const fs::path& out, bool force,
                                          const SweepOptions& opt = {}) {
  if (opt.threads < 1) throw ConfigError("sweep: thread count must be at least 1");
  const auto cells = sweep_cells(spec);
  claim_output(out / "summary.csv", force);
  fs::create_directories(out);
  const std::size_t reps = std::size_t(spec.replicates);
  const std::size_t jobs = cells.size() * reps;
  std::vector<ReplicateResult> results(jobs);
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;

  auto worker = [&] {
    for (std::size_t job = next++; job < jobs; job = next++) {
      const std::size_t ci = job / reps, k = job % reps;
      ReplicateResult& r = results[job];
      nlohmann::json cfg_json = cells[ci].config;
      r.seed = cfg_json.at("seed").get<std::uint64_t>() + k;
      cfg_json["seed"] = r.seed;
      try {
        const RunConfig cfg = parse_run_config(cfg_json);
        RunOutcome o;
        if (opt.write_runs) {
          o = run_to_directory(cfg, out / cell_dir_name(ci) / ("seed-" + std::to_string(r.seed)), true);
        } else {
          o = run_config(cfg);
        }
        r.mmd = o.final_mmd;
        r.diverged = o.diverged;
      } catch (const std::exception& e) {
        r.error = e.what();
      }
      if (!opt.quiet) {
        std::lock_guard lock(log_mutex);
        std::fprintf(stderr, "[sweep] cell %zu seed %llu: mmd=%s diverged=%d%s%s\n", ci,
                     static_cast<unsigned long long>(r.seed), r.mmd ? csv_number(*r.mmd).c_str() : "nan",
                     r.diverged ? 1 : 0, r.error.empty() ? "" : " error: ", r.error.c_str());
      }
    }
  };
  const std::size_t n_threads = std::min<std::size_t>(std::size_t(opt.threads), std::max<std::size_t>(jobs, 1));
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < n_threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::vector<CellSummary> summary;
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    CellSummary s;
    s.values = cells[ci].values;
    std::vector<double> scores;
    for (std::size_t k = 0; k < reps; ++k) {
      const auto& r = results[ci * reps + k];
      s.replicates.push_back(r);
      scores.push_back(replicate_score(r));
      if (r.diverged || !r.error.empty()) ++s.diverged;
    }
    s.median_mmd = median_of(scores);
    summary.push_back(std::move(s));
  }
  write_text(out / "summary.csv", summary_csv(spec, summary));
  return summary;
}

// ----------------------------------------------------------------------------
// Sampling from a checkpoint
// ----------------------------------------------------------------------------

struct SampleRequest {
  SampleConfig sampler;
  int count = 2000;
  std::optional<int> class_label;  // conditional models; default null class
  bool use_ema = true;
};

struct SampleOutput {
  Points raw;  // un-normalized coordinates
  std::optional<std::vector<int>> labels;
  long passes = 0;
};

inline SampleOutput sample_checkpoint(const Checkpoint& ck, const SampleRequest& req) {
  if (req.count < 1) throw ConfigError("sample: count must be positive");
  req.sampler.validate();
  const auto params = ck.params<double>(req.use_ema ? "ema" : "params");
  if (req.sampler.mode == SampleMode::flowmap && !has_flow_map(params.config)) {
    throw ConfigError("sample: flowmap mode needs a checkpoint with a flow-map output (dumo or single-branch)");
  }
  std::optional<std::vector<int>> labels;
  if (params.config.num_classes > 0) {
    const int c = req.class_label.value_or(params.config.null_class());
    if (c < 0 || c > params.config.num_classes) throw ConfigError("sample: class label out of range");
    labels = std::vector<int>(std::size_t(req.count), c);
  } else if (req.class_label) {
    throw ConfigError("sample: checkpoint is unconditional, --class not allowed");
  }
  Rng rng = Rng::stream(req.sampler.seed, "sample_noise");
  Points z(params.config.input_dim, req.count);
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = rng.normal();
  }
  const auto res = sample(params, z, labels, req.sampler);
  SampleOutput out;
  const Normalization norm = ck.meta.contains("normalization")
                                 ? normalization_from_json(ck.meta.at("normalization"))
                                 : Normalization{};
  out.raw = norm.invert(res.points);
  if (labels && req.class_label) out.labels = labels;
  out.passes = long(res.nfe) * req.count;
  return out;
}

// ----------------------------------------------------------------------------
// Evaluating a generated CSV against a dataset's held-out split
// ----------------------------------------------------------------------------

// The generated set is normalized with the training normalization, then split
// into up to `repetitions` disjoint chunks of `samples` points; a set smaller
// than one chunk is scored whole.
inline nlohmann::json evaluate_generated(const Points& generated_raw, const DatasetSpec& dataset,
                                         const EvalProtocol& protocol) {
  const DatasetSplit split = make_split(dataset);
  if (generated_raw.rows() != split.heldout.points.rows()) {
    throw DataError("eval: generated points have " + std::to_string(generated_raw.rows()) +
                    " columns, dataset has " + std::to_string(split.heldout.points.rows()));
  }
  const Points gen = split.train.normalization.apply(generated_raw);
  const Eigen::Index chunk = std::min<Eigen::Index>(protocol.samples, gen.cols());
  const Eigen::Index reps = std::max<Eigen::Index>(1, std::min<Eigen::Index>(protocol.repetitions, gen.cols() / chunk));
  nlohmann::json per = nlohmann::json::array(), bws = nlohmann::json::array();
  double sum = 0.0;
  for (Eigen::Index r = 0; r < reps; ++r) {
    const auto res = mmd_with_bandwidth(gen.middleCols(r * chunk, chunk), split.heldout.points, protocol.mmd);
    per.push_back(res.value);
    bws.push_back(res.bandwidth);
    sum += res.value;
  }
  return {{"mmd", sum / double(reps)},
          {"per_repetition", per},
          {"bandwidth", bws},
          {"estimator", to_string(protocol.mmd.estimator)},
          {"generated_points", gen.cols()},
          {"points_per_repetition", chunk},
          {"reference_points", split.heldout.points.cols()},
          {"dataset", to_json(dataset)}};
}

}  // namespace dumo
