// dumo_lab: train, sweep, sample and eval on 2D toy data.
//
// Exit codes: 0 ok, 1 I/O or data error, 2 invalid configuration,
// 3 training diverged.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dumo/dumo.hpp"

namespace {

using namespace dumo;

constexpr int kExitData = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

int worker_threads() {
  const char* env = std::getenv("DUMO_LAB_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("DUMO_LAB_THREADS must be a positive integer");
  return static_cast<int>(std::min<long>(n, 256));
}

std::vector<double> parse_schedule(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      out.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw ConfigError("schedule: bad value '" + cell + "'");
    }
  }
  return out;
}

struct TrainArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

int cmd_train(const TrainArgs& a) {
  nlohmann::json j = read_json_file(a.config);
  RunConfig cfg = parse_run_config(j);
  if (a.seed) cfg.train.seed = *a.seed;
  const auto out = run_to_directory(cfg, a.out, a.force);
  if (!out.log.empty() && out.log.back().mmd) {
    std::printf("step %ld  mmd %s\n", out.log.back().step, csv_number(*out.log.back().mmd).c_str());
  }
  if (out.diverged) {
    std::fprintf(stderr, "diverged at step %ld: %s\n", out.divergence_step.value_or(-1),
                 out.divergence_reason.c_str());
    return kExitDiverged;
  }
  return 0;
}

struct SweepArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

int cmd_sweep(const SweepArgs& a) {
  nlohmann::json j = read_json_file(a.spec);
  if (a.seed) {
    if (!j.contains("config")) j["config"] = nlohmann::json::object();
    j["config"]["seed"] = *a.seed;
  }
  const ExperimentSpec spec = parse_experiment_spec(j);
  const std::string out = a.out.empty() ? spec.out : a.out;
  if (out.empty()) throw ConfigError("sweep: no output directory (--out or \"out\" in the spec)");
  SweepOptions opt;
  opt.threads = worker_threads();
  opt.quiet = false;
  const auto cells = run_sweep(spec, out, a.force, opt);
  std::cout << summary_csv(spec, cells);
  return 0;
}

struct SampleArgs {
  std::string checkpoint, out, mode = "flowmap", renoise = "fresh", schedule, weights = "ema";
  int nfe = 1, count = 2000;
  std::uint64_t seed = 0;
  std::optional<int> class_label;
  bool force = false;
};

int cmd_sample(const SampleArgs& a) {
  claim_output(a.out, a.force);
  claim_output(a.out + ".json", a.force);
  if (a.weights != "ema" && a.weights != "live") throw ConfigError("--weights must be ema or live");
  SampleRequest req;
  req.sampler.nfe = a.nfe;
  req.sampler.mode = parse_sample_mode(a.mode);
  req.sampler.renoise = parse_renoise(a.renoise);
  req.sampler.seed = a.seed;
  if (!a.schedule.empty()) req.sampler.schedule = parse_schedule(a.schedule);
  req.count = a.count;
  req.class_label = a.class_label;
  req.use_ema = a.weights == "ema";
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const auto res = sample_checkpoint(ck, req);
  write_points_csv(a.out, res.raw, res.labels);
  nlohmann::json side = {{"checkpoint", a.checkpoint},
                         {"paradigm", ck.meta.value("paradigm", "")},
                         {"step", ck.step},
                         {"weights", a.weights},
                         {"mode", a.mode},
                         {"nfe", a.nfe},
                         {"renoise", a.renoise},
                         {"schedule", req.sampler.mode == SampleMode::flowmap ? req.sampler.resolved_schedule()
                                                                              : std::vector<double>{}},
                         {"seed", a.seed},
                         {"count", a.count},
                         {"class", a.class_label ? nlohmann::json(*a.class_label) : nlohmann::json(nullptr)},
                         {"passes", res.passes}};
  write_text(a.out + ".json", side.dump(2) + "\n");
  std::printf("wrote %d points (%ld forward passes)\n", a.count, res.passes);
  return 0;
}

struct EvalArgs {
  std::string generated, spec, out;
  bool force = false;
};

int cmd_eval(const EvalArgs& a) {
  if (!a.out.empty()) claim_output(a.out, a.force);
  const nlohmann::json j = read_json_file(a.spec);
  DatasetSpec dataset = parse_dataset_spec(j);
  EvalProtocol protocol;
  if (j.contains("dataset")) protocol = parse_run_config(j).train.eval;
  const CsvPoints pts = read_points_csv(a.generated);
  nlohmann::json report = evaluate_generated(pts.raw, dataset, protocol);
  report["generated"] = a.generated;
  std::printf("mmd %s  bandwidth %s\n", format_double(report.at("mmd").get<double>()).c_str(),
              format_double(report.at("bandwidth").at(0).get<double>()).c_str());
  if (!a.out.empty()) write_text(a.out, report.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train, sweep, sample and evaluate one-step generators on 2D toy data"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train one configuration into a run directory");
  train->add_option("--config", ta.config, "JSON run config")->required()->check(CLI::ExistingFile);
  train->add_option("--out", ta.out, "Run directory")->required();
  train->add_option("--seed", ta.seed, "Override the config seed");
  train->add_flag("--force", ta.force, "Overwrite an existing run directory");

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "Run a grid of configurations x replicate seeds");
  sweep->add_option("--spec", sa.spec, "JSON experiment spec")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", sa.out, "Output directory (overrides the spec)");
  sweep->add_option("--seed", sa.seed, "Base seed for replicates");
  sweep->add_flag("--force", sa.force, "Overwrite an existing summary");

  SampleArgs pa;
  auto* samp = app.add_subcommand("sample", "Generate points from a checkpoint");
  samp->add_option("--checkpoint", pa.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  samp->add_option("--out", pa.out, "Output CSV (sidecar written to <out>.json)")->required();
  samp->add_option("--nfe", pa.nfe, "Forward passes per point (Euler steps in euler mode)");
  samp->add_option("--mode", pa.mode, "flowmap or euler");
  samp->add_option("--count", pa.count, "Number of points");
  samp->add_option("--seed", pa.seed, "Sampling seed");
  samp->add_option("--renoise", pa.renoise, "fresh or none (flowmap, nfe > 1)");
  samp->add_option("--schedule", pa.schedule, "Comma-separated times from 1 to 0 (nfe + 1 values)");
  samp->add_option("--class", pa.class_label, "Class label for conditional checkpoints");
  samp->add_option("--weights", pa.weights, "ema or live");
  samp->add_flag("--force", pa.force, "Overwrite existing output");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "MMD of a generated CSV against a dataset's held-out split");
  ev->add_option("--generated", ea.generated, "Generated CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--spec", ea.spec, "Dataset spec or run config JSON")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", ea.out, "Report JSON");
  ev->add_flag("--force", ea.force, "Overwrite an existing report");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(ta);
    if (*sweep) return cmd_sweep(sa);
    if (*samp) return cmd_sample(pa);
    if (*ev) return cmd_eval(ea);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const StructuralError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
  return 0;
}
