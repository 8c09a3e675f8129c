#pragma once

// Training loop shared by the three paradigms.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dumo/data.hpp"
#include "dumo/errors.hpp"
#include "dumo/eval.hpp"
#include "dumo/metrics.hpp"
#include "dumo/network.hpp"
#include "dumo/objectives.hpp"
#include "dumo/rng.hpp"
#include "dumo/sampling.hpp"
#include "dumo/transport.hpp"

namespace dumo {

enum class Paradigm { flow_matching, single_branch, dumo };

inline std::string to_string(Paradigm p) {
  switch (p) {
    case Paradigm::flow_matching: return "flow-matching";
    case Paradigm::single_branch: return "single-branch";
    case Paradigm::dumo: return "dumo";
  }
  return "?";
}

inline Paradigm parse_paradigm(const std::string& s) {
  if (s == "flow-matching") return Paradigm::flow_matching;
  if (s == "single-branch") return Paradigm::single_branch;
  if (s == "dumo") return Paradigm::dumo;
  throw ConfigError("unknown paradigm '" + s + "' (expected flow-matching, single-branch or dumo)");
}

struct ModelShape {
  int hidden_dim = 256;
  int depth = 4;
  int time_embed_dim = 64;
  double max_frequency = 30.0;
};

struct TrainConfig {
  Paradigm paradigm = Paradigm::dumo;
  double beta = 0.7;
  double rho = 0.75;
  double zeta = 0.0;
  double p_uncond = 0.1;
  double theta1 = 1.0;
  double theta2 = 1.0;
  double lr = 2e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  int batch_size = 256;
  long steps = 10000;
  double ema_decay = 0.999;
  double fd_epsilon = 0.005;
  std::uint64_t seed = 0;
  long eval_every = 1000;
  bool eval_live = false;
  int eval_euler_steps = 100;
  EvalProtocol eval;
  ModelShape model;
  bool use_f32 = false;

  void validate(int num_classes) const {
    auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
    if (!in(beta, 0.0, 1.0)) throw ConfigError("beta must lie in [0,1]");
    if (!in(rho, 0.0, 1.0)) throw ConfigError("rho must lie in [0,1]");
    GuidanceConfig{zeta, p_uncond}.validate(num_classes);
    TimeDistribution{theta1, theta2}.validate();
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must lie in (0,1)");
    if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must lie in (0,1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (steps <= 0) throw ConfigError("steps must be positive");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in [0,1)");
    FdConfig{fd_epsilon}.validate();
    if (eval_every <= 0) throw ConfigError("eval_every must be positive");
    if (eval_euler_steps <= 0) throw ConfigError("eval_euler_steps must be positive");
    if (eval.samples < 2 || eval.repetitions <= 0) throw ConfigError("eval: bad protocol");
    mlp_config(num_classes).validate();
  }

  MlpConfig mlp_config(int num_classes) const {
    MlpConfig c;
    c.input_dim = 2;
    c.hidden_dim = model.hidden_dim;
    c.depth = model.depth;
    c.time_embed_dim = model.time_embed_dim;
    c.max_frequency = model.max_frequency;
    c.num_classes = num_classes;
    c.num_heads = paradigm == Paradigm::dumo ? 2 : 1;
    c.num_time_inputs = paradigm == Paradigm::single_branch ? 2 : 1;
    return c;
  }
};

// ----------------------------------------------------------------------------
// Optimizer and EMA
// ----------------------------------------------------------------------------

template <typename Real>
struct OptimizerState {
  std::vector<Real> m;
  std::vector<Real> v;
  long step = 0;

  static OptimizerState for_params(const ModelParams<Real>& p) {
    return {std::vector<Real>(p.size(), Real(0)), std::vector<Real>(p.size(), Real(0)), 0};
  }
};

struct AdamSettings {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.0;
  double eps = 1e-8;
};

// Decoupled weight decay Adam with bias correction:
//   p <- p (1 - lr wd) - lr * m_hat / (sqrt(v_hat) + eps)
template <typename Real>
void adamw_step(ModelParams<Real>& params, const ModelParams<Real>& grads, OptimizerState<Real>& state,
                const AdamSettings& s) {
  const std::size_t n = params.size();
  if (grads.size() != n || state.m.size() != n || state.v.size() != n) {
    throw StructuralError("adamw_step: parameter, gradient and moment sizes differ");
  }
  for (Real g : grads.values) {
    if (!std::isfinite(static_cast<double>(g))) throw DivergenceError("adamw_step: non-finite gradient");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  const Real b1 = Real(s.beta1), b2 = Real(s.beta2);
  const Real step_size = Real(s.lr / bc1);
  const Real sqrt_bc2 = Real(std::sqrt(bc2));
  const Real decay = Real(1.0 - s.lr * s.weight_decay);
  const Real eps = Real(s.eps);
  for (std::size_t i = 0; i < n; ++i) {
    const Real g = grads.values[i];
    state.m[i] = b1 * state.m[i] + (Real(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (Real(1) - b2) * g * g;
    const Real denom = std::sqrt(state.v[i]) / sqrt_bc2 + eps;
    params.values[i] = params.values[i] * decay - step_size * state.m[i] / denom;
  }
}

template <typename Real>
void ema_update(ModelParams<Real>& shadow, const ModelParams<Real>& params, double decay) {
  if (shadow.size() != params.size()) throw StructuralError("ema_update: size mismatch");
  const Real a = Real(decay), b = Real(1.0 - decay);
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    shadow.values[i] = a * shadow.values[i] + b * params.values[i];
  }
}

// ----------------------------------------------------------------------------
// Batches
// ----------------------------------------------------------------------------

// Independent streams per source of randomness, so paradigms that ignore one
// source (e.g. the single-branch mixing draws) stay aligned on the others.
struct TrainStreams {
  Rng data, noise, time, mix, drop;

  explicit TrainStreams(std::uint64_t seed)
      : data(Rng::stream(seed, "data")),
        noise(Rng::stream(seed, "noise")),
        time(Rng::stream(seed, "time")),
        mix(Rng::stream(seed, "mix")),
        drop(Rng::stream(seed, "class_drop")) {}

  nlohmann::json states() const {
    return {{"data", data.state()}, {"noise", noise.state()}, {"time", time.state()},
            {"mix", mix.state()}, {"class_drop", drop.state()}};
  }
};

template <typename Real>
Batch<Real> draw_batch(const Dataset2D& data, const TrainConfig& cfg, TrainStreams& s) {
  const int n = cfg.batch_size;
  const int d = static_cast<int>(data.points.rows());
  Matrix<Real> x(d, n), z(d, n);
  RowVector<Real> t(n);
  std::optional<std::vector<int>> labels;
  if (data.labels) labels = std::vector<int>(std::size_t(n));
  for (int j = 0; j < n; ++j) {
    const std::size_t k = s.data.index(std::size_t(data.size()));
    x.col(j) = data.points.col(Eigen::Index(k)).cast<Real>();
    if (labels) (*labels)[std::size_t(j)] = (*data.labels)[k];
  }
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < d; ++i) z(i, j) = Real(s.noise.normal());
  }
  const TimeDistribution td{cfg.theta1, cfg.theta2};
  for (int j = 0; j < n; ++j) t[j] = Real(sample_time(s.time, td));
  if (labels) {
    for (int j = 0; j < n; ++j) {
      if (s.drop.uniform() < cfg.p_uncond) (*labels)[std::size_t(j)] = data.num_classes;
    }
  }
  RowVector<Real> mix;
  if (cfg.paradigm == Paradigm::single_branch) {
    mix.resize(n);
    for (int j = 0; j < n; ++j) mix[j] = Real(s.mix.uniform());
  }
  return make_batch<Real>(std::move(x), std::move(z), std::move(t), std::move(labels), std::move(mix));
}

// One objective evaluation for the configured paradigm; the snapshot is the
// current parameter values (stop-gradient copy refreshed every step).
template <typename Real>
std::pair<LossBreakdown, ModelParams<Real>> paradigm_loss_and_grad(const TrainConfig& cfg,
                                                                   const ModelParams<Real>& params,
                                                                   const ModelParams<Real>& snapshot,
                                                                   const Batch<Real>& batch) {
  const GuidanceConfig guidance{cfg.zeta, cfg.p_uncond};
  const FdConfig fd{cfg.fd_epsilon};
  switch (cfg.paradigm) {
    case Paradigm::dumo:
      return dumo_loss_and_grad(params, snapshot, batch, cfg.beta, guidance, fd);
    case Paradigm::single_branch:
      return single_branch_loss_and_grad(params, snapshot, batch, BaselineConfig{cfg.rho}, guidance, fd);
    case Paradigm::flow_matching:
      return flow_matching_loss_and_grad(params, snapshot, batch, guidance);
  }
  throw ConfigError("unknown paradigm");
}

// ----------------------------------------------------------------------------
// Evaluation
// ----------------------------------------------------------------------------

// Generates n points (normalized coordinates) with the paradigm's inference
// sampler: one flow-map step for dumo / single-branch, Euler otherwise.
template <typename Real>
Points generate_points(const ModelParams<Real>& params, const TrainConfig& cfg, int n, std::uint64_t seed,
                       const std::optional<std::vector<int>>& labels) {
  Rng rng = Rng::stream(seed, "generate");
  Matrix<Real> z(params.config.input_dim, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < z.rows(); ++i) z(i, j) = Real(rng.normal());
  }
  std::optional<std::vector<int>> lab;
  if (params.config.num_classes > 0) {
    lab = labels ? *labels : std::vector<int>(std::size_t(n), params.config.null_class());
  }
  const auto res = cfg.paradigm == Paradigm::flow_matching
                       ? sample_euler(params, z, lab, cfg.eval_euler_steps)
                       : sample_onestep(params, z, lab);
  return res.points.template cast<double>();
}

template <typename Real>
EvalReport evaluate_params(const ModelParams<Real>& params, const TrainConfig& cfg, const Dataset2D& heldout,
                           long step) {
  std::optional<std::vector<int>> labels;
  if (heldout.labels && params.config.num_classes > 0) {
    labels = std::vector<int>(std::size_t(cfg.eval.samples));
    for (int j = 0; j < cfg.eval.samples; ++j) {
      (*labels)[std::size_t(j)] = (*heldout.labels)[std::size_t(j) % heldout.labels->size()];
    }
  }
  auto gen = [&](int rep) {
    const std::uint64_t seed = splitmix64(cfg.seed) ^ splitmix64(std::uint64_t(step) * 31 + std::uint64_t(rep));
    return generate_points(params, cfg, cfg.eval.samples, seed, labels);
  };
  return evaluate_mmd(gen, heldout.points, cfg.eval);
}

// ----------------------------------------------------------------------------
// Loop
// ----------------------------------------------------------------------------

template <typename Real>
struct TrainState {
  const ModelParams<Real>& params;
  const ModelParams<Real>& ema;
  const TrainStreams& streams;
  long step;
};

template <typename Real>
struct TrainHooks {
  // Called after every evaluation and once at termination.
  std::function<void(const TrainState<Real>&)> on_checkpoint;
};

template <typename Real>
struct TrainResult {
  ModelParams<Real> params;
  ModelParams<Real> ema;
  std::vector<MetricsRecord> log;
  bool diverged = false;
  std::optional<long> divergence_step;
  std::string divergence_reason;
};

template <typename Real>
TrainResult<Real> train(const TrainConfig& cfg, const DatasetSplit& data, const TrainHooks<Real>& hooks = {}) {
  if (data.train.size() == 0) throw ConfigError("train: dataset is empty");
  cfg.validate(data.train.num_classes);
  TrainStreams streams(cfg.seed);
  Rng init = Rng::stream(cfg.seed, "init");
  TrainResult<Real> res;
  res.params = init_params<Real>(cfg.mlp_config(data.train.num_classes), init);
  res.ema = res.params;
  auto opt = OptimizerState<Real>::for_params(res.params);
  const AdamSettings adam{cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay, cfg.adam_eps};
  res.log.reserve(std::size_t(cfg.steps));
  const auto t0 = std::chrono::steady_clock::now();

  for (long step = 1; step <= cfg.steps; ++step) {
    MetricsRecord rec;
    rec.step = step;
    try {
      const Batch<Real> batch = draw_batch<Real>(data.train, cfg, streams);
      auto [loss, grad] = paradigm_loss_and_grad(cfg, res.params, res.params, batch);
      rec.l_v = loss.l_v;
      rec.l_u = loss.l_u;
      rec.total = loss.total;
      rec.passes = loss.passes;
      double gn = 0.0;
      for (Real g : grad.values) gn += static_cast<double>(g) * static_cast<double>(g);
      rec.grad_norm = std::sqrt(gn);
      if (!std::isfinite(rec.grad_norm)) throw DivergenceError("gradient is not finite");
      adamw_step(res.params, grad, opt, adam);
      ema_update(res.ema, res.params, cfg.ema_decay);
    } catch (const DivergenceError& e) {
      const double nan = std::nan("");
      rec.l_v = rec.l_u = rec.total = rec.grad_norm = nan;
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      res.log.push_back(rec);
      res.diverged = true;
      res.divergence_step = step;
      res.divergence_reason = e.what();
      break;
    }
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      rec.mmd = evaluate_params(res.ema, cfg, data.heldout, step).mmd;
      if (cfg.eval_live) rec.mmd_live = evaluate_params(res.params, cfg, data.heldout, step).mmd;
      if (hooks.on_checkpoint) hooks.on_checkpoint({res.params, res.ema, streams, step});
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(rec);
  }
  if (res.diverged && hooks.on_checkpoint) {
    hooks.on_checkpoint({res.params, res.ema, streams, res.log.empty() ? 0 : res.log.back().step});
  }
  return res;
}

}  // namespace dumo
