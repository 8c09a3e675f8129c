#pragma once

// Generators. Flow-map samplers step x0 = x_t - t u(x_t, t); the Euler sampler
// integrates dx/dt = v from t = 1 down to t = 0.
//
// The flow map comes from the u-head of a two-head model, or from a
// single-output (t, r) model evaluated at r = 0. Velocity comes from the
// v output (with r = t for (t, r) models).

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dumo/errors.hpp"
#include "dumo/network.hpp"
#include "dumo/rng.hpp"
#include "dumo/transport.hpp"

namespace dumo {

enum class SampleMode { flowmap, euler };
enum class Renoise { fresh, none };

inline SampleMode parse_sample_mode(const std::string& s) {
  if (s == "flowmap") return SampleMode::flowmap;
  if (s == "euler") return SampleMode::euler;
  throw ConfigError("unknown sample mode '" + s + "' (expected flowmap or euler)");
}

inline Renoise parse_renoise(const std::string& s) {
  if (s == "fresh") return Renoise::fresh;
  if (s == "none") return Renoise::none;
  throw ConfigError("unknown renoise policy '" + s + "' (expected fresh or none)");
}

// Uniform grid 1 = t_0 > t_1 > ... > t_nfe = 0.
inline std::vector<double> uniform_schedule(int nfe) {
  if (nfe <= 0) throw ConfigError("schedule: nfe must be positive");
  std::vector<double> s(static_cast<std::size_t>(nfe) + 1);
  for (int i = 0; i <= nfe; ++i) s[std::size_t(i)] = 1.0 - static_cast<double>(i) / nfe;
  s.back() = 0.0;
  return s;
}

struct SampleConfig {
  int nfe = 1;
  SampleMode mode = SampleMode::flowmap;
  std::vector<double> schedule;  // empty = uniform
  Renoise renoise = Renoise::fresh;
  std::uint64_t seed = 0;

  std::vector<double> resolved_schedule() const {
    return schedule.empty() ? uniform_schedule(nfe) : schedule;
  }

  void validate() const {
    if (nfe <= 0) throw ConfigError("sample: nfe must be positive");
    if (mode != SampleMode::flowmap) return;
    const auto s = resolved_schedule();
    if (s.size() != std::size_t(nfe) + 1) throw ConfigError("sample: schedule must hold nfe+1 times");
    if (s.front() != 1.0 || s.back() != 0.0) throw ConfigError("sample: schedule must run from 1 to 0");
    for (std::size_t i = 1; i < s.size(); ++i) {
      if (!(s[i] < s[i - 1])) throw ConfigError("sample: schedule must be strictly decreasing");
    }
  }
};

template <typename Real>
struct SampleResult {
  Matrix<Real> points;
  int nfe = 0;  // forward passes per generated point
};

inline bool has_flow_map(const MlpConfig& c) { return c.num_heads == 2 || c.num_time_inputs == 2; }

namespace detail {

template <typename Real>
Conditioning<Real> sampling_conditioning(const ModelParams<Real>& p, Eigen::Index n, double t,
                                         std::optional<double> r,
                                         const std::optional<std::vector<int>>& labels) {
  Conditioning<Real> c;
  c.t = RowVector<Real>::Constant(n, Real(t));
  if (p.config.num_time_inputs == 2) c.r = RowVector<Real>::Constant(n, Real(r ? *r : t));
  if (p.config.num_classes > 0) {
    c.labels = labels ? *labels : std::vector<int>(std::size_t(n), p.config.null_class());
  }
  return c;
}

template <typename Real>
Matrix<Real> flow_map(const ModelParams<Real>& p, const Matrix<Real>& x, double t,
                      const std::optional<std::vector<int>>& labels) {
  if (p.config.num_heads == 2) {
    return *forward(p, x, sampling_conditioning(p, x.cols(), t, std::nullopt, labels)).u;
  }
  if (p.config.num_time_inputs == 2) {
    return forward(p, x, sampling_conditioning(p, x.cols(), t, 0.0, labels)).v;
  }
  throw ConfigError("model lacks a flow-map output (no u-head and no second time input)");
}

template <typename Real>
Matrix<Real> velocity(const ModelParams<Real>& p, const Matrix<Real>& x, double t,
                      const std::optional<std::vector<int>>& labels) {
  return forward(p, x, sampling_conditioning(p, x.cols(), t, std::nullopt, labels)).v;
}

}  // namespace detail

// A field evaluated at one shared time: a flow map u(x, t) or a velocity v(x, t).
template <typename Real>
using TimeField = std::function<Matrix<Real>(const Matrix<Real>& x, double t)>;

// Flow-map jumps along the schedule; between jumps the estimate is re-noised to
// the next time with fresh noise (Renoise::fresh) or the original z.
// `trace`, if given, receives the data estimate after every jump.
template <typename Real>
SampleResult<Real> flowmap_jumps(const TimeField<Real>& flow_map, const Matrix<Real>& z, const SampleConfig& cfg,
                                 std::vector<Matrix<Real>>* trace = nullptr) {
  cfg.validate();
  if (cfg.mode != SampleMode::flowmap) throw ConfigError("sample_fewstep: mode must be flowmap");
  const auto schedule = cfg.resolved_schedule();
  Rng rng = Rng::stream(cfg.seed, "renoise");
  SampleResult<Real> out;
  Matrix<Real> x = z;
  for (int i = 0; i < cfg.nfe; ++i) {
    const double t = schedule[std::size_t(i)];
    Matrix<Real> x0 = x - Real(t) * flow_map(x, t);
    ++out.nfe;
    if (trace) trace->push_back(x0);
    if (i + 1 == cfg.nfe) {
      out.points = std::move(x0);
      break;
    }
    const double t_next = schedule[std::size_t(i) + 1];
    Matrix<Real> noise(z.rows(), z.cols());
    if (cfg.renoise == Renoise::fresh) {
      for (Eigen::Index j = 0; j < noise.cols(); ++j) {
        for (Eigen::Index k = 0; k < noise.rows(); ++k) noise(k, j) = Real(rng.normal());
      }
    } else {
      noise = z;
    }
    x = Real(LinearPath::alpha(t_next)) * noise + Real(LinearPath::gamma(t_next)) * x0;
  }
  return out;
}

// Explicit Euler on dx/dt = v over the uniform grid t_i = 1 - i/steps.
template <typename Real>
SampleResult<Real> integrate_euler(const TimeField<Real>& velocity, const Matrix<Real>& z, int steps) {
  if (steps <= 0) throw ConfigError("sample_euler: steps must be positive");
  const auto grid = uniform_schedule(steps);
  SampleResult<Real> out;
  Matrix<Real> x = z;
  for (int i = 0; i < steps; ++i) {
    const double t = grid[std::size_t(i)];
    const double dt = t - grid[std::size_t(i) + 1];
    x -= Real(dt) * velocity(x, t);
    ++out.nfe;
  }
  out.points = std::move(x);
  return out;
}

// x0 = z - u(z, 1). Unconditional draws on a conditional model use the null class.
template <typename Real>
SampleResult<Real> sample_onestep(const ModelParams<Real>& params, const Matrix<Real>& z,
                                  const std::optional<std::vector<int>>& labels = std::nullopt) {
  if (!has_flow_map(params.config)) throw ConfigError("sample_onestep: model lacks a u-head");
  SampleResult<Real> out;
  out.points = z - detail::flow_map(params, z, 1.0, labels);
  out.nfe = 1;
  return out;
}

template <typename Real>
SampleResult<Real> sample_fewstep(const ModelParams<Real>& params, const Matrix<Real>& z,
                                  const std::optional<std::vector<int>>& labels,
                                  const SampleConfig& cfg, std::vector<Matrix<Real>>* trace = nullptr) {
  if (!has_flow_map(params.config)) throw ConfigError("sample_fewstep: model lacks a u-head");
  const TimeField<Real> u = [&](const Matrix<Real>& x, double t) {
    return detail::flow_map(params, x, t, labels);
  };
  return flowmap_jumps(u, z, cfg, trace);
}

template <typename Real>
SampleResult<Real> sample_euler(const ModelParams<Real>& params, const Matrix<Real>& z,
                                const std::optional<std::vector<int>>& labels, int steps) {
  const TimeField<Real> v = [&](const Matrix<Real>& x, double t) {
    return detail::velocity(params, x, t, labels);
  };
  return integrate_euler(v, z, steps);
}

// Dispatch on SampleConfig; euler uses cfg.nfe as the step count.
template <typename Real>
SampleResult<Real> sample(const ModelParams<Real>& params, const Matrix<Real>& z,
                          const std::optional<std::vector<int>>& labels, const SampleConfig& cfg) {
  if (cfg.mode == SampleMode::euler) return sample_euler(params, z, labels, cfg.nfe);
  if (cfg.nfe == 1) return sample_onestep(params, z, labels);
  return sample_fewstep(params, z, labels, cfg);
}

}  // namespace dumo
