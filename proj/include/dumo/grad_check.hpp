#pragma once

// Finite-difference audit of the dual-head gradient.
//
// Targets are built once from the snapshot and then frozen, exactly as the
// training step treats them; the check perturbs one parameter at a time and
// differentiates the weighted regression loss with central differences.

#include <algorithm>
#include <cmath>

#include "dumo/objectives.hpp"

namespace dumo {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps components
// whose true value is ~0 from turning roundoff into huge ratios.
inline constexpr double kGradCheckFloor = 1e-6;

inline double gradient_rel_error(double analytic, double numeric, double floor = kGradCheckFloor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Weighted dual-head loss of `params` against frozen targets.
inline double dumo_frozen_loss(const ModelParams<double>& params, const Batch<double>& batch,
                               const StepState<double>& targets, double beta) {
  const auto out = forward(params, batch.x_t, detail::conditioning(params, batch.t, {}, batch.labels));
  std::vector<double> ev, eu;
  detail::squared_errors(out.v, targets.v_target, ev);
  detail::squared_errors(*out.u, targets.u_target, eu);
  const double n = static_cast<double>(batch.size());
  return beta * detail::ordered_sum(ev) / n + (1.0 - beta) * detail::ordered_sum(eu) / n;
}

inline GradCheckResult grad_check(const ModelParams<double>& params, const ModelParams<double>& snapshot,
                                  const Batch<double>& batch, double beta, const GuidanceConfig& guidance,
                                  const FdConfig& fd, double fd_step = 1e-6) {
  if (!(fd_step > 0.0)) throw ConfigError("grad_check: fd_step must be positive");
  const auto targets = dumo_prepare(params, snapshot, batch, guidance, fd);
  const auto analytic = dumo_regress(params, targets, beta).second;
  ModelParams<double> probe = params;
  GradCheckResult r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = probe.values[i];
    probe.values[i] = orig + fd_step;
    const double hi = dumo_frozen_loss(probe, batch, targets, beta);
    probe.values[i] = orig - fd_step;
    const double lo = dumo_frozen_loss(probe, batch, targets, beta);
    probe.values[i] = orig;
    const double numeric = (hi - lo) / (2.0 * fd_step);
    const double e = gradient_rel_error(analytic.values[i], numeric);
    if (e > r.max_rel_error || i == 0) {
      r = {e, i, analytic.values[i], numeric};
    }
  }
  return r;
}

}  // namespace dumo
