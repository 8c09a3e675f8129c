#pragma once

// Training objectives.
//
//   dumo           beta * |v_theta - v*|^2 + (1 - beta) * |u_theta - u*|^2 with
//                  v* = v + zeta (sg(v_theta) - v_snap(null)) and
//                  u* = v* - t du_snap/dt (finite-difference total derivative)
//   single-branch  one output F(x_t, t, r); per item p ~ U(0,1) picks r = t
//                  (regress v*) or r = 0 (regress v* - (t - r) dF_snap/dt)
//   flow-matching  one output regressed on v*
//
// Every objective is split into target construction (gradient-free passes
// through the snapshot) and a regression step (one gradient-tracking pass).
// Targets never carry gradient; the returned gradient is that of the
// regression with targets held fixed.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dumo/errors.hpp"
#include "dumo/metrics.hpp"
#include "dumo/network.hpp"
#include "dumo/transport.hpp"
#include "dumo/types.hpp"

namespace dumo {

struct LossBreakdown {
  double total = 0.0;
  double l_v = 0.0;
  double l_u = 0.0;
  PassCounts passes;
};

struct GuidanceConfig {
  double zeta = 0.0;
  double p_uncond = 0.1;

  void validate(int num_classes) const {
    if (!(zeta >= 0.0 && zeta < 1.0)) throw ConfigError("guidance: zeta must lie in [0,1)");
    if (!(p_uncond >= 0.0 && p_uncond < 1.0)) {
      throw ConfigError("guidance: p_uncond must lie in [0,1)");
    }
    if (num_classes == 0 && zeta != 0.0) {
      throw ConfigError("guidance: zeta > 0 requires class-conditional data (zeta rule)");
    }
  }
};

struct FdConfig {
  double epsilon = 0.005;

  void validate() const {
    if (!(epsilon > 0.0 && epsilon <= 0.25)) {
      throw ConfigError("fd: epsilon must lie in (0, 0.25]");
    }
  }
};

struct BaselineConfig {
  double rho = 0.75;

  void validate() const {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("baseline: rho must lie in [0,1]");
  }
};

// One training batch. `labels` already reflects class dropping (null class
// token = num_classes). `mix` holds the per-item p ~ U(0,1) draws used by the
// single-branch objective and is ignored elsewhere.
template <typename Real>
struct Batch {
  Matrix<Real> x;
  Matrix<Real> z;
  RowVector<Real> t;
  std::optional<std::vector<int>> labels;
  RowVector<Real> mix;
  Matrix<Real> x_t;

  Eigen::Index size() const { return x.cols(); }
};

template <typename Real>
Batch<Real> make_batch(Matrix<Real> x, Matrix<Real> z, RowVector<Real> t,
                       std::optional<std::vector<int>> labels = std::nullopt,
                       RowVector<Real> mix = {}) {
  Batch<Real> b{std::move(x), std::move(z), std::move(t), std::move(labels), std::move(mix), {}};
  b.x_t = interpolate_batch<Real>(b.x, b.z, b.t);
  return b;
}

enum class Head { v, u };

namespace detail {

template <typename Real>
const Matrix<Real>& pick(const DualOutput<Real>& out, Head h) {
  if (h == Head::u) {
    if (!out.u) throw ConfigError("model has no u-head");
    return *out.u;
  }
  return out.v;
}

template <typename Real>
Conditioning<Real> conditioning(const ModelParams<Real>& p, const RowVector<Real>& t,
                                const std::optional<RowVector<Real>>& r,
                                const std::optional<std::vector<int>>& labels) {
  Conditioning<Real> c{t, std::nullopt, std::nullopt};
  if (p.config.num_time_inputs == 2) c.r = r ? *r : t;
  if (p.config.num_classes > 0) {
    if (!labels) throw StructuralError("class-conditional model requires labels");
    c.labels = labels;
  }
  return c;
}

template <typename Real>
std::vector<int> null_labels(const ModelParams<Real>& p, Eigen::Index n) {
  return std::vector<int>(std::size_t(n), p.config.null_class());
}

template <typename Real>
void require_finite(const Matrix<Real>& m, const char* what) {
  if (!m.allFinite()) throw DivergenceError(std::string(what) + " is not finite");
}

// Per-item squared error |a_j - b_j|^2. Sums over items always run in column
// order so that losses are reproducible bit for bit.
template <typename Real>
void squared_errors(const Matrix<Real>& a, const Matrix<Real>& b, std::vector<double>& out) {
  out.resize(std::size_t(a.cols()));
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      const double d = static_cast<double>(a(i, j)) - static_cast<double>(b(i, j));
      s += d * d;
    }
    out[std::size_t(j)] = s;
  }
}

inline double ordered_sum(const std::vector<double>& e) {
  double s = 0.0;
  for (double v : e) s += v;
  return s;
}

}  // namespace detail

// v + zeta (v_cond - v_uncond); both predictions are treated as constants.
template <typename DerivedV, typename DerivedC, typename DerivedU>
auto enhance_velocity(const Eigen::MatrixBase<DerivedV>& v, const Eigen::MatrixBase<DerivedC>& v_cond,
                      const Eigen::MatrixBase<DerivedU>& v_uncond, double zeta,
                      bool conditional = true) {
  using Real = typename DerivedV::Scalar;
  if (v.rows() != v_cond.rows() || v.cols() != v_cond.cols() || v.rows() != v_uncond.rows() ||
      v.cols() != v_uncond.cols()) {
    throw StructuralError("enhance_velocity: dimension mismatch");
  }
  if (!conditional && zeta != 0.0) {
    throw ConfigError("enhance_velocity: zeta > 0 requires class-conditional data (zeta rule)");
  }
  Matrix<Real> out = v + Real(zeta) * (v_cond - v_uncond);
  return out;
}

// u* = v* - t du/dt, column-wise.
template <typename Real>
Matrix<Real> flowmap_target(const Matrix<Real>& v_enh, const RowVector<Real>& t,
                            const Matrix<Real>& dudt) {
  if (v_enh.rows() != dudt.rows() || v_enh.cols() != dudt.cols() || t.size() != v_enh.cols()) {
    throw StructuralError("flowmap_target: shape mismatch");
  }
  Matrix<Real> out(v_enh.rows(), v_enh.cols());
  for (Eigen::Index j = 0; j < v_enh.cols(); ++j) out.col(j) = v_enh.col(j) - t[j] * dudt.col(j);
  return out;
}

// Total time derivative of a snapshot head along (dx/dt = tangent, dt/dt = 1),
// by a difference quotient over [max(t - eps, 0), min(t + eps, 1)]: central in
// the interior, one-sided at the boundaries. r (if any) stays fixed.
// Always exactly two gradient-free passes.
template <typename Real>
Matrix<Real> flowmap_time_derivative_fd(const ModelParams<Real>& snapshot, const Matrix<Real>& x_t,
                                        const RowVector<Real>& t, const Matrix<Real>& tangent,
                                        const std::optional<std::vector<int>>& labels,
                                        const FdConfig& fd, Head head = Head::u,
                                        const std::optional<RowVector<Real>>& r = std::nullopt,
                                        PassCounts* passes = nullptr) {
  fd.validate();
  if (x_t.rows() != tangent.rows() || x_t.cols() != tangent.cols() || t.size() != x_t.cols()) {
    throw StructuralError("flowmap_time_derivative_fd: shape mismatch");
  }
  const Eigen::Index n = x_t.cols();
  RowVector<Real> t_hi(n), t_lo(n), span(n);
  Matrix<Real> x_hi(x_t.rows(), n), x_lo(x_t.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double tj = static_cast<double>(t[j]);
    if (!(tj >= 0.0 && tj <= 1.0)) throw DomainError("fd derivative: t outside [0,1]");
    const double hi = std::min(tj + fd.epsilon, 1.0);
    const double lo = std::max(tj - fd.epsilon, 0.0);
    if (!(hi > lo)) throw DomainError("fd derivative: shifted times collapse");
    t_hi[j] = Real(hi);
    t_lo[j] = Real(lo);
    span[j] = Real(hi - lo);
    x_hi.col(j) = x_t.col(j) + Real(hi - tj) * tangent.col(j);
    x_lo.col(j) = x_t.col(j) + Real(lo - tj) * tangent.col(j);
  }
  const auto out_hi = forward(snapshot, x_hi, detail::conditioning(snapshot, t_hi, r, labels));
  const auto out_lo = forward(snapshot, x_lo, detail::conditioning(snapshot, t_lo, r, labels));
  if (passes) passes->grad_free += 2;
  Matrix<Real> d = detail::pick(out_hi, head) - detail::pick(out_lo, head);
  for (Eigen::Index j = 0; j < n; ++j) d.col(j) /= span[j];
  return d;
}

// Detached regression targets for one step, plus the grad-tracking forward
// that produced the current predictions.
template <typename Real>
struct StepState {
  DualOutput<Real> out;
  ForwardCache<Real> cache;
  Matrix<Real> v_target;
  Matrix<Real> u_target;  // dumo only
  std::vector<char> velocity_item;  // single-branch routing, 1 = velocity branch
  PassCounts passes;
};

// ----------------------------------------------------------------------------
// DuMo
// ----------------------------------------------------------------------------

template <typename Real>
StepState<Real> dumo_prepare(const ModelParams<Real>& params, const ModelParams<Real>& snapshot,
                             const Batch<Real>& batch, const GuidanceConfig& guidance,
                             const FdConfig& fd) {
  const auto& cfg = params.config;
  if (cfg.num_heads != 2) throw ConfigError("dumo: model needs two heads");
  if (cfg.num_time_inputs != 1) throw ConfigError("dumo: model takes a single time input");
  guidance.validate(cfg.num_classes);
  StepState<Real> s;
  s.out = forward(params, batch.x_t, detail::conditioning(params, batch.t, {}, batch.labels), &s.cache);
  s.passes.grad_tracking = 1;

  Matrix<Real> v = velocity_target_batch<Real>(batch.x, batch.z, batch.t);
  if (guidance.zeta > 0.0) {
    const auto null = detail::null_labels(snapshot, batch.size());
    const auto uncond =
        forward(snapshot, batch.x_t, detail::conditioning(snapshot, batch.t, {}, {null}));
    s.passes.grad_free += 1;
    v = enhance_velocity(v, s.out.v, uncond.v, guidance.zeta, cfg.num_classes > 0);
  }
  const Matrix<Real> dudt = flowmap_time_derivative_fd(snapshot, batch.x_t, batch.t, v, batch.labels,
                                                       fd, Head::u, {}, &s.passes);
  s.u_target = flowmap_target<Real>(v, batch.t, dudt);
  s.v_target = std::move(v);
  return s;
}

template <typename Real>
std::pair<LossBreakdown, ModelParams<Real>> dumo_regress(const ModelParams<Real>& params,
                                                         const StepState<Real>& s, double beta) {
  const double n = static_cast<double>(s.out.v.cols());
  std::vector<double> ev, eu;
  detail::squared_errors(s.out.v, s.v_target, ev);
  detail::squared_errors(*s.out.u, s.u_target, eu);
  LossBreakdown lb;
  lb.l_v = detail::ordered_sum(ev) / n;
  lb.l_u = detail::ordered_sum(eu) / n;
  lb.total = beta * lb.l_v + (1.0 - beta) * lb.l_u;
  lb.passes = s.passes;
  if (!std::isfinite(lb.total)) throw DivergenceError("dumo: loss is not finite");
  const Matrix<Real> gv = Real(2.0 * beta / n) * (s.out.v - s.v_target);
  const Matrix<Real> gu = Real(2.0 * (1.0 - beta) / n) * (*s.out.u - s.u_target);
  auto grad = backprop(params, s.cache, gv, gu);
  return {lb, std::move(grad)};
}

template <typename Real>
std::pair<LossBreakdown, ModelParams<Real>> dumo_loss_and_grad(
    const ModelParams<Real>& params, const ModelParams<Real>& snapshot, const Batch<Real>& batch,
    double beta, const GuidanceConfig& guidance, const FdConfig& fd) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("dumo: beta must lie in [0,1]");
  return dumo_regress(params, dumo_prepare(params, snapshot, batch, guidance, fd), beta);
}

// ----------------------------------------------------------------------------
// Single-branch baseline and plain flow matching
// ----------------------------------------------------------------------------

template <typename Real>
StepState<Real> single_branch_prepare(const ModelParams<Real>& params,
                                      const ModelParams<Real>& snapshot, const Batch<Real>& batch,
                                      const BaselineConfig& baseline,
                                      const GuidanceConfig& guidance, const FdConfig& fd) {
  const auto& cfg = params.config;
  if (cfg.num_heads != 1 || cfg.num_time_inputs != 2) {
    throw ConfigError("single-branch: model needs one head and two time inputs");
  }
  baseline.validate();
  guidance.validate(cfg.num_classes);
  const Eigen::Index n = batch.size();
  if (batch.mix.size() != n) throw StructuralError("single-branch: one mixing draw per item required");

  StepState<Real> s;
  s.velocity_item.resize(std::size_t(n));
  RowVector<Real> r(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const bool vel = static_cast<double>(batch.mix[j]) < baseline.rho;
    s.velocity_item[std::size_t(j)] = vel ? 1 : 0;
    r[j] = vel ? batch.t[j] : Real(0);
  }
  s.out = forward(params, batch.x_t, detail::conditioning(params, batch.t, {r}, batch.labels), &s.cache);
  s.passes.grad_tracking = 1;

  Matrix<Real> v = velocity_target_batch<Real>(batch.x, batch.z, batch.t);
  if (guidance.zeta > 0.0) {
    // The main forward predicts the average velocity over [r, t], not v, so the
    // conditional velocity needs its own pass at r = t.
    const auto cond = forward(snapshot, batch.x_t, detail::conditioning(snapshot, batch.t, {batch.t}, batch.labels));
    const auto null = detail::null_labels(snapshot, n);
    const auto uncond =
        forward(snapshot, batch.x_t, detail::conditioning(snapshot, batch.t, {batch.t}, {null}));
    s.passes.grad_free += 2;
    v = enhance_velocity(v, cond.v, uncond.v, guidance.zeta, cfg.num_classes > 0);
  }
  const Matrix<Real> dfdt = flowmap_time_derivative_fd(snapshot, batch.x_t, batch.t, v, batch.labels,
                                                       fd, Head::v, {r}, &s.passes);
  Matrix<Real> target(v.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) target.col(j) = v.col(j) - (batch.t[j] - r[j]) * dfdt.col(j);
  s.v_target = std::move(target);
  return s;
}

template <typename Real>
std::pair<LossBreakdown, ModelParams<Real>> single_output_regress(const ModelParams<Real>& params,
                                                                  const StepState<Real>& s) {
  const double n = static_cast<double>(s.out.v.cols());
  std::vector<double> e;
  detail::squared_errors(s.out.v, s.v_target, e);
  double sum_v = 0.0, sum_u = 0.0;
  for (std::size_t j = 0; j < e.size(); ++j) {
    if (s.velocity_item.empty() || s.velocity_item[j]) {
      sum_v += e[j];
    } else {
      sum_u += e[j];
    }
  }
  LossBreakdown lb;
  lb.l_v = sum_v / n;
  lb.l_u = sum_u / n;
  lb.total = lb.l_v + lb.l_u;
  lb.passes = s.passes;
  if (!std::isfinite(lb.total)) throw DivergenceError("loss is not finite");
  const Matrix<Real> gv = Real(2.0 / n) * (s.out.v - s.v_target);
  auto grad = backprop(params, s.cache, gv, Matrix<Real>{});
  return {lb, std::move(grad)};
}

// l_v sums the velocity-branch items and l_u the consistency-branch items,
// both normalised by the batch size, so total = l_v + l_u.
template <typename Real>
std::pair<LossBreakdown, ModelParams<Real>> single_branch_loss_and_grad(
    const ModelParams<Real>& params, const ModelParams<Real>& snapshot, const Batch<Real>& batch,
    const BaselineConfig& baseline, const GuidanceConfig& guidance, const FdConfig& fd) {
  return single_output_regress(params,
                               single_branch_prepare(params, snapshot, batch, baseline, guidance, fd));
}

template <typename Real>
StepState<Real> flow_matching_prepare(const ModelParams<Real>& params, const ModelParams<Real>& snapshot,
                                      const Batch<Real>& batch, const GuidanceConfig& guidance) {
  const auto& cfg = params.config;
  guidance.validate(cfg.num_classes);
  StepState<Real> s;
  std::optional<RowVector<Real>> r;
  if (cfg.num_time_inputs == 2) r = batch.t;
  s.out = forward(params, batch.x_t, detail::conditioning(params, batch.t, r, batch.labels), &s.cache);
  s.passes.grad_tracking = 1;
  Matrix<Real> v = velocity_target_batch<Real>(batch.x, batch.z, batch.t);
  if (guidance.zeta > 0.0) {
    const auto null = detail::null_labels(snapshot, batch.size());
    const auto uncond = forward(snapshot, batch.x_t, detail::conditioning(snapshot, batch.t, r, {null}));
    s.passes.grad_free += 1;
    v = enhance_velocity(v, s.out.v, uncond.v, guidance.zeta, cfg.num_classes > 0);
  }
  s.v_target = std::move(v);
  return s;
}

// Plain flow matching on the v output. Loss is reported entirely in l_v.
template <typename Real>
std::pair<LossBreakdown, ModelParams<Real>> flow_matching_loss_and_grad(
    const ModelParams<Real>& params, const ModelParams<Real>& snapshot, const Batch<Real>& batch,
    const GuidanceConfig& guidance) {
  return single_output_regress(params, flow_matching_prepare(params, snapshot, batch, guidance));
}

// ----------------------------------------------------------------------------
// Surrogate objective: flow-matching term plus lambda/(1-lambda) times the
// alignment between F(x_t, t) and the snapshot at (x_{lambda t}, lambda t).
// ----------------------------------------------------------------------------

struct SurrogateTerms {
  double total = 0.0;
  double fm_term = 0.0;
  double align_term = 0.0;
};

template <typename Real>
SurrogateTerms surrogate_loss(const ModelParams<Real>& params, const ModelParams<Real>& snapshot,
                              const Batch<Real>& batch, double lambda) {
  if (!(lambda > 0.0 && lambda < 1.0)) throw DomainError("surrogate: lambda must lie in (0,1)");
  const double n = static_cast<double>(batch.size());
  const auto out = forward(params, batch.x_t, detail::conditioning(params, batch.t, {}, batch.labels));
  const Matrix<Real> v = velocity_target_batch<Real>(batch.x, batch.z, batch.t);

  RowVector<Real> t_shrunk = (Real(lambda) * batch.t.array()).matrix();
  const Matrix<Real> x_shrunk = interpolate_batch<Real>(batch.x, batch.z, t_shrunk);
  const auto out_snap =
      forward(snapshot, x_shrunk, detail::conditioning(snapshot, t_shrunk, {}, batch.labels));

  std::vector<double> e;
  SurrogateTerms s;
  detail::squared_errors(out.v, v, e);
  s.fm_term = detail::ordered_sum(e) / n;
  detail::squared_errors(out.v, out_snap.v, e);
  s.align_term = detail::ordered_sum(e) / n;
  s.total = s.fm_term + lambda / (1.0 - lambda) * s.align_term;
  return s;
}

}  // namespace dumo
