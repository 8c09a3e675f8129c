#pragma once

// Affine transport between data (t = 0) and noise (t = 1):
//   x_t = alpha(t) z + gamma(t) x.

#include <algorithm>
#include <concepts>
#include <string>

#include "dumo/errors.hpp"
#include "dumo/rng.hpp"
#include "dumo/types.hpp"

namespace dumo {

template <typename P>
concept TransportPath = requires(double t) {
  { P::alpha(t) } -> std::convertible_to<double>;
  { P::gamma(t) } -> std::convertible_to<double>;
  { P::alpha_dot(t) } -> std::convertible_to<double>;
  { P::gamma_dot(t) } -> std::convertible_to<double>;
};

struct LinearPath {
  static constexpr double alpha(double t) { return t; }
  static constexpr double gamma(double t) { return 1.0 - t; }
  static constexpr double alpha_dot(double) { return 1.0; }
  static constexpr double gamma_dot(double) { return -1.0; }
};

static_assert(TransportPath<LinearPath>);

// Guard keeping sampled times away from the t = 0 and t = 1 endpoints.
inline constexpr double kTimeGuard = 1e-3;

namespace detail {

inline void require_same_dim(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b) {
    throw StructuralError(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                          " vs " + std::to_string(b) + ")");
  }
}

inline void require_unit_time(double t, const char* what) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw DomainError(std::string(what) + ": t=" + std::to_string(t) + " outside [0,1]");
  }
}

}  // namespace detail

template <TransportPath Path = LinearPath, typename DerivedX, typename DerivedZ>
auto interpolate(const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedZ>& z,
                 double t) {
  detail::require_same_dim(x.size(), z.size(), "interpolate");
  detail::require_unit_time(t, "interpolate");
  using Real = typename DerivedX::Scalar;
  Vector<Real> out = Real(Path::alpha(t)) * z + Real(Path::gamma(t)) * x;
  return out;
}

template <TransportPath Path = LinearPath, typename DerivedX, typename DerivedZ>
auto velocity_target(const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedZ>& z,
                     double t) {
  detail::require_same_dim(x.size(), z.size(), "velocity_target");
  using Real = typename DerivedX::Scalar;
  Vector<Real> out = Real(Path::alpha_dot(t)) * z + Real(Path::gamma_dot(t)) * x;
  return out;
}

// Column-wise interpolate for a batch; t holds one time per column.
template <typename Real, TransportPath Path = LinearPath>
Matrix<Real> interpolate_batch(const Matrix<Real>& x, const Matrix<Real>& z,
                               const RowVector<Real>& t) {
  if (x.rows() != z.rows() || x.cols() != z.cols() || t.size() != x.cols()) {
    throw StructuralError("interpolate_batch: shape mismatch");
  }
  Matrix<Real> out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double tj = static_cast<double>(t[j]);
    detail::require_unit_time(tj, "interpolate_batch");
    out.col(j) = Real(Path::alpha(tj)) * z.col(j) + Real(Path::gamma(tj)) * x.col(j);
  }
  return out;
}

template <typename Real, TransportPath Path = LinearPath>
Matrix<Real> velocity_target_batch(const Matrix<Real>& x, const Matrix<Real>& z,
                                   const RowVector<Real>& t) {
  if (x.rows() != z.rows() || x.cols() != z.cols() || t.size() != x.cols()) {
    throw StructuralError("velocity_target_batch: shape mismatch");
  }
  Matrix<Real> out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double tj = static_cast<double>(t[j]);
    out.col(j) = Real(Path::alpha_dot(tj)) * z.col(j) + Real(Path::gamma_dot(tj)) * x.col(j);
  }
  return out;
}

// u = (x_t - x0) / t, the straight-line vector from x_t back to its data endpoint.
template <typename DerivedXt, typename DerivedX0>
auto flowmap_oracle(const Eigen::MatrixBase<DerivedXt>& x_t,
                    const Eigen::MatrixBase<DerivedX0>& x0, double t) {
  detail::require_same_dim(x_t.size(), x0.size(), "flowmap_oracle");
  if (!(t > 0.0)) throw DomainError("flowmap_oracle: t must be positive");
  using Real = typename DerivedXt::Scalar;
  Vector<Real> out = (x_t - x0) / Real(t);
  return out;
}

struct TimeDistribution {
  double theta1 = 1.0;
  double theta2 = 1.0;

  void validate() const {
    if (!(theta1 > 0.0) || !(theta2 > 0.0) || !std::isfinite(theta1) || !std::isfinite(theta2)) {
      throw ConfigError("time distribution: theta1 and theta2 must be positive");
    }
  }
};

// t ~ Beta(theta1, theta2), clamped to [kTimeGuard, 1 - kTimeGuard].
inline double sample_time(Rng& rng, const TimeDistribution& dist) {
  dist.validate();
  const double t = rng.beta(dist.theta1, dist.theta2);
  return std::clamp(t, kTimeGuard, 1.0 - kTimeGuard);
}

}  // namespace dumo
