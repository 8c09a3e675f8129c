#pragma once

#include <Eigen/Dense>

namespace dumo {

// Points are stored as columns: a batch of n points in d dimensions is d x n.
template <typename Real>
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Real>
using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

// Per-item scalars across a batch (times, mixing draws).
template <typename Real>
using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

using Points = Matrix<double>;
using Point = Vector<double>;

}  // namespace dumo
