#pragma once

// Maximum mean discrepancy with a Gaussian RBF kernel
//   k(a, b) = exp(-|a - b|^2 / (2 bw^2)).

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dumo/errors.hpp"
#include "dumo/metrics.hpp"
#include "dumo/rng.hpp"
#include "dumo/types.hpp"

namespace dumo {

enum class MmdEstimator { biased, unbiased };

struct MmdConfig {
  std::optional<double> bandwidth;  // nullopt = median heuristic on the pooled sample
  MmdEstimator estimator = MmdEstimator::unbiased;
  std::uint64_t subsample_seed = 0;
  int max_median_points = 2000;

  void validate() const {
    if (bandwidth && !(*bandwidth > 0.0)) throw ConfigError("mmd: bandwidth must be positive");
  }
};

// Median of the non-zero pairwise distances over X and Y pooled, divided by
// sqrt(2). Pools larger than max_points are subsampled without replacement by
// a seeded shuffle.
inline double median_heuristic(const Points& x, const Points& y, std::uint64_t seed = 0,
                               int max_points = 2000) {
  if (x.rows() != y.rows()) throw StructuralError("median_heuristic: dimension mismatch");
  const Eigen::Index n = x.cols() + y.cols();
  if (n < 2) throw ConfigError("median_heuristic: need at least two points");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) idx[std::size_t(i)] = i;
  if (n > max_points) {
    Rng rng = Rng::stream(seed, "median_subsample");
    for (std::size_t i = 0; i < std::size_t(max_points); ++i) {
      std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
    }
    idx.resize(std::size_t(max_points));
  }
  auto point = [&](Eigen::Index i) { return i < x.cols() ? x.col(i) : y.col(i - x.cols()); };
  std::vector<double> d;
  d.reserve(idx.size() * (idx.size() - 1) / 2);
  for (std::size_t a = 0; a < idx.size(); ++a) {
    for (std::size_t b = a + 1; b < idx.size(); ++b) {
      const double dist = (point(idx[a]) - point(idx[b])).norm();
      if (dist > 0.0) d.push_back(dist);
    }
  }
  if (d.empty()) throw DomainError("median_heuristic: degenerate bandwidth (all points identical)");
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + mid, d.end());
  double median = d[mid];
  if (d.size() % 2 == 0) {
    const double below = *std::max_element(d.begin(), d.begin() + mid);
    median = 0.5 * (median + below);
  }
  return median / std::sqrt(2.0);
}

namespace detail {

// Sum of k(a_i, b_j) over all pairs, optionally skipping i == j.
inline double kernel_sum(const Points& a, const Points& b, double bw, bool skip_diagonal) {
  const Eigen::VectorXd an = a.colwise().squaredNorm().transpose();
  const Eigen::RowVectorXd bn = b.colwise().squaredNorm();
  Eigen::MatrixXd d2(a.cols(), b.cols());
  d2.noalias() = -2.0 * a.transpose() * b;
  d2.colwise() += an;
  d2.rowwise() += bn;
  const double scale = -1.0 / (2.0 * bw * bw);
  double total = 0.0;
  for (Eigen::Index j = 0; j < d2.cols(); ++j) {
    double col = 0.0;
    for (Eigen::Index i = 0; i < d2.rows(); ++i) {
      if (skip_diagonal && i == j) continue;
      col += std::exp(scale * std::max(d2(i, j), 0.0));
    }
    total += col;
  }
  return total;
}

}  // namespace detail

struct MmdResult {
  double value = 0.0;  // squared MMD estimate
  double bandwidth = 0.0;
};

inline MmdResult mmd_with_bandwidth(const Points& x, const Points& y, const MmdConfig& cfg = {}) {
  cfg.validate();
  if (x.cols() == 0 || y.cols() == 0) throw ConfigError("mmd: empty point set");
  if (x.cols() < 2 || y.cols() < 2) throw ConfigError("mmd: each set needs at least two points");
  if (x.rows() != y.rows()) throw StructuralError("mmd: dimension mismatch");
  const double bw =
      cfg.bandwidth ? *cfg.bandwidth : median_heuristic(x, y, cfg.subsample_seed, cfg.max_median_points);
  const double m = static_cast<double>(x.cols());
  const double n = static_cast<double>(y.cols());
  const bool unbiased = cfg.estimator == MmdEstimator::unbiased;
  const double kxx = detail::kernel_sum(x, x, bw, unbiased);
  const double kyy = detail::kernel_sum(y, y, bw, unbiased);
  const double kxy = detail::kernel_sum(x, y, bw, false);
  MmdResult r;
  r.bandwidth = bw;
  if (unbiased) {
    r.value = kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n);
  } else {
    r.value = kxx / (m * m) + kyy / (n * n) - 2.0 * kxy / (m * n);
  }
  return r;
}

inline double mmd(const Points& x, const Points& y, const MmdConfig& cfg = {}) {
  return mmd_with_bandwidth(x, y, cfg).value;
}

// Fixed evaluation protocol: `repetitions` independent generated sets of
// `samples` points each, scored against the same reference set and averaged.
struct EvalProtocol {
  int samples = 2000;
  int repetitions = 3;
  MmdConfig mmd;
};

struct EvalReport {
  double mmd = 0.0;
  std::vector<double> per_repetition;
  std::vector<double> bandwidths;
};

inline EvalReport evaluate_mmd(const std::function<Points(int repetition)>& generate,
                               const Points& reference, const EvalProtocol& protocol) {
  if (protocol.repetitions <= 0 || protocol.samples < 2) throw ConfigError("eval: bad protocol");
  EvalReport rep;
  double sum = 0.0;
  for (int i = 0; i < protocol.repetitions; ++i) {
    const Points gen = generate(i);
    const auto r = mmd_with_bandwidth(gen, reference, protocol.mmd);
    rep.per_repetition.push_back(r.value);
    rep.bandwidths.push_back(r.bandwidth);
    sum += r.value;
  }
  rep.mmd = sum / protocol.repetitions;
  return rep;
}

struct DivergenceReport {
  bool diverged = false;
  std::optional<long> step;
};

// Flags the first non-finite loss, or a final MMD strictly above `mmd_ceiling`.
inline DivergenceReport divergence_flag(const std::vector<MetricsRecord>& log,
                                        std::optional<double> mmd_ceiling = std::nullopt) {
  for (const auto& r : log) {
    if (!std::isfinite(r.total) || !std::isfinite(r.l_v) || !std::isfinite(r.l_u)) {
      return {true, r.step};
    }
  }
  if (mmd_ceiling) {
    for (auto it = log.rbegin(); it != log.rend(); ++it) {
      if (!it->mmd) continue;
      if (!std::isfinite(*it->mmd) || *it->mmd > *mmd_ceiling) return {true, it->step};
      break;
    }
  }
  return {};
}

}  // namespace dumo
