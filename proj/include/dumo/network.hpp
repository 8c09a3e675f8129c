#pragma once

// Dense feed-forward model with a shared backbone and one or two output heads.
//
// Input features for one point are [x ; e(t) + e_r(t - r) + E[c]] where
//   e(t)    = (sin(w_k t), cos(w_k t))_k           sinusoidal time features
//   e_r(d)  = (sin(w_k d), cos(w_k d) - 1)_k        second-time features (zero at d = 0)
//   E[c]    = learned class row, row num_classes is the null class
// followed by `depth` SiLU layers of width hidden_dim and linear heads
//   v = W_v h + b_v,  u = W_u h + b_u.
//
// Parameters live in one flat array; ParamLayout maps names to column-major
// slices of it so Eigen can view them in place.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dumo/errors.hpp"
#include "dumo/rng.hpp"
#include "dumo/types.hpp"

namespace dumo {

struct MlpConfig {
  int input_dim = 2;
  int hidden_dim = 256;
  int depth = 4;
  int time_embed_dim = 64;  // 2K features for K frequencies
  int num_classes = 0;      // 0 = unconditional
  int num_heads = 2;
  int num_time_inputs = 1;
  double max_frequency = 30.0;

  int frequency_count() const { return time_embed_dim / 2; }
  int feature_dim() const { return input_dim + time_embed_dim; }
  int null_class() const { return num_classes; }

  void validate() const {
    if (input_dim <= 0 || hidden_dim <= 0 || depth <= 0 || time_embed_dim <= 0) {
      throw ConfigError("mlp: all dimensions must be positive");
    }
    if (time_embed_dim % 2 != 0) throw ConfigError("mlp: time_embed_dim must be even");
    if (num_classes < 0) throw ConfigError("mlp: num_classes must be non-negative");
    if (num_heads != 1 && num_heads != 2) throw ConfigError("mlp: num_heads must be 1 or 2");
    if (num_time_inputs != 1 && num_time_inputs != 2) {
      throw ConfigError("mlp: num_time_inputs must be 1 or 2");
    }
    if (!(max_frequency >= 1.0)) throw ConfigError("mlp: max_frequency must be >= 1");
  }

  bool operator==(const MlpConfig&) const = default;
};

// Closed-form parameter count; kept independent of ParamLayout so the two can
// be audited against each other.
inline std::size_t param_count(const MlpConfig& c) {
  const std::size_t h = c.hidden_dim;
  const std::size_t d = c.input_dim;
  std::size_t n = 0;
  if (c.num_classes > 0) n += std::size_t(c.time_embed_dim) * (c.num_classes + 1);
  n += h * c.feature_dim() + h;
  n += std::size_t(c.depth - 1) * (h * h + h);
  n += std::size_t(c.num_heads) * (d * h + d);
  return n;
}

inline std::size_t head_param_count(const MlpConfig& c) {
  return std::size_t(c.input_dim) * (c.hidden_dim + 1);
}

// Fraction of all parameters that belong to the second head.
inline double param_overhead(const MlpConfig& c) {
  if (c.num_heads != 2) throw ConfigError("param_overhead: requires a two-head config");
  return static_cast<double>(head_param_count(c)) / static_cast<double>(param_count(c));
}

struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::size_t size() const { return std::size_t(rows) * std::size_t(cols); }
};

class ParamLayout {
 public:
  ParamLayout() = default;

  explicit ParamLayout(const MlpConfig& c) {
    c.validate();
    if (c.num_classes > 0) add("class_embed", c.time_embed_dim, c.num_classes + 1);
    for (int l = 0; l < c.depth; ++l) {
      const int in = l == 0 ? c.feature_dim() : c.hidden_dim;
      add("hidden" + std::to_string(l) + ".weight", c.hidden_dim, in);
      add("hidden" + std::to_string(l) + ".bias", c.hidden_dim, 1);
    }
    add("head_v.weight", c.input_dim, c.hidden_dim);
    add("head_v.bias", c.input_dim, 1);
    if (c.num_heads == 2) {
      add("head_u.weight", c.input_dim, c.hidden_dim);
      add("head_u.bias", c.input_dim, 1);
    }
  }

  const std::vector<ParamSlice>& slices() const { return slices_; }
  std::size_t total() const { return total_; }

  const ParamSlice& at(const std::string& name) const {
    for (const auto& s : slices_) {
      if (s.name == name) return s;
    }
    throw StructuralError("no parameter slice named '" + name + "'");
  }

  bool contains(const std::string& name) const {
    for (const auto& s : slices_) {
      if (s.name == name) return true;
    }
    return false;
  }

  bool operator==(const ParamLayout& o) const {
    if (slices_.size() != o.slices_.size()) return false;
    for (std::size_t i = 0; i < slices_.size(); ++i) {
      const auto& a = slices_[i];
      const auto& b = o.slices_[i];
      if (a.name != b.name || a.offset != b.offset || a.rows != b.rows || a.cols != b.cols) {
        return false;
      }
    }
    return true;
  }

 private:
  void add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    slices_.push_back({std::move(name), total_, rows, cols});
    total_ += slices_.back().size();
  }

  std::vector<ParamSlice> slices_;
  std::size_t total_ = 0;
};

template <typename Real>
struct ModelParams {
  using MatMap = Eigen::Map<Matrix<Real>>;
  using ConstMatMap = Eigen::Map<const Matrix<Real>>;

  // Over-aligned so that Eigen's SIMD peeling on every slice depends only on
  // the layout, never on where the heap put the buffer.
  using Storage = std::vector<Real, Eigen::aligned_allocator<Real>>;

  MlpConfig config;
  ParamLayout layout;
  Storage values;

  ModelParams() = default;
  explicit ModelParams(const MlpConfig& c) : config(c), layout(c), values(layout.total(), Real(0)) {}

  static ModelParams zeros_like(const ModelParams& p) {
    ModelParams z;
    z.config = p.config;
    z.layout = p.layout;
    z.values.assign(p.values.size(), Real(0));
    return z;
  }

  std::size_t size() const { return values.size(); }

  MatMap view(const std::string& name) {
    const auto& s = layout.at(name);
    return MatMap(values.data() + s.offset, s.rows, s.cols);
  }
  ConstMatMap view(const std::string& name) const {
    const auto& s = layout.at(name);
    return ConstMatMap(values.data() + s.offset, s.rows, s.cols);
  }
  MatMap view(const ParamSlice& s) { return MatMap(values.data() + s.offset, s.rows, s.cols); }
  ConstMatMap view(const ParamSlice& s) const {
    return ConstMatMap(values.data() + s.offset, s.rows, s.cols);
  }

  std::span<Real> slice(const std::string& name) {
    const auto& s = layout.at(name);
    return {values.data() + s.offset, s.size()};
  }
  std::span<const Real> slice(const std::string& name) const {
    const auto& s = layout.at(name);
    return {values.data() + s.offset, s.size()};
  }

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out;
    out.config = config;
    out.layout = layout;
    out.values.assign(values.begin(), values.end());
    return out;
  }
};

// Weights ~ N(0, 1/fan_in), biases zero, class rows ~ N(0, 1). Draws follow
// layout order, so configs that differ only by a trailing second head share
// every other initial value.
template <typename Real = double>
ModelParams<Real> init_params(const MlpConfig& config, Rng& rng) {
  ModelParams<Real> p(config);
  for (const auto& s : p.layout.slices()) {
    Real* data = p.values.data() + s.offset;
    if (s.name == "class_embed") {
      for (std::size_t i = 0; i < s.size(); ++i) data[i] = Real(rng.normal());
    } else if (s.name.ends_with(".weight")) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(s.cols));
      for (std::size_t i = 0; i < s.size(); ++i) data[i] = Real(scale * rng.normal());
    }
  }
  return p;
}

// Per-item conditioning for a batch of n points.
template <typename Real>
struct Conditioning {
  RowVector<Real> t;
  std::optional<RowVector<Real>> r;        // only for num_time_inputs == 2
  std::optional<std::vector<int>> labels;  // only for num_classes > 0; null class allowed

  Eigen::Index size() const { return t.size(); }
};

template <typename Real>
struct DualOutput {
  Matrix<Real> v;
  std::optional<Matrix<Real>> u;
};

template <typename Real>
struct ForwardCache {
  Matrix<Real> features;
  std::vector<Matrix<Real>> activations;  // SiLU outputs, one per hidden layer
  std::vector<Matrix<Real>> gates;        // sigmoid(pre-activation), one per hidden layer
  std::vector<int> labels;
};

inline std::vector<double> embedding_frequencies(const MlpConfig& c) {
  const int k = c.frequency_count();
  std::vector<double> w(k);
  for (int i = 0; i < k; ++i) {
    const double frac = k == 1 ? 0.0 : static_cast<double>(i) / (k - 1);
    w[i] = std::pow(c.max_frequency, frac);
  }
  return w;
}

namespace detail {

template <typename Real>
void check_conditioning(const MlpConfig& c, const Matrix<Real>& x, const Conditioning<Real>& cond) {
  if (x.rows() != c.input_dim) {
    throw StructuralError("forward: points have " + std::to_string(x.rows()) +
                          " rows, model expects " + std::to_string(c.input_dim));
  }
  if (cond.t.size() != x.cols()) throw StructuralError("forward: one time per point required");
  if (c.num_time_inputs == 2 && !cond.r) {
    throw StructuralError("forward: model takes a second time input r, none supplied");
  }
  if (c.num_time_inputs == 1 && cond.r) {
    throw StructuralError("forward: second time input r supplied to a single-time model");
  }
  if (cond.r && cond.r->size() != x.cols()) throw StructuralError("forward: r size mismatch");
  if (c.num_classes > 0 && !cond.labels) {
    throw StructuralError("forward: class-conditional model requires labels");
  }
  if (c.num_classes == 0 && cond.labels) {
    throw StructuralError("forward: labels supplied to an unconditional model");
  }
  if (cond.labels) {
    if (static_cast<Eigen::Index>(cond.labels->size()) != x.cols()) {
      throw StructuralError("forward: label count mismatch");
    }
    for (int l : *cond.labels) {
      if (l < 0 || l > c.num_classes) throw StructuralError("forward: label out of range");
    }
  }
}

template <typename Real>
Matrix<Real> build_features(const ModelParams<Real>& p, const Matrix<Real>& x,
                            const Conditioning<Real>& cond) {
  const auto& c = p.config;
  const auto freqs = embedding_frequencies(c);
  const int k = c.frequency_count();
  const Eigen::Index n = x.cols();
  Matrix<Real> f(c.feature_dim(), n);
  f.topRows(c.input_dim) = x;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double t = static_cast<double>(cond.t[j]);
    for (int i = 0; i < k; ++i) {
      f(c.input_dim + i, j) = Real(std::sin(freqs[i] * t));
      f(c.input_dim + k + i, j) = Real(std::cos(freqs[i] * t));
    }
    if (cond.r) {
      const double d = t - static_cast<double>((*cond.r)[j]);
      for (int i = 0; i < k; ++i) {
        f(c.input_dim + i, j) += Real(std::sin(freqs[i] * d));
        f(c.input_dim + k + i, j) += Real(std::cos(freqs[i] * d) - 1.0);
      }
    }
  }
  if (cond.labels) {
    const auto table = p.view("class_embed");
    for (Eigen::Index j = 0; j < n; ++j) {
      f.col(j).bottomRows(c.time_embed_dim) += table.col((*cond.labels)[j]);
    }
  }
  return f;
}

}  // namespace detail

// Runs the model; fills `cache` when given so backprop can follow.
template <typename Real>
DualOutput<Real> forward(const ModelParams<Real>& p, const Matrix<Real>& x,
                         const Conditioning<Real>& cond, ForwardCache<Real>* cache = nullptr) {
  const auto& c = p.config;
  detail::check_conditioning(c, x, cond);
  Matrix<Real> a = detail::build_features(p, x, cond);
  if (cache) {
    cache->activations.clear();
    cache->gates.clear();
    cache->labels = cond.labels ? *cond.labels : std::vector<int>{};
    cache->features = a;
  }
  for (int l = 0; l < c.depth; ++l) {
    const std::string prefix = "hidden" + std::to_string(l);
    const auto w = p.view(prefix + ".weight");
    const auto b = p.view(prefix + ".bias");
    Matrix<Real> z(w.rows(), a.cols());
    z.noalias() = w * a;
    z.colwise() += b.col(0);
    Matrix<Real> gate = (Real(1) + (-z.array()).exp()).inverse().matrix();
    a = (z.array() * gate.array()).matrix();
    if (cache) {
      cache->activations.push_back(a);
      cache->gates.push_back(std::move(gate));
    }
  }
  DualOutput<Real> out;
  {
    const auto w = p.view("head_v.weight");
    const auto b = p.view("head_v.bias");
    out.v.noalias() = w * a;
    out.v.colwise() += b.col(0);
  }
  if (c.num_heads == 2) {
    const auto w = p.view("head_u.weight");
    const auto b = p.view("head_u.bias");
    Matrix<Real> u(w.rows(), a.cols());
    u.noalias() = w * a;
    u.colwise() += b.col(0);
    out.u = std::move(u);
  }
  return out;
}

// Reverse-mode gradient of sum(grad_v .* v) + sum(grad_u .* u) with respect to
// every parameter. An empty grad_u is treated as zero.
template <typename Real>
ModelParams<Real> backprop(const ModelParams<Real>& p, const ForwardCache<Real>& cache,
                           const Matrix<Real>& grad_v, const Matrix<Real>& grad_u) {
  const auto& c = p.config;
  if (cache.activations.size() != std::size_t(c.depth)) {
    throw StructuralError("backprop: cache does not match model depth");
  }
  const Eigen::Index n = cache.features.cols();
  if (grad_v.rows() != c.input_dim || grad_v.cols() != n) {
    throw StructuralError("backprop: grad_v shape mismatch");
  }
  const bool has_grad_u = grad_u.size() > 0;
  if (has_grad_u && (c.num_heads != 2 || grad_u.rows() != c.input_dim || grad_u.cols() != n)) {
    throw StructuralError("backprop: grad_u shape mismatch or model has no u-head");
  }

  ModelParams<Real> g = ModelParams<Real>::zeros_like(p);
  const Matrix<Real>& top = cache.activations.back();

  g.view("head_v.weight").noalias() = grad_v * top.transpose();
  g.view("head_v.bias") = grad_v.rowwise().sum();
  Matrix<Real> da(c.hidden_dim, n);
  da.noalias() = p.view("head_v.weight").transpose() * grad_v;
  if (has_grad_u) {
    g.view("head_u.weight").noalias() = grad_u * top.transpose();
    g.view("head_u.bias") = grad_u.rowwise().sum();
    da.noalias() += p.view("head_u.weight").transpose() * grad_u;
  }

  const bool need_feature_grad = c.num_classes > 0;
  for (int l = c.depth - 1; l >= 0; --l) {
    const std::string prefix = "hidden" + std::to_string(l);
    const auto& s = cache.gates[l].array();
    const auto& a = cache.activations[l].array();
    // d silu(z)/dz = s + silu(z) (1 - s)
    Matrix<Real> dz = (da.array() * (s + a * (Real(1) - s))).matrix();
    const Matrix<Real>& below = l == 0 ? cache.features : cache.activations[l - 1];
    g.view(prefix + ".weight").noalias() = dz * below.transpose();
    g.view(prefix + ".bias") = dz.rowwise().sum();
    if (l > 0 || need_feature_grad) {
      Matrix<Real> next(below.rows(), n);
      next.noalias() = p.view(prefix + ".weight").transpose() * dz;
      da = std::move(next);
    }
  }
  if (need_feature_grad) {
    auto table = g.view("class_embed");
    for (Eigen::Index j = 0; j < n; ++j) {
      table.col(cache.labels[j]) += da.col(j).bottomRows(c.time_embed_dim);
    }
  }
  return g;
}

}  // namespace dumo
