#pragma once

// 2D toy distributions.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dumo/errors.hpp"
#include "dumo/rng.hpp"
#include "dumo/types.hpp"

namespace dumo {

// Affine per-axis map applied to raw points: normalized = (raw - mean) / scale.
struct Normalization {
  Point mean = Point::Zero(2);
  Point scale = Point::Ones(2);

  Points apply(const Points& raw) const {
    return ((raw.colwise() - mean).array().colwise() / scale.array()).matrix();
  }
  Points invert(const Points& normalized) const {
    return ((normalized.array().colwise() * scale.array()).matrix()).colwise() + mean;
  }
};

struct Dataset2D {
  std::string name;
  Points points;  // 2 x n, normalized
  std::optional<std::vector<int>> labels;
  int num_classes = 0;
  Normalization normalization;

  Eigen::Index size() const { return points.cols(); }
};

// Fits the normalization to the current points (zero mean, unit per-axis
// population variance) and applies it.
inline void standardize(Dataset2D& d) {
  const Eigen::Index n = d.points.cols();
  if (n == 0) throw DataError("standardize: empty dataset");
  Normalization norm;
  norm.mean = d.points.rowwise().mean();
  const Points centered = d.points.colwise() - norm.mean;
  for (Eigen::Index i = 0; i < d.points.rows(); ++i) {
    const double var = centered.row(i).squaredNorm() / static_cast<double>(n);
    norm.scale[i] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  d.points = norm.apply(d.points);
  d.normalization = norm;
}

// Two interleaved half circles: upper arc (cos a, sin a) for a in [0, pi], lower
// arc (1 - cos a, 0.5 - sin a); angles evenly spaced, labels 0/1 by arc.
inline Dataset2D make_moons(int n, double noise_sd, Rng& rng, bool standardized = true) {
  if (n <= 0 || n % 2 != 0) throw ConfigError("make_moons: n must be positive and even");
  if (!(noise_sd >= 0.0)) throw ConfigError("make_moons: noise_sd must be non-negative");
  const int half = n / 2;
  Dataset2D d;
  d.name = "moons";
  d.num_classes = 2;
  d.points.resize(2, n);
  d.labels = std::vector<int>(std::size_t(n));
  for (int i = 0; i < half; ++i) {
    const double a = half == 1 ? 0.0 : std::numbers::pi * i / (half - 1);
    d.points(0, i) = std::cos(a);
    d.points(1, i) = std::sin(a);
    (*d.labels)[std::size_t(i)] = 0;
    d.points(0, half + i) = 1.0 - std::cos(a);
    d.points(1, half + i) = 0.5 - std::sin(a);
    (*d.labels)[std::size_t(half + i)] = 1;
  }
  if (noise_sd > 0.0) {
    for (int j = 0; j < n; ++j) {
      d.points(0, j) += noise_sd * rng.normal();
      d.points(1, j) += noise_sd * rng.normal();
    }
  }
  if (standardized) standardize(d);
  return d;
}

inline std::vector<Point> circle_centers(int k, double radius) {
  std::vector<Point> c;
  for (int i = 0; i < k; ++i) {
    const double a = 2.0 * std::numbers::pi * i / k;
    Point p(2);
    p << radius * std::cos(a), radius * std::sin(a);
    c.push_back(p);
  }
  return c;
}

// Equal-weight Gaussian mixture; label = component index.
inline Dataset2D make_gaussian_mixture(int n, const std::vector<Point>& centers, double sd, Rng& rng,
                                       bool standardized = true) {
  if (centers.empty()) throw ConfigError("make_gaussian_mixture: at least one center required");
  if (n <= 0) throw ConfigError("make_gaussian_mixture: n must be positive");
  Dataset2D d;
  d.name = "gaussian_mixture";
  d.num_classes = static_cast<int>(centers.size());
  d.points.resize(2, n);
  d.labels = std::vector<int>(std::size_t(n));
  for (int j = 0; j < n; ++j) {
    const std::size_t k = rng.index(centers.size());
    (*d.labels)[std::size_t(j)] = static_cast<int>(k);
    d.points(0, j) = centers[k][0] + sd * rng.normal();
    d.points(1, j) = centers[k][1] + sd * rng.normal();
  }
  if (standardized) standardize(d);
  return d;
}

// Cell index of a coordinate in [-2, 2] on the 4 x 4 grid.
inline int checkerboard_cell(double v) { return std::min(3, std::max(0, static_cast<int>(std::floor(v + 2.0)))); }

inline bool checkerboard_allowed(double x, double y) {
  return (checkerboard_cell(x) + checkerboard_cell(y)) % 2 == 0;
}

// Uniform on the 8 permitted cells of a 4 x 4 checkerboard over [-2, 2]^2,
// by rejection of draws that land in a forbidden cell.
inline Dataset2D make_checkerboard(int n, Rng& rng, bool standardized = true) {
  if (n <= 0) throw ConfigError("make_checkerboard: n must be positive");
  Dataset2D d;
  d.name = "checkerboard";
  d.points.resize(2, n);
  for (int j = 0; j < n;) {
    const double x = 4.0 * rng.uniform() - 2.0;
    const double y = 4.0 * rng.uniform() - 2.0;
    if (!checkerboard_allowed(x, y)) continue;
    d.points(0, j) = x;
    d.points(1, j) = y;
    ++j;
  }
  if (standardized) standardize(d);
  return d;
}

// ----------------------------------------------------------------------------
// Dataset specs used by configs: a train split and a held-out split drawn
// from one pool and both mapped through the train split's normalization.
// ----------------------------------------------------------------------------

struct DatasetSpec {
  std::string name = "moons";
  int n = 10000;
  int heldout = 2000;
  double noise = 0.1;       // moons noise sd / mixture component sd
  int components = 8;       // gaussian_mixture
  double radius = 2.0;      // gaussian_mixture
  bool conditional = false;  // expose labels to the model
  std::uint64_t seed = 1234;

  void validate() const {
    if (name != "moons" && name != "gaussian_mixture" && name != "checkerboard") {
      throw ConfigError("dataset: unknown name '" + name + "'");
    }
    if (n <= 0 || heldout <= 0) throw ConfigError("dataset: n and heldout must be positive");
    if (!(noise >= 0.0)) throw ConfigError("dataset: noise must be non-negative");
    if (components <= 0) throw ConfigError("dataset: components must be positive");
    if (conditional && name == "checkerboard") {
      throw ConfigError("dataset: checkerboard has no labels, conditional must be false");
    }
  }
};

struct DatasetSplit {
  Dataset2D train;
  Dataset2D heldout;
};

inline DatasetSplit make_split(const DatasetSpec& spec) {
  spec.validate();
  Rng gen = Rng::stream(spec.seed, "dataset");
  const int total = spec.n + spec.heldout;
  Dataset2D pool;
  if (spec.name == "moons") {
    pool = make_moons(total + total % 2, spec.noise, gen, false);
  } else if (spec.name == "gaussian_mixture") {
    pool = make_gaussian_mixture(total, circle_centers(spec.components, spec.radius), spec.noise, gen, false);
  } else {
    pool = make_checkerboard(total, gen, false);
  }
  // Fisher-Yates so the split is not ordered by arc / component.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(pool.size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = Eigen::Index(i);
  Rng shuffle = Rng::stream(spec.seed, "split");
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);

  auto take = [&](int begin, int count) {
    Dataset2D d;
    d.name = pool.name;
    d.num_classes = spec.conditional ? pool.num_classes : 0;
    d.points.resize(2, count);
    if (spec.conditional) d.labels = std::vector<int>(std::size_t(count));
    for (int j = 0; j < count; ++j) {
      const Eigen::Index src = order[std::size_t(begin + j)];
      d.points.col(j) = pool.points.col(src);
      if (spec.conditional) (*d.labels)[std::size_t(j)] = (*pool.labels)[std::size_t(src)];
    }
    return d;
  };
  DatasetSplit s{take(0, spec.n), take(spec.n, spec.heldout)};
  standardize(s.train);
  s.heldout.points = s.train.normalization.apply(s.heldout.points);
  s.heldout.normalization = s.train.normalization;
  return s;
}

// ----------------------------------------------------------------------------
// CSV: header "x0,x1[,class]", one point per row. The JSON sidecar
// (<path>.json) carries name, labels flag, class count and normalization.
// Points are written in raw (un-normalized) coordinates.
// ----------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_points_csv(const std::filesystem::path& path, const Points& raw,
                             const std::optional<std::vector<int>>& labels) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) out << (i ? "," : "") << "x" << i;
  if (labels) out << ",class";
  out << "\n";
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    for (Eigen::Index i = 0; i < raw.rows(); ++i) out << (i ? "," : "") << format_double(raw(i, j));
    if (labels) out << "," << (*labels)[std::size_t(j)];
    out << "\n";
  }
  if (!out) throw DataError("write failed for " + path.string());
}

struct CsvPoints {
  Points raw;
  std::optional<std::vector<int>> labels;
};

inline CsvPoints read_points_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  const bool has_class = !header.empty() && header.back() == "class";
  const std::size_t dim = header.size() - (has_class ? 1 : 0);
  if (dim == 0) throw DataError(path.string() + ": no coordinate columns");
  std::vector<double> coords;
  std::vector<int> labels;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        if (col < dim) {
          coords.push_back(std::stod(cell));
        } else if (has_class && col == dim) {
          labels.push_back(std::stoi(cell));
        }
      } catch (const std::exception&) {
        throw DataError(path.string() + ": malformed value '" + cell + "' on row " + std::to_string(rows + 1));
      }
      ++col;
    }
    if (col != header.size()) {
      throw DataError(path.string() + ": row " + std::to_string(rows + 1) + " has " + std::to_string(col) +
                      " columns, header has " + std::to_string(header.size()));
    }
    ++rows;
  }
  CsvPoints out;
  out.raw = Eigen::Map<const Points>(coords.data(), Eigen::Index(dim), Eigen::Index(rows));
  if (has_class) out.labels = std::move(labels);
  return out;
}

inline nlohmann::json normalization_json(const Normalization& n) {
  return {{"mean", {n.mean[0], n.mean[1]}}, {"scale", {n.scale[0], n.scale[1]}}};
}

inline Normalization normalization_from_json(const nlohmann::json& j) {
  Normalization n;
  n.mean << j.at("mean").at(0).get<double>(), j.at("mean").at(1).get<double>();
  n.scale << j.at("scale").at(0).get<double>(), j.at("scale").at(1).get<double>();
  return n;
}

inline void export_dataset(const Dataset2D& d, const std::filesystem::path& csv) {
  write_points_csv(csv, d.normalization.invert(d.points), d.labels);
  nlohmann::json side = {{"name", d.name},
                         {"labels", d.labels.has_value()},
                         {"num_classes", d.num_classes},
                         {"normalization", normalization_json(d.normalization)}};
  std::ofstream(csv.string() + ".json") << side.dump(2) << "\n";
}

inline Dataset2D import_dataset(const std::filesystem::path& csv) {
  std::ifstream side_in(csv.string() + ".json");
  if (!side_in) throw DataError("missing sidecar " + csv.string() + ".json");
  nlohmann::json side;
  try {
    side_in >> side;
  } catch (const std::exception& e) {
    throw DataError("malformed sidecar: " + std::string(e.what()));
  }
  auto pts = read_points_csv(csv);
  if (pts.raw.rows() != 2) throw DataError("dataset CSV must have two coordinate columns");
  Dataset2D d;
  d.name = side.at("name").get<std::string>();
  d.num_classes = side.at("num_classes").get<int>();
  d.normalization = normalization_from_json(side.at("normalization"));
  d.points = d.normalization.apply(pts.raw);
  if (side.at("labels").get<bool>()) {
    if (!pts.labels) throw DataError("sidecar declares labels but CSV has no class column");
    d.labels = std::move(pts.labels);
  }
  return d;
}

}  // namespace dumo
