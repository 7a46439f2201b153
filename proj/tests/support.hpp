#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>

#include "ebench/datamodel.hpp"
#include "ebench/gbt.hpp"
#include "ebench/rng.hpp"

namespace ebench::testkit {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("ebench-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline Eigen::MatrixXd uniform_matrix(Rng& rng, Eigen::Index n, Eigen::Index p, double lo = 0.0, double hi = 1.0) {
  Eigen::MatrixXd x(n, p);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) x(i, j) = lo + (hi - lo) * rng.uniform();
  }
  return x;
}

// Rounded features give repeated values, so split thresholds collide and
// records can land exactly on them.
inline Eigen::MatrixXd grid_matrix(Rng& rng, Eigen::Index n, Eigen::Index p, int levels = 8) {
  Eigen::MatrixXd x(n, p);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) x(i, j) = static_cast<double>(rng.below(static_cast<std::uint64_t>(levels)));
  }
  return x;
}

// Nonlinear target with pairwise and three-way structure plus noise.
inline std::vector<double> wiggly_target(Rng& rng, const Eigen::MatrixXd& x) {
  std::vector<double> y(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double v = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) v += std::sin(1.3 * x(i, j) + static_cast<double>(j)) * (1.0 + 0.2 * j);
    if (x.cols() >= 2) v += 2.0 * x(i, 0) * x(i, 1);
    if (x.cols() >= 3) v += x(i, 0) * x(i, 1) * x(i, 2);
    y[static_cast<std::size_t>(i)] = v + 0.1 * rng.normal();
  }
  return y;
}

struct RandomEnsemble {
  gbt::GbtModel model;
  Eigen::MatrixXd x;  // training features
};

// A boosted model fitted to random data: M features, `trees` rounds.
inline RandomEnsemble random_ensemble(std::uint64_t seed, int m, int trees, int depth, bool gridded = false) {
  Rng rng(seed);
  const Eigen::Index n = 60 + static_cast<Eigen::Index>(rng.below(60));
  RandomEnsemble r;
  r.x = gridded ? grid_matrix(rng, n, m) : uniform_matrix(rng, n, m, -2.0, 2.0);
  const std::vector<double> y = wiggly_target(rng, r.x);
  gbt::GbtParams p;
  p.max_depth = depth;
  p.nrounds = trees;
  p.eta = 0.1 + 0.8 * rng.uniform();
  p.subsample = 0.5 + 0.5 * rng.uniform();
  p.colsample_bytree = 0.5 + 0.5 * rng.uniform();
  r.model = gbt::fit_gbt(r.x, y, std::nullopt, p, rng.next());
  return r;
}

// Building-like synthetic table: x1..xp predictors, y = linear + one strong
// pairwise term (x1 * x2) + noise, shifted to stay positive.
inline data::Dataset synthetic_buildings(std::size_t n, std::size_t p, std::uint64_t seed, double interaction = 3.0,
                                         double noise = 0.5) {
  Rng rng(seed);
  std::vector<data::ColumnSpec> schema;
  std::vector<std::vector<data::Cell>> cols(p + 1);
  for (std::size_t j = 0; j < p; ++j) {
    schema.push_back({"x" + std::to_string(j + 1), data::ColumnKind::kNumeric, "", data::ColumnRole::kPredictor, {}});
  }
  schema.push_back({"y", data::ColumnKind::kNumeric, "kBtu/ft2", data::ColumnRole::kTarget, {}});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> x(p);
    double y = 40.0;
    for (std::size_t j = 0; j < p; ++j) {
      x[j] = 2.0 * rng.uniform() - 1.0;
      y += (1.0 + 0.5 * static_cast<double>(j)) * x[j];
      cols[j].emplace_back(x[j]);
    }
    y += interaction * x[0] * x[1] + noise * rng.normal();
    cols[p].emplace_back(y);
  }
  return data::Dataset(std::move(schema), std::move(cols));
}

}  // namespace ebench::testkit
