#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ebench/cv.hpp"
#include "json.hpp"

namespace ebench::gbt {

// Flat-array node. Internal nodes send x[feature] < threshold left.
struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf output (unscaled by shrinkage)
  double cover = 0.0;  // training rows routed through this node

  bool is_leaf() const { return feature < 0; }
};

class Tree {
 public:
  Tree() = default;
  explicit Tree(std::vector<TreeNode> nodes);

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  const TreeNode& node(int index) const { return nodes_[static_cast<std::size_t>(index)]; }
  const TreeNode& root() const { return nodes_.front(); }

  template <typename Row>
  double predict(const Row& x) const {
    int i = 0;
    while (!nodes_[static_cast<std::size_t>(i)].is_leaf()) {
      const TreeNode& n = nodes_[static_cast<std::size_t>(i)];
      i = x[n.feature] < n.threshold ? n.left : n.right;
    }
    return nodes_[static_cast<std::size_t>(i)].value;
  }

  int depth() const;
  // Largest number of distinct features on any root-to-leaf path.
  int max_path_features() const;
  // Recomputes every cover by routing the given rows.
  void recount_covers(const Eigen::MatrixXd& x);
  // Cover-weighted mean of the leaf values.
  double expected_value() const;

 private:
  std::vector<TreeNode> nodes_;
};

struct CartOptions {
  int max_depth = 3;
  std::size_t min_leaf = 1;
};

// Greedy SSE-reduction CART on the given rows and features. Thresholds are
// midpoints between consecutive distinct values; ties go to the lowest
// feature index, then the lowest threshold. Covers count the fitted rows.
Tree fit_cart(const Eigen::MatrixXd& x, std::span<const double> y, std::optional<std::span<const double>> w,
              const CartOptions& options, std::span<const std::size_t> rows = {},
              std::span<const int> features = {});

struct GbtParams {
  int max_depth = 3;
  int nrounds = 100;
  double eta = 0.3;
  double colsample_bytree = 1.0;
  double subsample = 1.0;
  std::size_t min_leaf = 1;

  bool operator==(const GbtParams&) const = default;
};

struct GbtModel {
  double base_score = 0.0;
  double eta = 0.3;
  int max_depth = 3;
  std::vector<std::string> feature_names;
  std::vector<Tree> trees;

  std::size_t feature_count() const { return feature_names.size(); }
};

// Squared-error boosting. Round t draws floor(subsample*n) rows and
// ceil(colsample*p) features without replacement from Rng(seed), fits CART
// to the residuals, and adds eta * tree. Covers are recounted over the full
// training set after each tree is finished.
GbtModel fit_gbt(const Eigen::MatrixXd& x, std::span<const double> y, std::optional<std::span<const double>> w,
                 const GbtParams& params, std::uint64_t seed, std::vector<std::string> feature_names = {});

// base_score + eta * sum of the first `tree_limit` trees (all by default).
Eigen::VectorXd predict_gbt(const GbtModel& model, const Eigen::MatrixXd& x,
                            std::optional<std::size_t> tree_limit = std::nullopt);
double predict_gbt(const GbtModel& model, std::span<const double> x);

// Grid ranges. Defaults are the discretized search space; validate() checks
// them against the allowed bounds unless `override_bounds` is set.
struct TuneGrid {
  std::vector<int> max_depth{2, 3};
  std::vector<int> nrounds{25, 50, 100, 150, 200};
  std::vector<double> eta{0.1, 0.3, 0.5, 0.7, 0.9};
  std::vector<double> colsample_bytree{0.2, 0.4, 0.6, 0.8};
  std::vector<double> subsample{0.25, 0.5, 0.75, 1.0};
  std::size_t min_leaf = 1;
  bool override_bounds = false;

  void validate() const;
  // Cells in declaration order: max_depth, nrounds, eta, colsample, subsample
  // (outermost to innermost).
  std::vector<GbtParams> cells() const;
};

struct CvCell {
  GbtParams params;
  double mean_rmse = 0.0;
  double std_rmse = 0.0;
  std::vector<double> fold_rmse;  // [repeat * k + fold]
};

struct CvReport {
  std::vector<CvCell> cells;
  std::size_t chosen = 0;
  std::uint64_t seed = 0;
  std::size_t k = 0;
  std::size_t repeats = 0;
  std::uint64_t fold_fingerprint = 0;
};

struct CvOptions {
  std::size_t k = 10;
  std::size_t repeats = 2;
  std::uint64_t seed = 0;
  unsigned threads = 1;  // 0 = hardware concurrency
};

struct GridSearchResult {
  GbtModel model;
  CvReport report;
};

// Repeated k-fold grid search on validation RMSE. The winning cell is
// refit on all rows. The report is identical for any thread count.
GridSearchResult grid_search_cv(const Eigen::MatrixXd& x, std::span<const double> y,
                                std::optional<std::span<const double>> w, const TuneGrid& grid,
                                const CvOptions& options, std::vector<std::string> feature_names = {});

// Seed used for fold `fold` of repeat `repeat`, and for the final refit.
std::uint64_t fit_seed(std::uint64_t seed, std::size_t repeat, std::size_t fold);
std::uint64_t refit_seed(std::uint64_t seed);

void to_json(nlohmann::json& j, const GbtModel& model);
void from_json(const nlohmann::json& j, GbtModel& model);
void to_json(nlohmann::json& j, const GbtParams& params);
void from_json(const nlohmann::json& j, GbtParams& params);
void to_json(nlohmann::json& j, const TuneGrid& grid);
void from_json(const nlohmann::json& j, TuneGrid& grid);
void to_json(nlohmann::json& j, const CvReport& report);

inline constexpr int kModelSchemaVersion = 1;

}  // namespace ebench::gbt
