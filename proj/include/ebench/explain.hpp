#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ebench/gbt.hpp"
#include "json.hpp"

namespace ebench::explain {

// Additive attribution of one prediction: base_value + sum(phi) = prediction.
struct Explanation {
  double base_value = 0.0;
  std::vector<double> phi;
  std::vector<std::string> feature_names;
  std::vector<double> feature_values;
  double prediction = 0.0;
};

// Pairwise attributions. Off-diagonal entries split each pair's interaction
// evenly (matrix(i,j) == matrix(j,i)); the diagonal holds main effects, so
// row i sums to phi_i.
struct InteractionExplanation {
  Eigen::MatrixXd matrix;
  double base_value = 0.0;
  std::vector<std::string> feature_names;
  std::vector<double> feature_values;
  double prediction = 0.0;
};

// E[f(x) | x_S] for the coalition S given as a bitmask over features.
using ConditionalEvaluator = std::function<double(std::uint64_t coalition)>;

inline constexpr std::size_t kMaxExactFeatures = 15;
inline constexpr std::size_t kMaxInteractionFeatures = 64;

// Shapley values by enumerating all 2^M coalitions. base_value is the empty
// coalition and prediction the full one. Throws a capacity error for M > 15.
Explanation shap_exact(const ConditionalEvaluator& evaluate, std::size_t feature_count);

// Cover-weighted conditional expectation of one tree: features in the
// coalition follow x, the others average their children by cover.
double tree_conditional(const gbt::Tree& tree, std::span<const double> x, std::uint64_t coalition);
ConditionalEvaluator gbt_conditional(const gbt::GbtModel& model, std::span<const double> x);

// Polynomial-time path-dependent SHAP for a boosted ensemble. Agrees with
// shap_exact over gbt_conditional.
Explanation shap_tree(const gbt::GbtModel& model, std::span<const double> x);

InteractionExplanation shap_interactions(const gbt::GbtModel& model, std::span<const double> x);

struct FeatureImportance {
  std::string feature;
  std::size_t index = 0;
  double mean_abs_shap = 0.0;
};

struct ImportanceReport {
  std::vector<FeatureImportance> ranking;  // descending
  std::vector<std::string> feature_names;
  Eigen::MatrixXd shap;      // n x M, column order = feature_names
  Eigen::MatrixXd features;  // n x M raw values
  double base_value = 0.0;
};

// Per-row shap_tree over x (rows computed in parallel, assembled by index).
ImportanceReport importance(const gbt::GbtModel& model, const Eigen::MatrixXd& x, unsigned threads = 1);

struct DependencePoint {
  double feature_value = 0.0;
  double shap_value = 0.0;
  std::optional<double> color_value;
};

std::vector<DependencePoint> dependence(const ImportanceReport& report, std::string_view feature,
                                        std::optional<std::string_view> color_feature = std::nullopt);

struct ForceEntry {
  std::string feature;
  double value = 0.0;
  double phi = 0.0;
};

struct ForceData {
  double base_value = 0.0;
  double output_value = 0.0;
  std::vector<ForceEntry> positive;  // pushing the prediction higher, |phi| descending
  std::vector<ForceEntry> negative;  // pushing it lower, |phi| descending
};

ForceData force_data(const Explanation& explanation);

void to_json(nlohmann::json& j, const Explanation& e);
void from_json(const nlohmann::json& j, Explanation& e);
void to_json(nlohmann::json& j, const InteractionExplanation& e);
void to_json(nlohmann::json& j, const ForceData& f);
void from_json(const nlohmann::json& j, ForceData& f);
void to_json(nlohmann::json& j, const ImportanceReport& r);
void to_json(nlohmann::json& j, const DependencePoint& p);

}  // namespace ebench::explain
