#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "ebench/datamodel.hpp"
#include "ebench/explain.hpp"
#include "ebench/gbt.hpp"
#include "ebench/linreg.hpp"
#include "ebench/scoring.hpp"
#include "json.hpp"

namespace ebench::model {

enum class ModelKind { kMlr, kMlri2, kMlri3, kMlri4, kGbt };

std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view text);
// 1 for mlr, m for mlri<m>; 0 for gbt.
int interaction_order(ModelKind kind);

// A trained linear or boosted model plus what is needed to read a record:
// the ordered input features and their training means.
struct BenchmarkModel {
  ModelKind kind = ModelKind::kMlr;
  std::string group;
  std::string target;
  std::vector<data::ColumnSpec> features;  // numeric or boolean, model input order
  std::vector<double> feature_means;       // (weighted) training means
  std::optional<linreg::LinearModel> linear;
  std::optional<gbt::GbtModel> gbt;

  std::vector<std::string> feature_names() const;
  double predict(std::span<const double> x) const;
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
};

// Linear: exact Shapley values with absent features set to their training
// mean. GBT: path-dependent tree SHAP.
explain::Explanation explain_record(const BenchmarkModel& model, std::span<const double> x);
// GBT only; linear models raise interactions_unsupported.
explain::InteractionExplanation explain_interactions(const BenchmarkModel& model, std::span<const double> x);

struct ParsedRecord {
  std::vector<double> x;
  std::optional<double> actual;
};

// Reads a JSON object keyed by feature name. Missing or mistyped features
// raise record_schema_mismatch listing them. The target is optional here.
ParsedRecord parse_record(const BenchmarkModel& model, const nlohmann::json& record);

// Returns `record` with `overrides` applied. Overrides may name features or
// the target; unknown names and mistyped values raise invalid_override.
nlohmann::json apply_overrides(const BenchmarkModel& model, const nlohmann::json& record,
                               const nlohmann::json& overrides);

struct ModelBundle {
  BenchmarkModel model;
  std::optional<scoring::ScoreTable> table;
  scoring::MetricReport metrics;  // out-of-fold
  nlohmann::json training;        // replay metadata
};

// Record -> {score, eer, predicted, certified}. Requires the target.
scoring::ScoreResult score_record(const ModelBundle& bundle, const nlohmann::json& record);

struct TrainConfig {
  ModelKind kind = ModelKind::kMlr;
  gbt::TuneGrid grid;
  gbt::CvOptions cv;             // k, repeats (grid search), seed, threads
  bool use_weights = true;
  bool calibrate = true;
  bool in_sample_calibration = false;
};

struct TrainResult {
  ModelBundle bundle;
  Eigen::VectorXd oof;  // out-of-fold predictions, first repeat
  std::uint64_t fold_fingerprint = 0;
  std::optional<gbt::CvReport> cv_report;
  std::optional<linreg::SignificanceTable> summary;
};

// Predictors are the numeric/boolean predictor-role columns in schema order.
std::vector<std::string> model_predictors(const data::Dataset& dataset);

// Fits the model on every row, computes out-of-fold metrics on a k-fold plan
// shared by all kinds for a given seed, and calibrates a ScoreTable from the
// out-of-fold EERs.
TrainResult train(const data::Dataset& dataset, const TrainConfig& config, std::string group = {});

struct CompareRow {
  ModelKind kind;
  scoring::MetricReport metrics;
  std::uint64_t fold_fingerprint = 0;
};

// Rows sorted by NRMSE ascending.
std::vector<CompareRow> compare(const data::Dataset& dataset, const std::vector<ModelKind>& kinds,
                                const TrainConfig& config);
std::string render_markdown(const std::vector<CompareRow>& rows);

// FNV-1a of the canonical CSV serialization.
std::uint64_t fingerprint(const data::Dataset& dataset);
std::string hex64(std::uint64_t value);

inline constexpr int kBundleSchemaVersion = 1;

void to_json(nlohmann::json& j, const BenchmarkModel& model);
BenchmarkModel model_from_json(const nlohmann::json& j);
void to_json(nlohmann::json& j, const ModelBundle& bundle);
ModelBundle bundle_from_json(const nlohmann::json& j);
void to_json(nlohmann::json& j, const CompareRow& row);

}  // namespace ebench::model
