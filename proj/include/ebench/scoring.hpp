#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>

#include "json.hpp"

namespace ebench::scoring {

// Energy efficiency ratio: actual / predicted source EUI.
double compute_eer(double actual, double predicted);

// P(X <= x) for X ~ Gamma(shape, scale).
double gamma_cdf(double x, double shape, double scale);

// 2.5 -> 3, -2.5 -> -3.
long round_half_away(double value);

struct FitDiagnostics {
  std::size_t samples = 0;
  int iterations = 0;
  bool converged = false;
  double rss = 0.0;               // sum of squared CDF residuals
  double rmse = 0.0;              // sqrt(rss / samples)
  double max_abs_residual = 0.0;
  double initial_shape = 0.0;     // method-of-moments start
  double initial_scale = 0.0;
};

class ScoreTable {
 public:
  static constexpr int kVersion = 1;

  ScoreTable(double shape, double scale, FitDiagnostics diagnostics = {});

  double shape() const { return shape_; }
  double scale() const { return scale_; }
  const FitDiagnostics& diagnostics() const { return diagnostics_; }

  double cdf(double eer) const { return gamma_cdf(eer, shape_, scale_); }
  // clamp(round(100 (1 - F(eer))), 1, 100)
  int score(double eer) const;
  double median() const;

 private:
  double shape_;
  double scale_;
  FitDiagnostics diagnostics_;
};

inline constexpr std::size_t kMinCalibrationSamples = 30;
inline constexpr int kCertificationThreshold = 75;

// Least-squares fit of the gamma CDF to the (weighted) Hazen plotting
// positions of the sorted EERs, started from the method of moments and
// refined by Levenberg-Marquardt on (log shape, log scale).
ScoreTable fit_score_table(std::span<const double> eers, std::optional<std::span<const double>> w = std::nullopt);

struct ScoreResult {
  int score = 0;
  double eer = 0.0;
  double predicted = 0.0;
  bool certified = false;
};

ScoreResult score_prediction(double actual, double predicted, const ScoreTable& table);

struct MetricReport {
  std::size_t n = 0;
  std::size_t p = 0;
  bool weighted = false;
  double r_squared = 0.0;
  double adj_r_squared = 0.0;
  double rmse = 0.0;
  double nrmse = 0.0;  // percent of max(y) - min(y)
  double mape = 0.0;   // percent
  std::size_t mape_excluded = 0;  // rows with y == 0
};

// R2, adjusted R2, RMSE, NRMSE and MAPE. With weights every sum becomes a
// normalized weighted sum, so rescaling the weights changes nothing.
MetricReport evaluate(std::span<const double> y, std::span<const double> yhat,
                      std::optional<std::span<const double>> w, std::size_t p);

std::string render_text(const MetricReport& report);

void to_json(nlohmann::json& j, const FitDiagnostics& d);
void from_json(const nlohmann::json& j, FitDiagnostics& d);
void to_json(nlohmann::json& j, const ScoreTable& table);
ScoreTable score_table_from_json(const nlohmann::json& j);
void to_json(nlohmann::json& j, const ScoreResult& r);
void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

}  // namespace ebench::scoring
