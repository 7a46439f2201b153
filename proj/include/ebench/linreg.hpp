#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ebench/features.hpp"
#include "json.hpp"

namespace ebench::linreg {

inline constexpr const char* kInterceptName = "(Intercept)";

struct TermFit {
  std::string name;
  bool retained = true;  // false when dropped as collinear
  double estimate = 0.0;
  double std_error = 0.0;
  double t_value = 0.0;
  double p_value = 1.0;
};

// Weighted least-squares fit with classical inference. Immutable once built.
struct LinearModel {
  std::vector<features::TermSpec> terms;  // design terms, intercept excluded
  bool intercept = true;
  // Intercept first (when present), then one entry per term in `terms`.
  std::vector<TermFit> coefficients;
  std::size_t n = 0;
  std::size_t q = 0;   // design terms, intercept excluded
  std::size_t df = 0;  // n - retained coefficients
  double r_squared = 0.0;
  double adj_r_squared = 0.0;
  double residual_std_error = 0.0;
  double f_statistic = 0.0;
  double f_p_value = 1.0;

  std::size_t retained_count() const;
  std::vector<std::string> dropped_terms() const;
};

// Minimizes sum w_i (y_i - yhat_i)^2 by Householder QR on the sqrt(w)-scaled,
// column-equilibrated design. Columns are admitted in design order (the
// intercept first); one that adds no rank (singular value below 1e-10 of
// the largest) is dropped and reported.
LinearModel fit_wls(const features::DesignMatrix& x, std::span<const double> y,
                    std::optional<std::span<const double>> w = std::nullopt);

// x must carry every retained term of the model (matched by name).
Eigen::VectorXd predict_linear(const LinearModel& model, const features::DesignMatrix& x);

// 1 - (1 - r2) (n - 1) / (n - p - 1). Throws when n <= p + 1.
double adjusted_r_squared(double r2, std::size_t n, std::size_t p);

// "+", "*", "**", "***", "****" at p < 0.1, 0.05, 0.01, 0.001, 0.0001.
std::string star_code(double p_value);

// Two-sided p-value of a t statistic.
double t_test_p_value(double t, double df);

struct SignificanceRow {
  std::string term;
  bool retained = true;
  double coefficient = 0.0;
  double std_error = 0.0;
  double p_value = 1.0;
  std::string stars;
};

struct SignificanceTable {
  std::vector<SignificanceRow> rows;
  double adj_r_squared = 0.0;
  double f_statistic = 0.0;
  std::size_t n = 0;
};

SignificanceTable summarize_model(const LinearModel& model);
std::string render_text(const SignificanceTable& table);

void to_json(nlohmann::json& j, const LinearModel& model);
void from_json(const nlohmann::json& j, LinearModel& model);
void to_json(nlohmann::json& j, const SignificanceTable& table);

}  // namespace ebench::linreg
