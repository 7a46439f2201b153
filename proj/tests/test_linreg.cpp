#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "ebench/error.hpp"
#include "ebench/linreg.hpp"
#include "support.hpp"

using namespace ebench;
using namespace ebench::linreg;
using features::DesignMatrix;
using features::TermSpec;

namespace {

DesignMatrix design(const Eigen::MatrixXd& values) {
  DesignMatrix d;
  d.values = values;
  for (Eigen::Index j = 0; j < values.cols(); ++j) d.terms.emplace_back(std::vector<std::string>{"x" + std::to_string(j)});
  return d;
}

// Dense Gauss-Jordan with partial pivoting; returns the inverse of a.
std::vector<std::vector<double>> invert(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> inv(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) inv[i][i] = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    }
    std::swap(a[c], a[piv]);
    std::swap(inv[c], inv[piv]);
    const double d = a[c][c];
    for (std::size_t k = 0; k < n; ++k) {
      a[c][k] /= d;
      inv[c][k] /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a[r][c];
      for (std::size_t k = 0; k < n; ++k) {
        a[r][k] -= f * a[c][k];
        inv[r][k] -= f * inv[c][k];
      }
    }
  }
  return inv;
}

struct NormalFit {
  std::vector<double> beta;
  std::vector<double> se;
};

// Textbook normal equations with an intercept column.
NormalFit normal_equations(const Eigen::MatrixXd& x, const std::vector<double>& y, const std::vector<double>& w) {
  const std::size_t n = y.size();
  const std::size_t k = static_cast<std::size_t>(x.cols()) + 1;
  auto at = [&](std::size_t i, std::size_t j) { return j == 0 ? 1.0 : x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j - 1)); };
  std::vector<std::vector<double>> xtx(k, std::vector<double>(k, 0.0));
  std::vector<double> xty(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < k; ++a) {
      xty[a] += w[i] * at(i, a) * y[i];
      for (std::size_t b = 0; b < k; ++b) xtx[a][b] += w[i] * at(i, a) * at(i, b);
    }
  }
  const auto inv = invert(xtx);
  NormalFit f;
  f.beta.assign(k, 0.0);
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) f.beta[a] += inv[a][b] * xty[b];
  }
  double rss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double yhat = 0.0;
    for (std::size_t a = 0; a < k; ++a) yhat += at(i, a) * f.beta[a];
    rss += w[i] * (y[i] - yhat) * (y[i] - yhat);
  }
  const double sigma2 = rss / static_cast<double>(n - k);
  for (std::size_t a = 0; a < k; ++a) f.se.push_back(std::sqrt(sigma2 * inv[a][a]));
  return f;
}

// Regularized incomplete beta by Lentz's continued fraction.
double betacf(double a, double b, double x) {
  const double tiny = 1e-300;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m < 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((a - 1.0 + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + 1.0 + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-16) break;
  }
  return h;
}

double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(lbt) * betacf(a, b, x) / a;
  return 1.0 - std::exp(lbt) * betacf(b, a, 1.0 - x) / b;
}

double two_sided_p(double t, double df) { return incomplete_beta(df / 2.0, 0.5, df / (df + t * t)); }

std::vector<double> ones(std::size_t n) { return std::vector<double>(n, 1.0); }

}  // namespace

TEST(FitWls, MatchesNormalEquationsOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::MatrixXd x = testkit::uniform_matrix(rng, 40, 5, -2.0, 2.0);
    std::vector<double> y(40);
    std::vector<double> w(40);
    for (int i = 0; i < 40; ++i) {
      y[i] = 1.0 + x(i, 0) - 2.0 * x(i, 3) + 0.7 * rng.normal();
      w[i] = 0.2 + 2.0 * rng.uniform();
    }
    const LinearModel m = fit_wls(design(x), y, std::span<const double>(w));
    const NormalFit oracle = normal_equations(x, y, w);
    ASSERT_EQ(m.coefficients.size(), 6u);
    for (std::size_t a = 0; a < 6; ++a) {
      EXPECT_NEAR(m.coefficients[a].estimate, oracle.beta[a], 1e-8);
      EXPECT_NEAR(m.coefficients[a].std_error, oracle.se[a], 1e-8);
    }
    EXPECT_EQ(m.df, 34u);
  }
}

TEST(FitWls, ExactLine) {
  Eigen::MatrixXd x(3, 1);
  x << 1, 2, 3;
  const std::vector<double> y{2, 4, 6};
  const LinearModel m = fit_wls(design(x), y);
  EXPECT_NEAR(m.coefficients[0].estimate, 0.0, 1e-12);
  EXPECT_NEAR(m.coefficients[1].estimate, 2.0, 1e-12);
  EXPECT_NEAR(m.adj_r_squared, 1.0, 1e-12);
  EXPECT_EQ(m.coefficients[0].name, kInterceptName);
}

TEST(FitWls, NegligibleWeightMatchesDroppingTheRow) {
  Rng rng(12);
  const Eigen::MatrixXd x = testkit::uniform_matrix(rng, 30, 2);
  std::vector<double> y(30);
  for (int i = 0; i < 30; ++i) y[i] = 3.0 + x(i, 0) + x(i, 1) + 0.1 * rng.normal();
  y[7] = 1000.0;
  std::vector<double> w = ones(30);
  w[7] = 1e-12;
  const LinearModel with = fit_wls(design(x), y, std::span<const double>(w));

  Eigen::MatrixXd x2(29, 2);
  std::vector<double> y2;
  for (int i = 0, r = 0; i < 30; ++i) {
    if (i == 7) continue;
    x2.row(r++) = x.row(i);
    y2.push_back(y[i]);
  }
  const LinearModel without = fit_wls(design(x2), y2);
  for (std::size_t a = 0; a < 3; ++a) {
    EXPECT_NEAR(with.coefficients[a].estimate, without.coefficients[a].estimate, 1e-6);
  }
}

TEST(FitWls, WeightScaleInvariance) {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd x = testkit::uniform_matrix(rng, 25, 3);
    std::vector<double> y(25);
    std::vector<double> w(25);
    for (int i = 0; i < 25; ++i) {
      y[i] = x(i, 0) - x(i, 2) + rng.normal();
      w[i] = 0.5 + rng.uniform();
    }
    const double c = std::exp(8.0 * rng.uniform() - 4.0);
    std::vector<double> wc(w);
    for (double& v : wc) v *= c;
    const LinearModel a = fit_wls(design(x), y, std::span<const double>(w));
    const LinearModel b = fit_wls(design(x), y, std::span<const double>(wc));
    EXPECT_NEAR(a.r_squared, b.r_squared, 1e-10);
    EXPECT_NEAR(a.adj_r_squared, b.adj_r_squared, 1e-10);
    for (std::size_t k = 0; k < a.coefficients.size(); ++k) {
      EXPECT_NEAR(a.coefficients[k].estimate, b.coefficients[k].estimate, 1e-9);
      EXPECT_NEAR(a.coefficients[k].t_value, b.coefficients[k].t_value, 1e-8);
      EXPECT_NEAR(a.coefficients[k].p_value, b.coefficients[k].p_value, 1e-10);
    }
  }
}

TEST(FitWls, WeightedResidualsOrthogonalToColumns) {
  Rng rng(14);
  const Eigen::MatrixXd x = testkit::uniform_matrix(rng, 50, 4, -1.0, 1.0);
  std::vector<double> y(50);
  std::vector<double> w(50);
  for (int i = 0; i < 50; ++i) {
    y[i] = std::exp(x(i, 0)) + x(i, 1) * x(i, 2) + 0.3 * rng.normal();
    w[i] = 0.1 + rng.uniform();
  }
  const DesignMatrix d = design(x);
  const LinearModel m = fit_wls(d, y, std::span<const double>(w));
  const Eigen::VectorXd yhat = predict_linear(m, d);
  double s0 = 0.0;
  for (int i = 0; i < 50; ++i) s0 += w[i] * (y[i] - yhat(i));
  EXPECT_NEAR(s0, 0.0, 1e-10);
  for (int j = 0; j < 4; ++j) {
    double s = 0.0;
    for (int i = 0; i < 50; ++i) s += w[i] * (y[i] - yhat(i)) * x(i, j);
    EXPECT_NEAR(s, 0.0, 1e-10);
  }
}

TEST(FitWls, AddingAColumnNeverLowersRSquared) {
  Rng rng(15);
  for (int trial = 0; trial < 30; ++trial) {
    const Eigen::MatrixXd x = testkit::uniform_matrix(rng, 30, 6);
    std::vector<double> y(30);
    std::vector<double> w(30);
    for (int i = 0; i < 30; ++i) {
      y[i] = rng.normal() + x(i, 0);
      w[i] = 0.5 + rng.uniform();
    }
    double prev = -1.0;
    for (Eigen::Index c = 1; c <= 6; ++c) {
      const LinearModel m = fit_wls(design(x.leftCols(c)), y, std::span<const double>(w));
      EXPECT_GE(m.r_squared, prev - 1e-12);
      prev = m.r_squared;
    }
  }
}

TEST(AdjustedRSquared, HandValue) {
  EXPECT_NEAR(adjusted_r_squared(0.9, 10, 2), 0.87142857142857144, 1e-10);
  EXPECT_NEAR(adjusted_r_squared(0.9, 10, 2), 1.0 - 0.1 * 9.0 / 7.0, 1e-15);
}

TEST(AdjustedRSquared, UndefinedWhenTooFewRows) {
  try {
    adjusted_r_squared(0.5, 3, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kArgument);
  }
}

TEST(Significance, StrongSignalGetsFourStars) {
  Rng rng(16);
  Eigen::MatrixXd x(200, 1);
  std::vector<double> y(200);
  for (int i = 0; i < 200; ++i) {
    x(i, 0) = rng.uniform();
    y[i] = 3.0 * x(i, 0) + 0.01 * rng.normal();
  }
  const LinearModel m = fit_wls(design(x), y);
  const TermFit& a = m.coefficients[1];
  EXPECT_NEAR(a.estimate, 3.0, 0.01);
  EXPECT_EQ(star_code(a.p_value), "****");
  EXPECT_NEAR(a.p_value, two_sided_p(a.t_value, static_cast<double>(m.df)), 1e-12);
  const SignificanceTable table = summarize_model(m);
  EXPECT_EQ(table.rows[1].stars, "****");
}

TEST(Significance, PValuesMatchIncompleteBetaOracle) {
  for (double df : {1.0, 3.0, 10.0, 57.0, 400.0}) {
    for (double t : {0.0, 0.3, 1.0, 1.96, 2.5, 4.0, -3.2}) {
      EXPECT_NEAR(t_test_p_value(t, df), two_sided_p(t, df), 1e-12) << t << " " << df;
    }
  }
}

TEST(Significance, StarThresholds) {
  EXPECT_EQ(star_code(0.2), "");
  EXPECT_EQ(star_code(0.1), "");
  EXPECT_EQ(star_code(0.09), "+");
  EXPECT_EQ(star_code(0.049), "*");
  EXPECT_EQ(star_code(0.0099), "**");
  EXPECT_EQ(star_code(0.00099), "***");
  EXPECT_EQ(star_code(0.000099), "****");
}

TEST(Significance, NoisePredictorRarelyStarred) {
  int unstarred = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(1000 + seed);
    Eigen::MatrixXd x(60, 1);
    std::vector<double> y(60);
    for (int i = 0; i < 60; ++i) {
      x(i, 0) = rng.normal();
      y[i] = 5.0 + rng.normal();
    }
    const LinearModel m = fit_wls(design(x), y);
    if (star_code(m.coefficients[1].p_value).empty()) ++unstarred;
  }
  EXPECT_GE(unstarred, 85);
}

TEST(FitWls, CollinearColumnIsDroppedAndReported) {
  Rng rng(17);
  Eigen::MatrixXd x = testkit::uniform_matrix(rng, 20, 3);
  x.col(2) = 2.0 * x.col(0) - x.col(1);
  std::vector<double> y(20);
  for (int i = 0; i < 20; ++i) y[i] = x(i, 0) + rng.normal();
  const LinearModel m = fit_wls(design(x), y);
  EXPECT_EQ(m.dropped_terms(), std::vector<std::string>{"x2"});
  EXPECT_FALSE(m.coefficients[3].retained);
  EXPECT_EQ(m.retained_count(), 3u);
  EXPECT_EQ(m.df, 17u);
  const NormalFit oracle = normal_equations(x.leftCols(2), y, ones(20));
  for (std::size_t a = 0; a < 3; ++a) EXPECT_NEAR(m.coefficients[a].estimate, oracle.beta[a], 1e-9);
}

TEST(FitWls, UnderdeterminedIsAnError) {
  Rng rng(18);
  const Eigen::MatrixXd x = testkit::uniform_matrix(rng, 4, 3);
  const std::vector<double> y{1, 2, 3, 4};
  try {
    fit_wls(design(x), y);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnderdetermined);
  }
}

TEST(LinearModel, JsonRoundTrip) {
  Rng rng(19);
  const Eigen::MatrixXd x = testkit::uniform_matrix(rng, 30, 2);
  std::vector<double> y(30);
  for (int i = 0; i < 30; ++i) y[i] = x(i, 0) * 2 + rng.normal();
  DesignMatrix d = features::expand_interactions(design(x), 2);
  const LinearModel m = fit_wls(d, y);
  const LinearModel back = nlohmann::json(m).get<LinearModel>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(m));
  EXPECT_EQ((predict_linear(back, d) - predict_linear(m, d)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(SignificanceTable, TextListsEveryTerm) {
  Rng rng(20);
  const Eigen::MatrixXd x = testkit::uniform_matrix(rng, 30, 2);
  std::vector<double> y(30);
  for (int i = 0; i < 30; ++i) y[i] = x(i, 0) * 2 + rng.normal();
  const std::string text = render_text(summarize_model(fit_wls(design(x), y)));
  EXPECT_NE(text.find("(Intercept)"), std::string::npos);
  EXPECT_NE(text.find("x0"), std::string::npos);
  EXPECT_NE(text.find("x1"), std::string::npos);
}
