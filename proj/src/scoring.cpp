#include "ebench/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <vector>

#include <boost/math/distributions/gamma.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include "ebench/error.hpp"
#include "ebench/linreg.hpp"

namespace ebench::scoring {
namespace {

constexpr int kMaxIterations = 200;

struct CdfPoint {
  double eer;
  double target;  // plotting position
};

double rss_at(const std::vector<CdfPoint>& pts, double log_shape, double log_scale) {
  const double a = std::exp(log_shape);
  const double s = std::exp(log_scale);
  double rss = 0.0;
  for (const auto& p : pts) {
    const double r = gamma_cdf(p.eer, a, s) - p.target;
    rss += r * r;
  }
  return rss;
}

}  // namespace

double compute_eer(double actual, double predicted) {
  if (!(predicted > 0.0) || !std::isfinite(predicted)) {
    throw Error(ErrorCode::kDomain, "predicted EUI must be positive to form an EER", {{"predicted", predicted}});
  }
  if (!(actual > 0.0) || !std::isfinite(actual)) {
    throw Error(ErrorCode::kDomain, "actual EUI must be positive", {{"actual", actual}});
  }
  return actual / predicted;
}

double gamma_cdf(double x, double shape, double scale) {
  if (!(x > 0.0)) return 0.0;
  if (std::isinf(x)) return 1.0;
  return boost::math::gamma_p(shape, x / scale);
}

long round_half_away(double value) { return std::lround(value); }

ScoreTable::ScoreTable(double shape, double scale, FitDiagnostics diagnostics)
    : shape_(shape), scale_(scale), diagnostics_(diagnostics) {
  if (!(shape > 0.0) || !(scale > 0.0) || !std::isfinite(shape) || !std::isfinite(scale)) {
    throw Error(ErrorCode::kCalibration, "gamma shape and scale must be positive and finite",
                {{"shape", shape}, {"scale", scale}});
  }
}

int ScoreTable::score(double eer) const {
  const long raw = round_half_away(100.0 * (1.0 - cdf(eer)));
  return static_cast<int>(std::clamp(raw, 1L, 100L));
}

double ScoreTable::median() const {
  return boost::math::quantile(boost::math::gamma_distribution<double>(shape_, scale_), 0.5);
}

ScoreTable fit_score_table(std::span<const double> eers, std::optional<std::span<const double>> w) {
  const std::size_t n = eers.size();
  if (n < kMinCalibrationSamples) {
    throw Error(ErrorCode::kData, "calibration needs at least 30 EER samples",
                {{"samples", n}, {"minimum", kMinCalibrationSamples}});
  }
  if (w && w->size() != n) throw Error(ErrorCode::kArgument, "weight length does not match EER count");
  for (std::size_t i = 0; i < n; ++i) {
    if (!(eers[i] > 0.0) || !std::isfinite(eers[i])) {
      throw Error(ErrorCode::kData, "EER values must be positive and finite", {{"index", i}, {"value", eers[i]}});
    }
    if (w && (!((*w)[i] > 0.0) || !std::isfinite((*w)[i]))) {
      throw Error(ErrorCode::kData, "weights must be positive and finite", {{"index", i}});
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return eers[a] < eers[b]; });
  auto weight = [&](std::size_t i) { return w ? (*w)[i] : 1.0; };

  double total = 0.0;
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += weight(i);
    mean += weight(i) * eers[i];
  }
  mean /= total;
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) var += weight(i) * (eers[i] - mean) * (eers[i] - mean);
  var /= total;
  if (!(var > 0.0)) throw Error(ErrorCode::kCalibration, "EER values have zero spread", {{"mean", mean}});

  // Hazen positions (C_i - w_i / 2) / W; (i - 0.5) / n for unit weights.
  std::vector<CdfPoint> pts;
  pts.reserve(n);
  double cumulative = 0.0;
  for (std::size_t i : order) {
    cumulative += weight(i);
    pts.push_back({eers[i], (cumulative - weight(i) / 2.0) / total});
  }

  FitDiagnostics diag;
  diag.samples = n;
  diag.initial_shape = mean * mean / var;
  diag.initial_scale = var / mean;

  double u0 = std::log(diag.initial_shape);
  double u1 = std::log(diag.initial_scale);
  double rss = rss_at(pts, u0, u1);
  double lambda = 1e-3;
  constexpr double h = 1e-6;
  int it = 0;
  for (; it < kMaxIterations && !diag.converged; ++it) {
    const double a = std::exp(u0);
    const double s = std::exp(u1);
    // d/dlog(shape) by central differences; d/dlog(scale) = -z g(z; a).
    double j00 = 0.0, j01 = 0.0, j11 = 0.0, g0 = 0.0, g1 = 0.0;
    const double ap = std::exp(u0 + h);
    const double am = std::exp(u0 - h);
    for (const auto& p : pts) {
      const double z = p.eer / s;
      const double r = boost::math::gamma_p(a, z) - p.target;
      const double d0 = (boost::math::gamma_p(ap, z) - boost::math::gamma_p(am, z)) / (2.0 * h);
      const double d1 = -z * boost::math::gamma_p_derivative(a, z);
      j00 += d0 * d0;
      j01 += d0 * d1;
      j11 += d1 * d1;
      g0 += d0 * r;
      g1 += d1 * r;
    }
    if (std::max(std::fabs(g0), std::fabs(g1)) <= 1e-14 * std::max(1.0, rss)) {
      diag.converged = true;
      break;
    }
    bool accepted = false;
    while (!accepted) {
      const double m00 = j00 * (1.0 + lambda);
      const double m11 = j11 * (1.0 + lambda);
      const double det = m00 * m11 - j01 * j01;
      if (!(std::fabs(det) > 0.0) || !std::isfinite(det)) {
        lambda *= 10.0;
      } else {
        const double s0 = (-g0 * m11 + g1 * j01) / det;
        const double s1 = (-g1 * m00 + g0 * j01) / det;
        const double candidate = rss_at(pts, u0 + s0, u1 + s1);
        if (std::isfinite(candidate) && candidate <= rss) {
          const double gain = rss - candidate;
          u0 += s0;
          u1 += s1;
          rss = candidate;
          lambda = std::max(lambda / 3.0, 1e-12);
          accepted = true;
          if (gain <= 1e-15 * std::max(rss, 1e-300) || std::hypot(s0, s1) <= 1e-12) diag.converged = true;
        } else {
          lambda *= 4.0;
        }
      }
      // No descent direction left at machine precision: a stationary point.
      if (!accepted && lambda > 1e16) {
        diag.converged = true;
        break;
      }
    }
  }

  diag.iterations = it;
  diag.rss = rss;
  diag.rmse = std::sqrt(rss / static_cast<double>(n));
  const double shape = std::exp(u0);
  const double scale = std::exp(u1);
  for (const auto& p : pts) {
    diag.max_abs_residual = std::max(diag.max_abs_residual, std::fabs(gamma_cdf(p.eer, shape, scale) - p.target));
  }
  if (!diag.converged || !std::isfinite(shape) || !std::isfinite(scale)) {
    nlohmann::json details = diag;
    details["shape"] = shape;
    details["scale"] = scale;
    throw Error(ErrorCode::kCalibration, "gamma CDF fit did not converge", details);
  }
  return ScoreTable(shape, scale, diag);
}

ScoreResult score_prediction(double actual, double predicted, const ScoreTable& table) {
  ScoreResult r;
  r.predicted = predicted;
  r.eer = compute_eer(actual, predicted);
  r.score = table.score(r.eer);
  r.certified = r.score >= kCertificationThreshold;
  return r;
}

MetricReport evaluate(std::span<const double> y, std::span<const double> yhat, std::optional<std::span<const double>> w,
                      std::size_t p) {
  const std::size_t n = y.size();
  if (yhat.size() != n) throw Error(ErrorCode::kArgument, "prediction length does not match targets");
  if (w && w->size() != n) throw Error(ErrorCode::kArgument, "weight length does not match targets");
  if (n == 0) throw Error(ErrorCode::kData, "cannot evaluate an empty sample");
  auto weight = [&](std::size_t i) { return w ? (*w)[i] : 1.0; };

  double total = 0.0;
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(weight(i) > 0.0)) throw Error(ErrorCode::kData, "weights must be positive", {{"index", i}});
    total += weight(i);
    mean += weight(i) * y[i];
  }
  mean /= total;

  const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) throw Error(ErrorCode::kData, "NRMSE is undefined for a constant target", {{"value", *lo}});

  double sse = 0.0;
  double sst = 0.0;
  double ape = 0.0;
  double ape_weight = 0.0;
  MetricReport r;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = y[i] - yhat[i];
    sse += weight(i) * e * e;
    sst += weight(i) * (y[i] - mean) * (y[i] - mean);
    if (y[i] == 0.0) {
      ++r.mape_excluded;
      continue;
    }
    ape += weight(i) * std::fabs(e / y[i]);
    ape_weight += weight(i);
  }
  r.n = n;
  r.p = p;
  r.weighted = w.has_value();
  r.r_squared = 1.0 - sse / sst;
  r.adj_r_squared = linreg::adjusted_r_squared(r.r_squared, n, p);
  r.rmse = std::sqrt(sse / total);
  r.nrmse = 100.0 * r.rmse / range;
  r.mape = ape_weight > 0.0 ? 100.0 * ape / ape_weight : 0.0;
  return r;
}

std::string render_text(const MetricReport& r) {
  std::ostringstream os;
  os << std::fixed;
  os << "Metric          Value\n";
  os << "R^2           " << std::setw(9) << std::setprecision(4) << r.r_squared << '\n';
  os << "Adjusted R^2  " << std::setw(9) << r.adj_r_squared << '\n';
  os << "RMSE          " << std::setw(9) << std::setprecision(3) << r.rmse << '\n';
  os << "NRMSE (%)     " << std::setw(9) << std::setprecision(2) << r.nrmse << '\n';
  os << "MAPE (%)      " << std::setw(9) << r.mape << '\n';
  os << "n = " << r.n << ", p = " << r.p << (r.weighted ? ", weighted" : "");
  if (r.mape_excluded > 0) os << ", " << r.mape_excluded << " zero-target rows left out of MAPE";
  os << '\n';
  return os.str();
}

void to_json(nlohmann::json& j, const FitDiagnostics& d) {
  j = {{"samples", d.samples},
       {"iterations", d.iterations},
       {"converged", d.converged},
       {"rss", d.rss},
       {"rmse", d.rmse},
       {"max_abs_residual", d.max_abs_residual},
       {"initial_shape", d.initial_shape},
       {"initial_scale", d.initial_scale}};
}

void from_json(const nlohmann::json& j, FitDiagnostics& d) {
  d.samples = j.value("samples", std::size_t{0});
  d.iterations = j.value("iterations", 0);
  d.converged = j.value("converged", false);
  d.rss = j.value("rss", 0.0);
  d.rmse = j.value("rmse", 0.0);
  d.max_abs_residual = j.value("max_abs_residual", 0.0);
  d.initial_shape = j.value("initial_shape", 0.0);
  d.initial_scale = j.value("initial_scale", 0.0);
}

void to_json(nlohmann::json& j, const ScoreTable& table) {
  j = {{"version", ScoreTable::kVersion},
       {"shape", table.shape()},
       {"scale", table.scale()},
       {"diagnostics", table.diagnostics()}};
}

ScoreTable score_table_from_json(const nlohmann::json& j) {
  if (j.value("version", 0) != ScoreTable::kVersion) {
    throw Error(ErrorCode::kModelFormat, "unsupported score table version");
  }
  FitDiagnostics d;
  if (j.contains("diagnostics")) d = j.at("diagnostics").get<FitDiagnostics>();
  return ScoreTable(j.at("shape").get<double>(), j.at("scale").get<double>(), d);
}

void to_json(nlohmann::json& j, const ScoreResult& r) {
  j = {{"score", r.score}, {"eer", r.eer}, {"predicted", r.predicted}, {"certified", r.certified}};
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = {{"n", r.n},
       {"p", r.p},
       {"weighted", r.weighted},
       {"r_squared", r.r_squared},
       {"adj_r_squared", r.adj_r_squared},
       {"rmse", r.rmse},
       {"nrmse", r.nrmse},
       {"mape", r.mape},
       {"mape_excluded", r.mape_excluded}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  r.n = j.at("n").get<std::size_t>();
  r.p = j.at("p").get<std::size_t>();
  r.weighted = j.value("weighted", false);
  r.r_squared = j.at("r_squared").get<double>();
  r.adj_r_squared = j.at("adj_r_squared").get<double>();
  r.rmse = j.at("rmse").get<double>();
  r.nrmse = j.at("nrmse").get<double>();
  r.mape = j.at("mape").get<double>();
  r.mape_excluded = j.value("mape_excluded", std::size_t{0});
}

}  // namespace ebench::scoring
