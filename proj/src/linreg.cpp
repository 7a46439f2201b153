#include "ebench/linreg.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "ebench/error.hpp"

namespace ebench::linreg {
namespace {

constexpr double kRankTolerance = 1e-10;

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

std::size_t LinearModel::retained_count() const {
  return static_cast<std::size_t>(
      std::count_if(coefficients.begin(), coefficients.end(), [](const TermFit& c) { return c.retained; }));
}

std::vector<std::string> LinearModel::dropped_terms() const {
  std::vector<std::string> out;
  for (const TermFit& c : coefficients) {
    if (!c.retained) out.push_back(c.name);
  }
  return out;
}

double adjusted_r_squared(double r2, std::size_t n, std::size_t p) {
  if (n <= p + 1) {
    throw Error(ErrorCode::kArgument, "adjusted R^2 needs n > p + 1", {{"n", n}, {"p", p}});
  }
  return 1.0 - (1.0 - r2) * static_cast<double>(n - 1) / static_cast<double>(n - p - 1);
}

double t_test_p_value(double t, double df) {
  if (std::isnan(t)) return 1.0;
  if (std::isinf(t)) return 0.0;
  const boost::math::students_t dist(df);
  return std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t))), 0.0, 1.0);
}

LinearModel fit_wls(const features::DesignMatrix& x, std::span<const double> y, std::optional<std::span<const double>> w) {
  const auto n = static_cast<Eigen::Index>(x.rows());
  const std::size_t q = x.cols();
  const std::size_t k = q + (x.intercept ? 1 : 0);
  if (static_cast<std::size_t>(y.size()) != x.rows()) throw Error(ErrorCode::kArgument, "target length does not match design rows");
  if (w && w->size() != y.size()) throw Error(ErrorCode::kArgument, "weight length does not match design rows");
  if (x.rows() <= k) {
    throw Error(ErrorCode::kUnderdetermined, "need more samples than coefficients",
                {{"n", x.rows()}, {"coefficients", k}});
  }
  if (!x.values.allFinite()) throw Error(ErrorCode::kData, "design matrix has a non-finite cell");

  Eigen::VectorXd yv(n);
  Eigen::VectorXd wv = Eigen::VectorXd::Ones(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    yv(i) = y[static_cast<std::size_t>(i)];
    if (w) wv(i) = (*w)[static_cast<std::size_t>(i)];
    if (!std::isfinite(yv(i))) throw Error(ErrorCode::kData, "target has a non-finite value", {{"row", i}});
    if (!(wv(i) > 0.0) || !std::isfinite(wv(i))) throw Error(ErrorCode::kData, "weights must be positive and finite", {{"row", i}});
  }
  const Eigen::VectorXd sw = wv.cwiseSqrt();

  // Full design with the intercept as column 0.
  Eigen::MatrixXd full(n, static_cast<Eigen::Index>(k));
  Eigen::Index offset = 0;
  if (x.intercept) {
    full.col(0).setOnes();
    offset = 1;
  }
  full.rightCols(static_cast<Eigen::Index>(q)) = x.values;

  // Equilibrate the weighted columns so the rank test is scale-free.
  Eigen::MatrixXd scaled = sw.asDiagonal() * full;
  Eigen::VectorXd norms(static_cast<Eigen::Index>(k));
  for (Eigen::Index j = 0; j < scaled.cols(); ++j) {
    norms(j) = scaled.col(j).norm();
    if (norms(j) > 0.0) scaled.col(j) /= norms(j);
  }

  // Greedy admission in design order via modified Gram-Schmidt.
  std::vector<Eigen::Index> retained;
  std::vector<double> residual_norm;
  Eigen::MatrixXd basis(n, 0);
  for (Eigen::Index j = 0; j < scaled.cols(); ++j) {
    if (norms(j) == 0.0) continue;
    Eigen::VectorXd v = scaled.col(j);
    for (int pass = 0; pass < 2; ++pass) {
      for (Eigen::Index b = 0; b < basis.cols(); ++b) v -= basis.col(b).dot(v) * basis.col(b);
    }
    const double r = v.norm();
    if (r <= kRankTolerance) continue;
    basis.conservativeResize(Eigen::NoChange, basis.cols() + 1);
    basis.col(basis.cols() - 1) = v / r;
    retained.push_back(j);
    residual_norm.push_back(r);
  }
  // Enforce the singular-value criterion on the admitted set.
  for (;;) {
    Eigen::MatrixXd a(n, static_cast<Eigen::Index>(retained.size()));
    for (std::size_t i = 0; i < retained.size(); ++i) a.col(static_cast<Eigen::Index>(i)) = scaled.col(retained[i]);
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0 || sv(sv.size() - 1) > kRankTolerance * sv(0)) break;
    const auto worst = static_cast<std::size_t>(
        std::min_element(residual_norm.begin(), residual_norm.end()) - residual_norm.begin());
    retained.erase(retained.begin() + static_cast<std::ptrdiff_t>(worst));
    residual_norm.erase(residual_norm.begin() + static_cast<std::ptrdiff_t>(worst));
  }

  const auto r = static_cast<Eigen::Index>(retained.size());
  Eigen::MatrixXd a(n, r);
  for (Eigen::Index i = 0; i < r; ++i) a.col(i) = scaled.col(retained[static_cast<std::size_t>(i)]);
  const Eigen::VectorXd b = sw.cwiseProduct(yv);
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  const Eigen::MatrixXd rmat = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();
  const Eigen::VectorXd qtb = (qr.householderQ().transpose() * b).head(r);
  const Eigen::VectorXd beta_scaled = rmat.triangularView<Eigen::Upper>().solve(qtb);
  const Eigen::MatrixXd rinv = rmat.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(r, r));
  const Eigen::MatrixXd xtx_inv = rinv * rinv.transpose();

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
  for (Eigen::Index i = 0; i < r; ++i) {
    const Eigen::Index j = retained[static_cast<std::size_t>(i)];
    beta(j) = beta_scaled(i) / norms(j);
  }

  const Eigen::VectorXd fitted = full * beta;
  const Eigen::VectorXd resid = yv - fitted;
  const double wsum = wv.sum();
  const double ybar = wv.dot(yv) / wsum;
  const double rss = (wv.array() * resid.array().square()).sum();
  const double tss = (wv.array() * (yv.array() - ybar).square()).sum();

  LinearModel model;
  model.terms = x.terms;
  model.intercept = x.intercept;
  model.n = x.rows();
  model.q = q;
  model.df = x.rows() - static_cast<std::size_t>(r);
  const std::size_t p = static_cast<std::size_t>(r) - (x.intercept && !retained.empty() && retained.front() == 0 ? 1 : 0);
  const double sigma2 = rss / static_cast<double>(model.df);
  model.residual_std_error = std::sqrt(sigma2);
  model.r_squared = tss > 0.0 ? 1.0 - rss / tss : (rss == 0.0 ? 1.0 : 0.0);
  model.adj_r_squared = adjusted_r_squared(model.r_squared, model.n, p);
  if (p > 0 && rss > 0.0) {
    model.f_statistic = ((tss - rss) / static_cast<double>(p)) / sigma2;
    const boost::math::fisher_f dist(static_cast<double>(p), static_cast<double>(model.df));
    model.f_p_value = model.f_statistic > 0.0 ? boost::math::cdf(boost::math::complement(dist, model.f_statistic)) : 1.0;
  } else if (p > 0) {
    model.f_statistic = std::numeric_limits<double>::infinity();
    model.f_p_value = 0.0;
  }

  model.coefficients.resize(k);
  if (x.intercept) model.coefficients[0].name = kInterceptName;
  for (std::size_t t = 0; t < q; ++t) model.coefficients[t + static_cast<std::size_t>(offset)].name = x.terms[t].name();
  for (auto& c : model.coefficients) c.retained = false;
  for (Eigen::Index i = 0; i < r; ++i) {
    const Eigen::Index j = retained[static_cast<std::size_t>(i)];
    TermFit& c = model.coefficients[static_cast<std::size_t>(j)];
    c.retained = true;
    c.estimate = beta(j);
    c.std_error = std::sqrt(std::max(0.0, sigma2 * xtx_inv(i, i))) / norms(j);
    if (c.std_error > 0.0) {
      c.t_value = c.estimate / c.std_error;
    } else {
      c.t_value = c.estimate == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), c.estimate);
    }
    c.p_value = t_test_p_value(c.t_value, static_cast<double>(model.df));
  }
  return model;
}

Eigen::VectorXd predict_linear(const LinearModel& model, const features::DesignMatrix& x) {
  const std::vector<std::string> names = x.term_names();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(x.values.rows());
  std::size_t offset = 0;
  if (model.intercept) {
    out.setConstant(model.coefficients.front().estimate);
    offset = 1;
  }
  for (std::size_t t = 0; t < model.terms.size(); ++t) {
    const TermFit& c = model.coefficients[t + offset];
    if (!c.retained) continue;
    const auto it = std::find(names.begin(), names.end(), c.name);
    if (it == names.end()) {
      throw Error(ErrorCode::kSchema, "design lacks model term '" + c.name + "'", {{"term", c.name}});
    }
    out += c.estimate * x.values.col(it - names.begin());
  }
  return out;
}

std::string star_code(double p) {
  if (p < 0.0001) return "****";
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  if (p < 0.1) return "+";
  return "";
}

SignificanceTable summarize_model(const LinearModel& model) {
  SignificanceTable table;
  table.adj_r_squared = model.adj_r_squared;
  table.f_statistic = model.f_statistic;
  table.n = model.n;
  for (const TermFit& c : model.coefficients) {
    table.rows.push_back({c.name, c.retained, c.estimate, c.std_error, c.p_value, c.retained ? star_code(c.p_value) : ""});
  }
  return table;
}

std::string render_text(const SignificanceTable& table) {
  std::size_t width = 8;
  for (const auto& row : table.rows) width = std::max(width, row.term.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width)) << "Term" << std::right << std::setw(16) << "Coefficient"
     << std::setw(14) << "Std.Error" << std::setw(12) << "p" << "  Sig\n";
  for (const auto& row : table.rows) {
    os << std::left << std::setw(static_cast<int>(width)) << row.term << std::right;
    if (!row.retained) {
      os << std::setw(16) << "(dropped)" << '\n';
      continue;
    }
    os << std::setw(16) << std::setprecision(6) << std::defaultfloat << row.coefficient << std::setw(14)
       << row.std_error << std::setw(12) << std::setprecision(3) << row.p_value << "  " << row.stars << '\n';
  }
  os << "Adjusted R^2: " << std::setprecision(4) << std::fixed << table.adj_r_squared << '\n';
  os << "F statistic:  " << std::setprecision(3) << table.f_statistic << '\n';
  os << "Observations: " << table.n << '\n';
  os << "Signif: + p<0.1; * p<0.05; ** p<0.01; *** p<0.001; **** p<0.0001\n";
  return os.str();
}

void to_json(nlohmann::json& j, const LinearModel& model) {
  nlohmann::json terms = nlohmann::json::array();
  for (const auto& t : model.terms) terms.push_back(t.constituents());
  nlohmann::json coefs = nlohmann::json::array();
  for (const auto& c : model.coefficients) {
    coefs.push_back({{"name", c.name},
                     {"retained", c.retained},
                     {"estimate", c.estimate},
                     {"std_error", c.std_error},
                     {"t_value", finite_or_null(c.t_value)},
                     {"p_value", c.p_value}});
  }
  j = {{"intercept", model.intercept},
       {"terms", terms},
       {"coefficients", coefs},
       {"n", model.n},
       {"q", model.q},
       {"df", model.df},
       {"r_squared", model.r_squared},
       {"adj_r_squared", model.adj_r_squared},
       {"residual_std_error", model.residual_std_error},
       {"f_statistic", finite_or_null(model.f_statistic)},
       {"f_p_value", model.f_p_value}};
}

void from_json(const nlohmann::json& j, LinearModel& model) {
  model = LinearModel{};
  model.intercept = j.at("intercept").get<bool>();
  for (const auto& t : j.at("terms")) model.terms.emplace_back(t.get<std::vector<std::string>>());
  for (const auto& c : j.at("coefficients")) {
    TermFit fit;
    fit.name = c.at("name").get<std::string>();
    fit.retained = c.at("retained").get<bool>();
    fit.estimate = c.at("estimate").get<double>();
    fit.std_error = c.at("std_error").get<double>();
    fit.t_value = c.at("t_value").is_null() ? std::copysign(std::numeric_limits<double>::infinity(), fit.estimate)
                                            : c.at("t_value").get<double>();
    fit.p_value = c.at("p_value").get<double>();
    model.coefficients.push_back(std::move(fit));
  }
  if (model.coefficients.size() != model.terms.size() + (model.intercept ? 1 : 0)) {
    throw Error(ErrorCode::kModelFormat, "coefficient count does not match term count");
  }
  model.n = j.at("n").get<std::size_t>();
  model.q = j.at("q").get<std::size_t>();
  model.df = j.at("df").get<std::size_t>();
  model.r_squared = j.at("r_squared").get<double>();
  model.adj_r_squared = j.at("adj_r_squared").get<double>();
  model.residual_std_error = j.at("residual_std_error").get<double>();
  model.f_statistic = j.at("f_statistic").is_null() ? std::numeric_limits<double>::infinity()
                                                    : j.at("f_statistic").get<double>();
  model.f_p_value = j.at("f_p_value").get<double>();
}

void to_json(nlohmann::json& j, const SignificanceTable& table) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : table.rows) {
    rows.push_back({{"term", r.term},
                    {"retained", r.retained},
                    {"coefficient", r.coefficient},
                    {"std_error", r.std_error},
                    {"p_value", r.p_value},
                    {"stars", r.stars}});
  }
  j = {{"rows", rows}, {"adj_r_squared", table.adj_r_squared}, {"f_statistic", finite_or_null(table.f_statistic)}, {"n", table.n}};
}

}  // namespace ebench::linreg
