#include "ebench/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "ebench/cv.hpp"
#include "ebench/error.hpp"
#include "ebench/features.hpp"

namespace ebench::model {
namespace {

// Terms of a linear model as feature index lists, for fast evaluation on a
// raw feature vector.
struct CompiledLinear {
  double intercept = 0.0;
  std::vector<std::vector<std::size_t>> terms;
  std::vector<double> beta;

  CompiledLinear(const linreg::LinearModel& m, const std::vector<std::string>& names) {
    std::size_t c = 0;
    if (m.intercept) {
      if (m.coefficients[0].retained) intercept = m.coefficients[0].estimate;
      c = 1;
    }
    for (std::size_t t = 0; t < m.terms.size(); ++t, ++c) {
      if (!m.coefficients[c].retained) continue;
      std::vector<std::size_t> idx;
      for (const std::string& f : m.terms[t].constituents()) {
        const auto it = std::find(names.begin(), names.end(), f);
        if (it == names.end()) throw Error(ErrorCode::kModelFormat, "term uses unknown feature '" + f + "'");
        idx.push_back(static_cast<std::size_t>(it - names.begin()));
      }
      terms.push_back(std::move(idx));
      beta.push_back(m.coefficients[c].estimate);
    }
  }

  double operator()(std::span<const double> x) const {
    double y = intercept;
    for (std::size_t t = 0; t < terms.size(); ++t) {
      double v = beta[t];
      for (std::size_t i : terms[t]) v *= x[i];
      y += v;
    }
    return y;
  }
};

void check_width(const BenchmarkModel& m, std::size_t width) {
  if (width != m.features.size()) {
    throw Error(ErrorCode::kSchema, "feature count does not match the model",
                {{"expected", m.features.size()}, {"got", width}});
  }
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, const std::vector<std::size_t>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

std::vector<double> take(std::span<const double> v, const std::vector<std::size_t>& rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(v[r]);
  return out;
}

features::DesignMatrix linear_design(const Eigen::MatrixXd& x, const std::vector<std::string>& names, int order) {
  features::DesignMatrix base;
  base.values = x;
  for (const auto& n : names) base.terms.emplace_back(std::vector<std::string>{n});
  return order > 1 ? features::expand_interactions(base, order) : base;
}

std::optional<std::span<const double>> span_of(const std::optional<std::vector<double>>& v) {
  if (!v) return std::nullopt;
  return std::span<const double>(*v);
}

}  // namespace

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kMlr: return "mlr";
    case ModelKind::kMlri2: return "mlri2";
    case ModelKind::kMlri3: return "mlri3";
    case ModelKind::kMlri4: return "mlri4";
    case ModelKind::kGbt: return "gbt";
  }
  return "mlr";
}

ModelKind parse_model_kind(std::string_view text) {
  for (ModelKind k : {ModelKind::kMlr, ModelKind::kMlri2, ModelKind::kMlri3, ModelKind::kMlri4, ModelKind::kGbt}) {
    if (text == to_string(k)) return k;
  }
  throw Error(ErrorCode::kSchema, "unknown model kind '" + std::string(text) + "'",
              {{"kind", std::string(text)}, {"allowed", {"mlr", "mlri2", "mlri3", "mlri4", "gbt"}}});
}

int interaction_order(ModelKind kind) {
  switch (kind) {
    case ModelKind::kMlr: return 1;
    case ModelKind::kMlri2: return 2;
    case ModelKind::kMlri3: return 3;
    case ModelKind::kMlri4: return 4;
    case ModelKind::kGbt: return 0;
  }
  return 1;
}

std::vector<std::string> BenchmarkModel::feature_names() const {
  std::vector<std::string> out;
  for (const auto& f : features) out.push_back(f.name);
  return out;
}

double BenchmarkModel::predict(std::span<const double> x) const {
  check_width(*this, x.size());
  if (gbt) return gbt::predict_gbt(*gbt, x);
  if (!linear) throw Error(ErrorCode::kModelFormat, "model holds neither a linear nor a tree ensemble");
  return CompiledLinear(*linear, feature_names())(x);
}

Eigen::VectorXd BenchmarkModel::predict(const Eigen::MatrixXd& x) const {
  check_width(*this, static_cast<std::size_t>(x.cols()));
  if (gbt) return gbt::predict_gbt(*gbt, x);
  if (!linear) throw Error(ErrorCode::kModelFormat, "model holds neither a linear nor a tree ensemble");
  const CompiledLinear f(*linear, feature_names());
  Eigen::VectorXd out(x.rows());
  std::vector<double> row(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) row[static_cast<std::size_t>(j)] = x(i, j);
    out(i) = f(row);
  }
  return out;
}

explain::Explanation explain_record(const BenchmarkModel& model, std::span<const double> x) {
  check_width(model, x.size());
  if (model.gbt) return explain::shap_tree(*model.gbt, x);
  if (!model.linear) throw Error(ErrorCode::kModelFormat, "model holds neither a linear nor a tree ensemble");
  const CompiledLinear f(*model.linear, model.feature_names());
  const std::vector<double> xs(x.begin(), x.end());
  const std::vector<double>& mean = model.feature_means;
  auto evaluator = [&](std::uint64_t s) {
    std::vector<double> v = mean;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if ((s >> i) & 1u) v[i] = xs[i];
    }
    return f(v);
  };
  explain::Explanation e = explain::shap_exact(evaluator, xs.size());
  e.feature_names = model.feature_names();
  e.feature_values = xs;
  return e;
}

explain::InteractionExplanation explain_interactions(const BenchmarkModel& model, std::span<const double> x) {
  if (!model.gbt) {
    throw Error(ErrorCode::kInteractionsUnsupported, "interaction values are available for tree ensembles only",
                {{"kind", std::string(to_string(model.kind))}});
  }
  return explain::shap_interactions(*model.gbt, x);
}

ParsedRecord parse_record(const BenchmarkModel& model, const nlohmann::json& record) {
  if (!record.is_object()) throw Error(ErrorCode::kSchema, "record must be a JSON object");
  ParsedRecord out;
  nlohmann::json missing = nlohmann::json::array();
  nlohmann::json invalid = nlohmann::json::array();
  for (const auto& f : model.features) {
    const auto it = record.find(f.name);
    if (it == record.end() || it->is_null()) {
      missing.push_back(f.name);
      out.x.push_back(0.0);
      continue;
    }
    if (f.kind == data::ColumnKind::kBoolean && it->is_boolean()) {
      out.x.push_back(it->get<bool>() ? 1.0 : 0.0);
    } else if (it->is_number() && (f.kind == data::ColumnKind::kNumeric ||
                                   it->get<double>() == 0.0 || it->get<double>() == 1.0)) {
      out.x.push_back(it->get<double>());
    } else {
      invalid.push_back({{"field", f.name}, {"expected", std::string(data::to_string(f.kind))}});
      out.x.push_back(0.0);
    }
  }
  if (!missing.empty() || !invalid.empty()) {
    std::string msg = "record does not match the model schema";
    if (!missing.empty()) msg += "; missing: " + missing.dump();
    if (!invalid.empty()) msg += "; invalid: " + invalid.dump();
    throw Error(ErrorCode::kRecordMismatch, msg, {{"missing", missing}, {"invalid", invalid}});
  }
  if (const auto t = record.find(model.target); t != record.end() && !t->is_null()) {
    if (!t->is_number()) {
      throw Error(ErrorCode::kRecordMismatch, "target '" + model.target + "' must be a number",
                  {{"missing", nlohmann::json::array()}, {"invalid", {{{"field", model.target}, {"expected", "numeric"}}}}});
    }
    out.actual = t->get<double>();
  }
  return out;
}

nlohmann::json apply_overrides(const BenchmarkModel& model, const nlohmann::json& record, const nlohmann::json& overrides) {
  if (!record.is_object()) throw Error(ErrorCode::kSchema, "record must be a JSON object");
  if (overrides.is_null()) return record;
  if (!overrides.is_object()) throw Error(ErrorCode::kSchema, "overrides must be a JSON object");
  nlohmann::json out = record;
  nlohmann::json problems = nlohmann::json::array();
  for (const auto& [name, value] : overrides.items()) {
    std::optional<data::ColumnKind> kind;
    if (name == model.target) kind = data::ColumnKind::kNumeric;
    for (const auto& f : model.features) {
      if (f.name == name) kind = f.kind;
    }
    if (!kind) {
      problems.push_back({{"field", name}, {"reason", "unknown feature"}});
      continue;
    }
    const bool ok = *kind == data::ColumnKind::kBoolean
                        ? (value.is_boolean() || (value.is_number() && (value.get<double>() == 0.0 || value.get<double>() == 1.0)))
                        : value.is_number();
    if (!ok) {
      problems.push_back({{"field", name}, {"reason", "expected " + std::string(data::to_string(*kind))}});
      continue;
    }
    if (name == model.target && !(value.get<double>() > 0.0)) {
      problems.push_back({{"field", name}, {"reason", "must be positive"}});
      continue;
    }
    out[name] = value;
  }
  if (!problems.empty()) {
    throw Error(ErrorCode::kInvalidOverride, "invalid override: " + problems.dump(), {{"fields", problems}});
  }
  return out;
}

scoring::ScoreResult score_record(const ModelBundle& bundle, const nlohmann::json& record) {
  const ParsedRecord r = parse_record(bundle.model, record);
  if (!r.actual) {
    throw Error(ErrorCode::kRecordMismatch, "record lacks the target '" + bundle.model.target + "'",
                {{"missing", {bundle.model.target}}, {"invalid", nlohmann::json::array()}});
  }
  if (!bundle.table) throw Error(ErrorCode::kCalibration, "model has no score table");
  return scoring::score_prediction(*r.actual, bundle.model.predict(r.x), *bundle.table);
}

std::vector<std::string> model_predictors(const data::Dataset& dataset) {
  std::vector<std::string> out;
  for (const auto& c : dataset.schema()) {
    if (c.role != data::ColumnRole::kPredictor) continue;
    if (c.kind == data::ColumnKind::kCategorical) {
      throw Error(ErrorCode::kSchema, "categorical predictor '" + c.name + "' must be one-hot encoded first",
                  {{"column", c.name}});
    }
    out.push_back(c.name);
  }
  if (out.empty()) throw Error(ErrorCode::kSchema, "dataset has no predictor columns");
  return out;
}

TrainResult train(const data::Dataset& dataset, const TrainConfig& config, std::string group) {
  const auto target_col = dataset.target_index();
  if (!target_col) throw Error(ErrorCode::kSchema, "dataset has no target column");
  const std::vector<std::string> names = model_predictors(dataset);
  const std::size_t n = dataset.rows();
  if (n == 0) throw Error(ErrorCode::kEmptyInput, "dataset has no rows");

  const std::string target = dataset.schema()[*target_col].name;
  const std::vector<double> y = dataset.numeric(target);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(y[i])) throw Error(ErrorCode::kData, "missing target in row " + std::to_string(i), {{"row", i}});
  }
  const std::optional<std::vector<double>> w = config.use_weights ? dataset.weights() : std::nullopt;
  const Eigen::MatrixXd x = features::base_design(dataset, names).values;

  TrainResult result;
  ModelBundle& bundle = result.bundle;
  BenchmarkModel& m = bundle.model;
  m.kind = config.kind;
  m.group = std::move(group);
  m.target = target;
  for (const auto& name : names) m.features.push_back(dataset.spec(name));
  double total = 0.0;
  m.feature_means.assign(names.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double wi = w ? (*w)[i] : 1.0;
    total += wi;
    for (std::size_t j = 0; j < names.size(); ++j) m.feature_means[j] += wi * x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  for (double& v : m.feature_means) v /= total;

  const cv::FoldPlan plan = cv::make_folds(n, config.cv.k, 1, config.cv.seed);
  result.fold_fingerprint = plan.fingerprint();
  result.oof.resize(static_cast<Eigen::Index>(n));
  std::size_t metric_p = names.size();

  nlohmann::json training = {{"seed", config.cv.seed},
                             {"k", config.cv.k},
                             {"n", n},
                             {"weighted", w.has_value()},
                             {"fold_fingerprint", hex64(result.fold_fingerprint)},
                             {"data_fingerprint", hex64(fingerprint(dataset))}};

  if (config.kind == ModelKind::kGbt) {
    gbt::GridSearchResult gs = gbt::grid_search_cv(x, y, span_of(w), config.grid, config.cv, names);
    const gbt::GbtParams chosen = gs.report.cells[gs.report.chosen].params;
    std::vector<std::vector<double>> fold_pred(config.cv.k);
    cv::parallel_for(config.cv.k, config.cv.threads, [&](std::size_t fold) {
      const auto train_rows = plan.train_rows(0, fold);
      const auto test_rows = plan.test_rows(0, fold);
      const std::vector<double> yt = take(y, train_rows);
      std::optional<std::vector<double>> wt;
      if (w) wt = take(*w, train_rows);
      const gbt::GbtModel fm = gbt::fit_gbt(take_rows(x, train_rows), yt, span_of(wt), chosen,
                                            gbt::fit_seed(config.cv.seed, 0, fold), names);
      const Eigen::VectorXd p = gbt::predict_gbt(fm, take_rows(x, test_rows));
      fold_pred[fold].assign(p.data(), p.data() + p.size());
    });
    for (std::size_t fold = 0; fold < config.cv.k; ++fold) {
      const auto test_rows = plan.test_rows(0, fold);
      for (std::size_t i = 0; i < test_rows.size(); ++i) result.oof(static_cast<Eigen::Index>(test_rows[i])) = fold_pred[fold][i];
    }
    m.gbt = std::move(gs.model);
    training["repeats"] = config.cv.repeats;
    training["grid"] = config.grid;
    training["params"] = chosen;
    training["cv_report"] = gs.report;
    result.cv_report = std::move(gs.report);
  } else {
    const int order = interaction_order(config.kind);
    const std::size_t q = features::expanded_term_count(names.size(), order);
    const features::BudgetCheck budget = features::check_budget(q, n);
    if (!budget.pass) {
      throw Error(ErrorCode::kPredictorBudgetExceeded,
                  "model needs " + std::to_string(q) + " terms but " + std::to_string(n) + " samples allow " +
                      std::to_string(budget.limit),
                  {{"terms", q}, {"n", n}, {"limit", budget.limit}});
    }
    const features::DesignMatrix design = linear_design(x, names, order);
    m.linear = linreg::fit_wls(design, y, span_of(w));
    std::vector<std::vector<double>> fold_pred(config.cv.k);
    cv::parallel_for(config.cv.k, config.cv.threads, [&](std::size_t fold) {
      const auto train_rows = plan.train_rows(0, fold);
      const auto test_rows = plan.test_rows(0, fold);
      features::DesignMatrix dt = design;
      dt.values = take_rows(design.values, train_rows);
      const std::vector<double> yt = take(y, train_rows);
      std::optional<std::vector<double>> wt;
      if (w) wt = take(*w, train_rows);
      const linreg::LinearModel fm = linreg::fit_wls(dt, yt, span_of(wt));
      features::DesignMatrix dv = design;
      dv.values = take_rows(design.values, test_rows);
      const Eigen::VectorXd p = linreg::predict_linear(fm, dv);
      fold_pred[fold].assign(p.data(), p.data() + p.size());
    });
    for (std::size_t fold = 0; fold < config.cv.k; ++fold) {
      const auto test_rows = plan.test_rows(0, fold);
      for (std::size_t i = 0; i < test_rows.size(); ++i) result.oof(static_cast<Eigen::Index>(test_rows[i])) = fold_pred[fold][i];
    }
    metric_p = q;
    training["terms"] = q;
    training["dropped_terms"] = m.linear->dropped_terms();
    result.summary = linreg::summarize_model(*m.linear);
  }

  bundle.metrics = scoring::evaluate(y, std::span<const double>(result.oof.data(), n), span_of(w), metric_p);

  if (config.calibrate) {
    const Eigen::VectorXd pred = config.in_sample_calibration ? m.predict(x) : result.oof;
    std::vector<double> eers;
    std::vector<double> ew;
    std::size_t bad_pred = 0;
    std::size_t bad_actual = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double p = pred(static_cast<Eigen::Index>(i));
      if (!(p > 0.0)) {
        ++bad_pred;
        continue;
      }
      if (!(y[i] > 0.0)) {
        ++bad_actual;
        continue;
      }
      eers.push_back(y[i] / p);
      if (w) ew.push_back((*w)[i]);
    }
    bundle.table = scoring::fit_score_table(eers, w ? std::optional<std::span<const double>>(ew) : std::nullopt);
    training["calibration"] = {{"source", config.in_sample_calibration ? "in_sample" : "out_of_fold"},
                               {"used", eers.size()},
                               {"excluded_nonpositive_prediction", bad_pred},
                               {"excluded_nonpositive_actual", bad_actual}};
  }
  bundle.training = std::move(training);
  return result;
}

std::vector<CompareRow> compare(const data::Dataset& dataset, const std::vector<ModelKind>& kinds, const TrainConfig& config) {
  std::vector<CompareRow> rows;
  for (ModelKind kind : kinds) {
    TrainConfig c = config;
    c.kind = kind;
    c.calibrate = false;
    const TrainResult r = train(dataset, c);
    rows.push_back({kind, r.bundle.metrics, r.fold_fingerprint});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const CompareRow& a, const CompareRow& b) { return a.metrics.nrmse < b.metrics.nrmse; });
  return rows;
}

std::string render_markdown(const std::vector<CompareRow>& rows) {
  std::ostringstream os;
  os << "| Model | Adjusted R^2 | NRMSE (%) | MAPE (%) | RMSE | n |\n";
  os << "|---|---:|---:|---:|---:|---:|\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %.4f | %.2f | %.2f | %.4g | %zu |\n", std::string(to_string(r.kind)).c_str(),
                  r.metrics.adj_r_squared, r.metrics.nrmse, r.metrics.mape, r.metrics.rmse, r.metrics.n);
    os << buf;
  }
  return os.str();
}

std::uint64_t fingerprint(const data::Dataset& dataset) {
  std::ostringstream os;
  data::write_table(dataset, os);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : os.str()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

void to_json(nlohmann::json& j, const BenchmarkModel& m) {
  j = {{"kind", to_string(m.kind)},
       {"group", m.group},
       {"target", m.target},
       {"features", m.features},
       {"feature_means", m.feature_means}};
  if (m.linear) j["linear"] = *m.linear;
  if (m.gbt) j["gbt"] = *m.gbt;
}

BenchmarkModel model_from_json(const nlohmann::json& j) {
  try {
    BenchmarkModel m;
    m.kind = parse_model_kind(j.at("kind").get<std::string>());
    m.group = j.value("group", std::string{});
    m.target = j.at("target").get<std::string>();
    m.features = j.at("features").get<std::vector<data::ColumnSpec>>();
    m.feature_means = j.at("feature_means").get<std::vector<double>>();
    if (j.contains("linear")) m.linear = j.at("linear").get<linreg::LinearModel>();
    if (j.contains("gbt")) m.gbt = j.at("gbt").get<gbt::GbtModel>();
    if (m.linear.has_value() == m.gbt.has_value()) {
      throw Error(ErrorCode::kModelFormat, "model must hold exactly one of 'linear' or 'gbt'");
    }
    if (m.feature_means.size() != m.features.size()) {
      throw Error(ErrorCode::kModelFormat, "feature_means does not match features");
    }
    if (m.gbt && m.gbt->feature_names != m.feature_names()) {
      throw Error(ErrorCode::kModelFormat, "tree ensemble features do not match the model features");
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kModelFormat, std::string("malformed model: ") + e.what());
  }
}

void to_json(nlohmann::json& j, const ModelBundle& b) {
  j = {{"schema_version", kBundleSchemaVersion},
       {"model", b.model},
       {"metrics", b.metrics},
       {"training", b.training}};
  j["score_table"] = b.table ? nlohmann::json(*b.table) : nlohmann::json(nullptr);
}

ModelBundle bundle_from_json(const nlohmann::json& j) {
  try {
    if (j.value("schema_version", 0) != kBundleSchemaVersion) {
      throw Error(ErrorCode::kModelFormat, "unsupported model bundle version");
    }
    ModelBundle b{model_from_json(j.at("model")), std::nullopt, j.at("metrics").get<scoring::MetricReport>(),
                  j.value("training", nlohmann::json::object())};
    if (j.contains("score_table") && !j.at("score_table").is_null()) b.table = scoring::score_table_from_json(j.at("score_table"));
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kModelFormat, std::string("malformed model bundle: ") + e.what());
  }
}

void to_json(nlohmann::json& j, const CompareRow& row) {
  j = {{"kind", to_string(row.kind)}, {"metrics", row.metrics}, {"fold_fingerprint", hex64(row.fold_fingerprint)}};
}

}  // namespace ebench::model
