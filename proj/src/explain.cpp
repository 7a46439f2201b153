#include "ebench/explain.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <set>

#include "ebench/cv.hpp"
#include "ebench/error.hpp"

namespace ebench::explain {
namespace {

// One slot of the unique feature path (feature, the fraction of zero and
// one paths flowing through, and the permutation weight).
struct PathElement {
  int feature = -1;
  double zero_fraction = 0.0;
  double one_fraction = 0.0;
  double pweight = 0.0;
};

using Path = std::vector<PathElement>;

void extend_path(Path& path, double zero_fraction, double one_fraction, int feature) {
  const std::size_t depth = path.size();
  path.push_back({feature, zero_fraction, one_fraction, depth == 0 ? 1.0 : 0.0});
  const double denom = static_cast<double>(depth + 1);
  for (std::size_t k = depth; k-- > 0;) {
    path[k + 1].pweight += one_fraction * path[k].pweight * static_cast<double>(k + 1) / denom;
    path[k].pweight = zero_fraction * path[k].pweight * static_cast<double>(depth - k) / denom;
  }
}

void unwind_path(Path& path, std::size_t index) {
  const std::size_t depth = path.size() - 1;
  const double one_fraction = path[index].one_fraction;
  const double zero_fraction = path[index].zero_fraction;
  const double denom = static_cast<double>(depth + 1);
  double next_one_portion = path[depth].pweight;
  for (std::size_t k = depth; k-- > 0;) {
    if (one_fraction != 0.0) {
      const double tmp = path[k].pweight;
      path[k].pweight = next_one_portion * denom / (static_cast<double>(k + 1) * one_fraction);
      next_one_portion = tmp - path[k].pweight * zero_fraction * static_cast<double>(depth - k) / denom;
    } else {
      path[k].pweight = path[k].pweight * denom / (zero_fraction * static_cast<double>(depth - k));
    }
  }
  for (std::size_t k = index; k < depth; ++k) {
    path[k].feature = path[k + 1].feature;
    path[k].zero_fraction = path[k + 1].zero_fraction;
    path[k].one_fraction = path[k + 1].one_fraction;
  }
  path.pop_back();
}

// Total permutation weight if the element at `index` were unwound.
double unwound_path_sum(const Path& path, std::size_t index) {
  const std::size_t depth = path.size() - 1;
  const double one_fraction = path[index].one_fraction;
  const double zero_fraction = path[index].zero_fraction;
  double next_one_portion = path[depth].pweight;
  double total = 0.0;
  for (std::size_t k = depth; k-- > 0;) {
    if (one_fraction != 0.0) {
      const double tmp = next_one_portion / (static_cast<double>(k + 1) * one_fraction);
      total += tmp;
      next_one_portion = path[k].pweight - tmp * zero_fraction * static_cast<double>(depth - k);
    } else {
      total += path[k].pweight / (zero_fraction * static_cast<double>(depth - k));
    }
  }
  return total * static_cast<double>(depth + 1);
}

// Conditioning: 0 = none, +1 = `condition_feature` fixed to x, -1 = fixed
// to "absent". Used to split SHAP values into interaction terms.
struct TreeShapContext {
  const gbt::Tree& tree;
  std::span<const double> x;
  std::span<double> phi;
  int condition = 0;
  int condition_feature = -1;
};

void tree_shap_recurse(const TreeShapContext& ctx, int node_index, Path path, double parent_zero_fraction,
                       double parent_one_fraction, int parent_feature, double condition_fraction) {
  if (condition_fraction == 0.0) return;
  if (ctx.condition == 0 || ctx.condition_feature != parent_feature) {
    extend_path(path, parent_zero_fraction, parent_one_fraction, parent_feature);
  }
  const gbt::TreeNode& node = ctx.tree.node(node_index);
  if (node.is_leaf()) {
    for (std::size_t k = 1; k < path.size(); ++k) {
      const double w = unwound_path_sum(path, k);
      const PathElement& el = path[k];
      ctx.phi[static_cast<std::size_t>(el.feature)] +=
          w * (el.one_fraction - el.zero_fraction) * node.value * condition_fraction;
    }
    return;
  }

  const int split = node.feature;
  const bool go_left = ctx.x[static_cast<std::size_t>(split)] < node.threshold;
  const int hot = go_left ? node.left : node.right;
  const int cold = go_left ? node.right : node.left;
  const double hot_zero_fraction = ctx.tree.node(hot).cover / node.cover;
  const double cold_zero_fraction = ctx.tree.node(cold).cover / node.cover;
  double incoming_zero_fraction = 1.0;
  double incoming_one_fraction = 1.0;

  // A feature already on the path is unwound and re-extended here.
  for (std::size_t k = 0; k < path.size(); ++k) {
    if (path[k].feature == split) {
      incoming_zero_fraction = path[k].zero_fraction;
      incoming_one_fraction = path[k].one_fraction;
      unwind_path(path, k);
      break;
    }
  }

  double hot_condition_fraction = condition_fraction;
  double cold_condition_fraction = condition_fraction;
  if (ctx.condition > 0 && split == ctx.condition_feature) {
    cold_condition_fraction = 0.0;
  } else if (ctx.condition < 0 && split == ctx.condition_feature) {
    hot_condition_fraction *= hot_zero_fraction;
    cold_condition_fraction *= cold_zero_fraction;
  }

  tree_shap_recurse(ctx, hot, path, hot_zero_fraction * incoming_zero_fraction, incoming_one_fraction, split,
                    hot_condition_fraction);
  tree_shap_recurse(ctx, cold, std::move(path), cold_zero_fraction * incoming_zero_fraction, 0.0, split,
                    cold_condition_fraction);
}

void tree_shap(const gbt::Tree& tree, std::span<const double> x, std::span<double> phi, int condition,
               int condition_feature) {
  const TreeShapContext ctx{tree, x, phi, condition, condition_feature};
  tree_shap_recurse(ctx, 0, Path{}, 1.0, 1.0, -1, 1.0);
}

void check_covers(const gbt::GbtModel& model) {
  for (const gbt::Tree& tree : model.trees) {
    for (const gbt::TreeNode& node : tree.nodes()) {
      if (!node.is_leaf() && !(node.cover > 0.0)) {
        throw Error(ErrorCode::kModelFormat, "tree node has no training cover; explanations need covers");
      }
    }
  }
}

void check_input(const gbt::GbtModel& model, std::span<const double> x) {
  if (x.size() != model.feature_count()) {
    throw Error(ErrorCode::kSchema, "feature count does not match the model",
                {{"expected", model.feature_count()}, {"got", x.size()}});
  }
}

double expected_output(const gbt::GbtModel& model) {
  double sum = 0.0;
  for (const gbt::Tree& tree : model.trees) sum += tree.expected_value();
  return model.base_score + model.eta * sum;
}

}  // namespace

Explanation shap_exact(const ConditionalEvaluator& evaluate, std::size_t feature_count) {
  const std::size_t m = feature_count;
  if (m > kMaxExactFeatures) {
    throw Error(ErrorCode::kCapacity, "exact enumeration supports at most 15 features; use tree SHAP",
                {{"features", m}, {"limit", kMaxExactFeatures}});
  }
  const std::uint64_t full = (std::uint64_t{1} << m) - 1;
  std::vector<double> value(std::size_t{1} << m);
  for (std::uint64_t s = 0; s <= full; ++s) value[s] = evaluate(s);

  // |S|! (M - |S| - 1)! / M!, evaluated in log space.
  std::vector<double> weight(m == 0 ? 1 : m);
  for (std::size_t s = 0; s < m; ++s) {
    weight[s] = std::exp(std::lgamma(static_cast<double>(s) + 1.0) + std::lgamma(static_cast<double>(m - s)) -
                         std::lgamma(static_cast<double>(m) + 1.0));
  }

  Explanation e;
  e.base_value = value[0];
  e.prediction = value[full];
  e.phi.assign(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const std::uint64_t bit = std::uint64_t{1} << i;
    double acc = 0.0;
    for (std::uint64_t s = 0; s <= full; ++s) {
      if (s & bit) continue;
      acc += weight[static_cast<std::size_t>(std::popcount(s))] * (value[s | bit] - value[s]);
    }
    e.phi[i] = acc;
  }
  return e;
}

double tree_conditional(const gbt::Tree& tree, std::span<const double> x, std::uint64_t coalition) {
  std::function<double(int)> walk = [&](int i) -> double {
    const gbt::TreeNode& n = tree.node(i);
    if (n.is_leaf()) return n.value;
    if (n.feature < 64 && (coalition >> n.feature) & 1u) {
      return walk(x[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right);
    }
    return (tree.node(n.left).cover * walk(n.left) + tree.node(n.right).cover * walk(n.right)) / n.cover;
  };
  return walk(0);
}

ConditionalEvaluator gbt_conditional(const gbt::GbtModel& model, std::span<const double> x) {
  check_input(model, x);
  std::vector<double> row(x.begin(), x.end());
  return [&model, row = std::move(row)](std::uint64_t coalition) {
    double sum = 0.0;
    for (const gbt::Tree& tree : model.trees) sum += tree_conditional(tree, row, coalition);
    return model.base_score + model.eta * sum;
  };
}

Explanation shap_tree(const gbt::GbtModel& model, std::span<const double> x) {
  check_input(model, x);
  check_covers(model);
  const std::size_t m = model.feature_count();
  Explanation e;
  e.feature_names = model.feature_names;
  e.feature_values.assign(x.begin(), x.end());
  e.phi.assign(m, 0.0);
  std::vector<double> tree_phi(m);
  for (const gbt::Tree& tree : model.trees) {
    std::fill(tree_phi.begin(), tree_phi.end(), 0.0);
    tree_shap(tree, x, tree_phi, 0, -1);
    for (std::size_t i = 0; i < m; ++i) e.phi[i] += model.eta * tree_phi[i];
  }
  e.base_value = expected_output(model);
  e.prediction = predict_gbt(model, x);
  return e;
}

InteractionExplanation shap_interactions(const gbt::GbtModel& model, std::span<const double> x) {
  check_input(model, x);
  check_covers(model);
  const std::size_t m = model.feature_count();
  if (m > kMaxInteractionFeatures) {
    throw Error(ErrorCode::kCapacity, "interaction values support at most 64 features",
                {{"features", m}, {"limit", kMaxInteractionFeatures}});
  }
  const auto mi = static_cast<Eigen::Index>(m);
  Eigen::MatrixXd raw = Eigen::MatrixXd::Zero(mi, mi);
  std::vector<double> on(m);
  std::vector<double> off(m);
  for (const gbt::Tree& tree : model.trees) {
    std::set<int> used;
    for (const gbt::TreeNode& n : tree.nodes()) {
      if (!n.is_leaf()) used.insert(n.feature);
    }
    // Half the change in phi_j between "i present" and "i absent" is the
    // (i, j) interaction.
    for (int i : used) {
      std::fill(on.begin(), on.end(), 0.0);
      std::fill(off.begin(), off.end(), 0.0);
      tree_shap(tree, x, on, 1, i);
      tree_shap(tree, x, off, -1, i);
      for (std::size_t j = 0; j < m; ++j) {
        if (static_cast<int>(j) == i) continue;
        raw(i, static_cast<Eigen::Index>(j)) += model.eta * (on[j] - off[j]) / 2.0;
      }
    }
  }

  const Explanation base = shap_tree(model, x);
  InteractionExplanation out;
  out.matrix = (raw + raw.transpose()) / 2.0;
  for (Eigen::Index i = 0; i < mi; ++i) {
    out.matrix(i, i) = 0.0;
    out.matrix(i, i) = base.phi[static_cast<std::size_t>(i)] - out.matrix.row(i).sum();
  }
  out.base_value = base.base_value;
  out.feature_names = base.feature_names;
  out.feature_values = base.feature_values;
  out.prediction = base.prediction;
  return out;
}

ImportanceReport importance(const gbt::GbtModel& model, const Eigen::MatrixXd& x, unsigned threads) {
  if (x.rows() == 0) throw Error(ErrorCode::kData, "importance needs at least one row");
  if (static_cast<std::size_t>(x.cols()) != model.feature_count()) {
    throw Error(ErrorCode::kSchema, "feature count does not match the model");
  }
  check_covers(model);
  ImportanceReport report;
  report.feature_names = model.feature_names;
  report.features = x;
  report.shap.resize(x.rows(), x.cols());
  report.base_value = expected_output(model);
  cv::parallel_for(static_cast<std::size_t>(x.rows()), threads, [&](std::size_t r) {
    const Eigen::VectorXd row = x.row(static_cast<Eigen::Index>(r)).transpose();
    const Explanation e = shap_tree(model, std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
    for (std::size_t j = 0; j < e.phi.size(); ++j) {
      report.shap(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = e.phi[j];
    }
  });
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    report.ranking.push_back({model.feature_names[static_cast<std::size_t>(j)], static_cast<std::size_t>(j),
                              report.shap.col(j).cwiseAbs().mean()});
  }
  std::stable_sort(report.ranking.begin(), report.ranking.end(),
                   [](const FeatureImportance& a, const FeatureImportance& b) { return a.mean_abs_shap > b.mean_abs_shap; });
  return report;
}

std::vector<DependencePoint> dependence(const ImportanceReport& report, std::string_view feature,
                                        std::optional<std::string_view> color_feature) {
  auto index_of = [&](std::string_view name) {
    const auto it = std::find(report.feature_names.begin(), report.feature_names.end(), name);
    if (it == report.feature_names.end()) {
      throw Error(ErrorCode::kSchema, "unknown feature '" + std::string(name) + "'", {{"feature", std::string(name)}});
    }
    return static_cast<Eigen::Index>(it - report.feature_names.begin());
  };
  const Eigen::Index f = index_of(feature);
  std::optional<Eigen::Index> c;
  if (color_feature) c = index_of(*color_feature);
  std::vector<DependencePoint> out;
  for (Eigen::Index r = 0; r < report.shap.rows(); ++r) {
    DependencePoint p{report.features(r, f), report.shap(r, f), std::nullopt};
    if (c) p.color_value = report.features(r, *c);
    out.push_back(p);
  }
  return out;
}

ForceData force_data(const Explanation& e) {
  ForceData f;
  f.base_value = e.base_value;
  f.output_value = e.prediction;
  for (std::size_t i = 0; i < e.phi.size(); ++i) {
    const std::string name = i < e.feature_names.size() ? e.feature_names[i] : "f" + std::to_string(i);
    const double value = i < e.feature_values.size() ? e.feature_values[i] : 0.0;
    if (e.phi[i] > 0.0) f.positive.push_back({name, value, e.phi[i]});
    if (e.phi[i] < 0.0) f.negative.push_back({name, value, e.phi[i]});
  }
  auto by_magnitude = [](const ForceEntry& a, const ForceEntry& b) { return std::fabs(a.phi) > std::fabs(b.phi); };
  std::stable_sort(f.positive.begin(), f.positive.end(), by_magnitude);
  std::stable_sort(f.negative.begin(), f.negative.end(), by_magnitude);
  return f;
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const Explanation& e) {
  j = {{"base_value", e.base_value},
       {"phi", e.phi},
       {"feature_names", e.feature_names},
       {"feature_values", e.feature_values},
       {"prediction", e.prediction}};
}

void from_json(const nlohmann::json& j, Explanation& e) {
  e.base_value = j.at("base_value").get<double>();
  e.phi = j.at("phi").get<std::vector<double>>();
  e.feature_names = j.value("feature_names", std::vector<std::string>{});
  e.feature_values = j.value("feature_values", std::vector<double>{});
  e.prediction = j.at("prediction").get<double>();
}

void to_json(nlohmann::json& j, const InteractionExplanation& e) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < e.matrix.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(e.matrix.cols()));
    for (Eigen::Index k = 0; k < e.matrix.cols(); ++k) row[static_cast<std::size_t>(k)] = e.matrix(i, k);
    rows.push_back(row);
  }
  j = {{"base_value", e.base_value},
       {"matrix", rows},
       {"feature_names", e.feature_names},
       {"feature_values", e.feature_values},
       {"prediction", e.prediction}};
}

namespace {
nlohmann::json entries_json(const std::vector<ForceEntry>& entries) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : entries) out.push_back({{"feature", e.feature}, {"value", e.value}, {"phi", e.phi}});
  return out;
}
std::vector<ForceEntry> entries_from(const nlohmann::json& j) {
  std::vector<ForceEntry> out;
  for (const auto& e : j) out.push_back({e.at("feature").get<std::string>(), e.at("value").get<double>(), e.at("phi").get<double>()});
  return out;
}
}  // namespace

void to_json(nlohmann::json& j, const ForceData& f) {
  j = {{"base_value", f.base_value},
       {"output_value", f.output_value},
       {"positive", entries_json(f.positive)},
       {"negative", entries_json(f.negative)}};
}

void from_json(const nlohmann::json& j, ForceData& f) {
  f.base_value = j.at("base_value").get<double>();
  f.output_value = j.at("output_value").get<double>();
  f.positive = entries_from(j.at("positive"));
  f.negative = entries_from(j.at("negative"));
}

void to_json(nlohmann::json& j, const ImportanceReport& r) {
  nlohmann::json ranking = nlohmann::json::array();
  for (const auto& f : r.ranking) ranking.push_back({{"feature", f.feature}, {"mean_abs_shap", f.mean_abs_shap}});
  nlohmann::json shap = nlohmann::json::array();
  for (Eigen::Index i = 0; i < r.shap.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(r.shap.cols()));
    for (Eigen::Index k = 0; k < r.shap.cols(); ++k) row[static_cast<std::size_t>(k)] = r.shap(i, k);
    shap.push_back(row);
  }
  j = {{"base_value", r.base_value}, {"feature_names", r.feature_names}, {"ranking", ranking}, {"shap", shap}};
}

void to_json(nlohmann::json& j, const DependencePoint& p) {
  j = {{"feature_value", p.feature_value},
       {"shap_value", p.shap_value},
       {"color_value", p.color_value ? nlohmann::json(*p.color_value) : nlohmann::json(nullptr)}};
}

}  // namespace ebench::explain
