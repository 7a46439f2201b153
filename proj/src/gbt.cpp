#include "ebench/gbt.hpp"

#include <algorithm>
#include <functional>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <tuple>

#include "ebench/error.hpp"
#include "ebench/rng.hpp"

namespace ebench::gbt {
namespace {

class CartBuilder {
 public:
  CartBuilder(const Eigen::MatrixXd& x, std::span<const double> y, const double* w, const CartOptions& options,
              std::vector<int> features)
      : x_(x), y_(y), w_(w), options_(options), features_(std::move(features)) {}

  std::vector<TreeNode> build(std::vector<std::size_t> rows) {
    grow(rows, 0);
    return std::move(nodes_);
  }

 private:
  double weight(std::size_t r) const { return w_ ? w_[r] : 1.0; }

  int grow(std::vector<std::size_t>& rows, int depth) {
    double wsum = 0.0;
    double ysum = 0.0;
    for (std::size_t r : rows) {
      wsum += weight(r);
      ysum += weight(r) * y_[r];
    }
    const double mean = ysum / wsum;
    double sse = 0.0;
    double centered_total = 0.0;
    for (std::size_t r : rows) {
      const double d = y_[r] - mean;
      sse += weight(r) * d * d;
      centered_total += weight(r) * d;
    }

    const int index = static_cast<int>(nodes_.size());
    nodes_.push_back(TreeNode{});
    nodes_.back().cover = static_cast<double>(rows.size());
    nodes_.back().value = mean;

    if (depth >= options_.max_depth || rows.size() < 2 * options_.min_leaf || !(sse > 0.0)) return index;

    // Scan every feature in ascending index order, thresholds ascending; a
    // later candidate must strictly beat the incumbent.
    int best_feature = -1;
    double best_threshold = 0.0;
    double best_gain = 0.0;
    const double parent_term = centered_total * centered_total / wsum;
    std::vector<std::size_t> sorted = rows;
    for (int f : features_) {
      std::stable_sort(sorted.begin(), sorted.end(),
                       [&](std::size_t a, std::size_t b) { return x_(static_cast<Eigen::Index>(a), f) < x_(static_cast<Eigen::Index>(b), f); });
      double w_left = 0.0;
      double s_left = 0.0;
      for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
        const std::size_t r = sorted[i];
        w_left += weight(r);
        s_left += weight(r) * (y_[r] - mean);
        const double a = x_(static_cast<Eigen::Index>(r), f);
        const double b = x_(static_cast<Eigen::Index>(sorted[i + 1]), f);
        if (!(a < b)) continue;
        if (i + 1 < options_.min_leaf || sorted.size() - i - 1 < options_.min_leaf) continue;
        const double w_right = wsum - w_left;
        const double s_right = centered_total - s_left;
        const double gain = s_left * s_left / w_left + s_right * s_right / w_right - parent_term;
        if (gain > best_gain) {
          best_gain = gain;
          best_feature = f;
          double mid = a + (b - a) / 2.0;
          if (!(mid > a)) mid = b;
          best_threshold = mid;
        }
      }
    }
    if (best_feature < 0 || !(best_gain > 1e-12 * sse)) return index;

    std::vector<std::size_t> left;
    std::vector<std::size_t> right;
    for (std::size_t r : rows) {
      (x_(static_cast<Eigen::Index>(r), best_feature) < best_threshold ? left : right).push_back(r);
    }
    rows.clear();
    rows.shrink_to_fit();
    nodes_[static_cast<std::size_t>(index)].feature = best_feature;
    nodes_[static_cast<std::size_t>(index)].threshold = best_threshold;
    nodes_[static_cast<std::size_t>(index)].value = 0.0;
    const int l = grow(left, depth + 1);
    nodes_[static_cast<std::size_t>(index)].left = l;
    const int r = grow(right, depth + 1);
    nodes_[static_cast<std::size_t>(index)].right = r;
    return index;
  }

  const Eigen::MatrixXd& x_;
  std::span<const double> y_;
  const double* w_;
  CartOptions options_;
  std::vector<int> features_;
  std::vector<TreeNode> nodes_;
};

void check_params(const GbtParams& p) {
  auto bad = [](const std::string& what) { return Error(ErrorCode::kConfiguration, what); };
  if (p.max_depth < 0) throw bad("max_depth must be >= 0");
  if (p.nrounds < 0) throw bad("nrounds must be >= 0");
  if (!(p.eta > 0.0 && p.eta <= 1.0)) throw bad("eta must lie in (0, 1]");
  if (!(p.subsample > 0.0 && p.subsample <= 1.0)) throw bad("subsample must lie in (0, 1]");
  if (!(p.colsample_bytree > 0.0 && p.colsample_bytree <= 1.0)) throw bad("colsample_bytree must lie in (0, 1]");
  if (p.min_leaf < 1) throw bad("min_leaf must be >= 1");
}

double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tree

Tree::Tree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) {
  if (nodes_.empty()) throw Error(ErrorCode::kModelFormat, "tree has no nodes");
  const int count = static_cast<int>(nodes_.size());
  for (const TreeNode& n : nodes_) {
    if (n.is_leaf()) continue;
    if (n.left <= 0 || n.right <= 0 || n.left >= count || n.right >= count) {
      throw Error(ErrorCode::kModelFormat, "internal node has an invalid child index");
    }
  }
}

int Tree::depth() const {
  std::function<int(int)> walk = [&](int i) -> int {
    const TreeNode& n = node(i);
    if (n.is_leaf()) return 0;
    return 1 + std::max(walk(n.left), walk(n.right));
  };
  return walk(0);
}

int Tree::max_path_features() const {
  std::function<int(int, std::set<int>)> walk = [&](int i, std::set<int> seen) -> int {
    const TreeNode& n = node(i);
    if (n.is_leaf()) return static_cast<int>(seen.size());
    seen.insert(n.feature);
    return std::max(walk(n.left, seen), walk(n.right, seen));
  };
  return walk(0, {});
}

void Tree::recount_covers(const Eigen::MatrixXd& x) {
  for (TreeNode& n : nodes_) n.cover = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    int i = 0;
    for (;;) {
      TreeNode& n = nodes_[static_cast<std::size_t>(i)];
      n.cover += 1.0;
      if (n.is_leaf()) break;
      i = x(r, n.feature) < n.threshold ? n.left : n.right;
    }
  }
}

double Tree::expected_value() const {
  std::function<double(int)> walk = [&](int i) -> double {
    const TreeNode& n = node(i);
    if (n.is_leaf()) return n.value;
    return (node(n.left).cover * walk(n.left) + node(n.right).cover * walk(n.right)) / n.cover;
  };
  return walk(0);
}

Tree fit_cart(const Eigen::MatrixXd& x, std::span<const double> y, std::optional<std::span<const double>> w,
              const CartOptions& options, std::span<const std::size_t> rows, std::span<const int> features) {
  if (x.rows() == 0 || y.empty()) throw Error(ErrorCode::kData, "cannot fit a tree to empty input");
  if (static_cast<std::size_t>(x.rows()) != y.size()) throw Error(ErrorCode::kArgument, "target length does not match rows");
  std::vector<std::size_t> use_rows(rows.begin(), rows.end());
  if (use_rows.empty()) {
    use_rows.resize(y.size());
    std::iota(use_rows.begin(), use_rows.end(), std::size_t{0});
  }
  if (use_rows.size() < 2 * options.min_leaf && options.max_depth > 0) {
    throw Error(ErrorCode::kConfiguration, "too few rows for min_leaf",
                {{"rows", use_rows.size()}, {"min_leaf", options.min_leaf}});
  }
  std::vector<int> use_features(features.begin(), features.end());
  if (use_features.empty()) {
    use_features.resize(static_cast<std::size_t>(x.cols()));
    std::iota(use_features.begin(), use_features.end(), 0);
  }
  std::sort(use_features.begin(), use_features.end());
  CartBuilder builder(x, y, w ? w->data() : nullptr, options, std::move(use_features));
  return Tree(builder.build(std::move(use_rows)));
}

// ---------------------------------------------------------------------------
// Boosting

GbtModel fit_gbt(const Eigen::MatrixXd& x, std::span<const double> y, std::optional<std::span<const double>> w,
                 const GbtParams& params, std::uint64_t seed, std::vector<std::string> feature_names) {
  check_params(params);
  const auto n = static_cast<std::size_t>(x.rows());
  const auto p = static_cast<std::size_t>(x.cols());
  if (n < 10) throw Error(ErrorCode::kConfiguration, "boosting needs at least 10 rows", {{"n", n}});
  if (y.size() != n) throw Error(ErrorCode::kArgument, "target length does not match rows");
  if (w && w->size() != n) throw Error(ErrorCode::kArgument, "weight length does not match rows");
  if (!x.allFinite()) throw Error(ErrorCode::kData, "feature matrix has a non-finite cell");
  const auto row_count = static_cast<std::size_t>(std::floor(params.subsample * static_cast<double>(n)));
  const auto col_count = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(params.colsample_bytree * static_cast<double>(p))));
  if (row_count < 2 * params.min_leaf) {
    throw Error(ErrorCode::kConfiguration, "subsample leaves too few rows to grow a tree",
                {{"rows", row_count}, {"min_leaf", params.min_leaf}});
  }
  if (feature_names.empty()) {
    for (std::size_t j = 0; j < p; ++j) feature_names.push_back("f" + std::to_string(j));
  }
  if (feature_names.size() != p) throw Error(ErrorCode::kArgument, "feature name count does not match columns");

  GbtModel model;
  model.eta = params.eta;
  model.max_depth = params.max_depth;
  model.feature_names = std::move(feature_names);
  double wsum = 0.0;
  double ysum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double wi = w ? (*w)[i] : 1.0;
    wsum += wi;
    ysum += wi * y[i];
  }
  model.base_score = ysum / wsum;

  std::vector<double> pred(n, model.base_score);
  std::vector<double> residual(n);
  Rng rng(seed);
  const CartOptions cart{params.max_depth, params.min_leaf};
  for (int t = 0; t < params.nrounds; ++t) {
    const std::vector<std::size_t> rows = rng.sample_without_replacement(n, row_count);
    const std::vector<std::size_t> cols = rng.sample_without_replacement(p, col_count);
    const std::vector<int> features(cols.begin(), cols.end());
    for (std::size_t i = 0; i < n; ++i) residual[i] = y[i] - pred[i];
    Tree tree = fit_cart(x, residual, w, cart, rows, features);
    tree.recount_covers(x);
    for (std::size_t i = 0; i < n; ++i) pred[i] += params.eta * tree.predict(x.row(static_cast<Eigen::Index>(i)));
    model.trees.push_back(std::move(tree));
  }
  return model;
}

Eigen::VectorXd predict_gbt(const GbtModel& model, const Eigen::MatrixXd& x, std::optional<std::size_t> tree_limit) {
  if (static_cast<std::size_t>(x.cols()) != model.feature_count()) {
    throw Error(ErrorCode::kSchema, "feature count does not match the model",
                {{"expected", model.feature_count()}, {"got", x.cols()}});
  }
  const std::size_t limit = std::min(tree_limit.value_or(model.trees.size()), model.trees.size());
  Eigen::VectorXd out = Eigen::VectorXd::Constant(x.rows(), model.base_score);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double sum = 0.0;
    for (std::size_t t = 0; t < limit; ++t) sum += model.trees[t].predict(x.row(r));
    out(r) += model.eta * sum;
  }
  return out;
}

double predict_gbt(const GbtModel& model, std::span<const double> x) {
  if (x.size() != model.feature_count()) {
    throw Error(ErrorCode::kSchema, "feature count does not match the model",
                {{"expected", model.feature_count()}, {"got", x.size()}});
  }
  double sum = 0.0;
  for (const Tree& tree : model.trees) sum += tree.predict(x);
  return model.base_score + model.eta * sum;
}

// ---------------------------------------------------------------------------
// Tuning

void TuneGrid::validate() const {
  auto bad = [](const std::string& what) { return Error(ErrorCode::kConfiguration, what); };
  if (max_depth.empty() || nrounds.empty() || eta.empty() || colsample_bytree.empty() || subsample.empty()) {
    throw bad("every grid axis needs at least one value");
  }
  for (int d : max_depth) {
    if (d < 0) throw bad("max_depth must be >= 0");
    if (!override_bounds && (d < 2 || d > 3)) throw bad("max_depth outside 2-3");
  }
  for (int r : nrounds) {
    if (r < 0) throw bad("nrounds must be >= 0");
    if (!override_bounds && (r < 1 || r > 200)) throw bad("nrounds outside 1-200");
  }
  for (double e : eta) {
    if (!(e > 0.0 && e <= 1.0)) throw bad("eta must lie in (0, 1]");
    if (!override_bounds && (e < 0.1 || e > 0.9)) throw bad("eta outside 0.1-0.9");
  }
  for (double c : colsample_bytree) {
    if (!(c > 0.0 && c <= 1.0)) throw bad("colsample_bytree must lie in (0, 1]");
    if (!override_bounds && (c < 0.2 || c > 0.8)) throw bad("colsample_bytree outside 0.2-0.8");
  }
  for (double s : subsample) {
    if (!(s > 0.0 && s <= 1.0)) throw bad("subsample must lie in (0, 1]");
    if (!override_bounds && (s < 0.25 || s > 1.0)) throw bad("subsample outside 0.25-1");
  }
}

std::vector<GbtParams> TuneGrid::cells() const {
  std::vector<GbtParams> out;
  for (int d : max_depth) {
    for (int r : nrounds) {
      for (double e : eta) {
        for (double c : colsample_bytree) {
          for (double s : subsample) out.push_back(GbtParams{d, r, e, c, s, min_leaf});
        }
      }
    }
  }
  return out;
}

std::uint64_t fit_seed(std::uint64_t seed, std::size_t repeat, std::size_t fold) {
  return mix_seed(seed, 0xB005 + repeat, fold);
}

std::uint64_t refit_seed(std::uint64_t seed) { return mix_seed(seed, 0xF17A1, 0); }

GridSearchResult grid_search_cv(const Eigen::MatrixXd& x, std::span<const double> y,
                                std::optional<std::span<const double>> w, const TuneGrid& grid,
                                const CvOptions& options, std::vector<std::string> feature_names) {
  grid.validate();
  const auto n = static_cast<std::size_t>(x.rows());
  const cv::FoldPlan plan = cv::make_folds(n, options.k, options.repeats, options.seed);
  const std::vector<GbtParams> cells = grid.cells();

  // Models with fewer rounds are prefixes of the longest run with the same
  // seed, so each (depth, eta, colsample, subsample) group is fit once per
  // fold and scored at every requested round count.
  using GroupKey = std::tuple<int, double, double, double>;
  std::map<GroupKey, std::vector<std::size_t>> groups;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const GbtParams& p = cells[c];
    groups[{p.max_depth, p.eta, p.colsample_bytree, p.subsample}].push_back(c);
  }
  std::vector<std::vector<std::size_t>> group_cells;
  for (auto& [key, members] : groups) group_cells.push_back(members);

  const std::size_t slots = options.k * options.repeats;
  std::vector<std::vector<double>> fold_rmse(cells.size(), std::vector<double>(slots, 0.0));

  const std::size_t tasks = group_cells.size() * slots;
  cv::parallel_for(tasks, options.threads, [&](std::size_t task) {
    const std::vector<std::size_t>& members = group_cells[task / slots];
    const std::size_t slot = task % slots;
    const std::size_t repeat = slot / options.k;
    const std::size_t fold = slot % options.k;

    GbtParams params = cells[members.front()];
    for (std::size_t c : members) params.nrounds = std::max(params.nrounds, cells[c].nrounds);

    const std::vector<std::size_t> train = plan.train_rows(repeat, fold);
    const std::vector<std::size_t> test = plan.test_rows(repeat, fold);
    const Eigen::MatrixXd x_train = x(train, Eigen::all);
    const Eigen::MatrixXd x_test = x(test, Eigen::all);
    std::vector<double> y_train;
    std::vector<double> w_train;
    for (std::size_t r : train) {
      y_train.push_back(y[r]);
      if (w) w_train.push_back((*w)[r]);
    }
    const GbtModel model = fit_gbt(x_train, y_train, w ? std::optional<std::span<const double>>(w_train) : std::nullopt,
                                   params, fit_seed(options.seed, repeat, fold));

    std::vector<double> pred(test.size(), model.base_score);
    auto rmse = [&] {
      double acc = 0.0;
      for (std::size_t i = 0; i < test.size(); ++i) acc += (y[test[i]] - pred[i]) * (y[test[i]] - pred[i]);
      return std::sqrt(acc / static_cast<double>(test.size()));
    };
    std::map<int, double> at_round;
    at_round[0] = rmse();
    for (std::size_t t = 0; t < model.trees.size(); ++t) {
      for (std::size_t i = 0; i < test.size(); ++i) {
        pred[i] += model.eta * model.trees[t].predict(x_test.row(static_cast<Eigen::Index>(i)));
      }
      at_round[static_cast<int>(t + 1)] = rmse();
    }
    for (std::size_t c : members) fold_rmse[c][slot] = at_round.at(cells[c].nrounds);
  });

  CvReport report;
  report.seed = options.seed;
  report.k = options.k;
  report.repeats = options.repeats;
  report.fold_fingerprint = plan.fingerprint();
  for (std::size_t c = 0; c < cells.size(); ++c) {
    CvCell cell;
    cell.params = cells[c];
    cell.fold_rmse = fold_rmse[c];
    double sum = 0.0;
    for (double v : cell.fold_rmse) sum += v;
    cell.mean_rmse = sum / static_cast<double>(slots);
    cell.std_rmse = sample_std(cell.fold_rmse, cell.mean_rmse);
    report.cells.push_back(std::move(cell));
  }
  for (std::size_t c = 1; c < report.cells.size(); ++c) {
    const CvCell& a = report.cells[c];
    const CvCell& b = report.cells[report.chosen];
    const auto key_a = std::make_tuple(a.mean_rmse, a.params.nrounds, a.params.max_depth);
    const auto key_b = std::make_tuple(b.mean_rmse, b.params.nrounds, b.params.max_depth);
    if (key_a < key_b) report.chosen = c;
  }

  GridSearchResult result;
  result.model = fit_gbt(x, y, w, report.cells[report.chosen].params, refit_seed(options.seed), std::move(feature_names));
  result.report = std::move(report);
  return result;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

nlohmann::json node_to_json(const Tree& tree, int index) {
  const TreeNode& n = tree.node(index);
  if (n.is_leaf()) return {{"leaf", n.value}, {"cover", n.cover}};
  return {{"feature", n.feature},
          {"threshold", n.threshold},
          {"cover", n.cover},
          {"left", node_to_json(tree, n.left)},
          {"right", node_to_json(tree, n.right)}};
}

int node_from_json(const nlohmann::json& j, std::vector<TreeNode>& nodes, std::size_t features) {
  const int index = static_cast<int>(nodes.size());
  nodes.push_back(TreeNode{});
  if (!j.contains("cover")) throw Error(ErrorCode::kModelFormat, "tree node lacks a cover count");
  nodes.back().cover = j.at("cover").get<double>();
  if (j.contains("leaf")) {
    nodes.back().value = j.at("leaf").get<double>();
    return index;
  }
  const int feature = j.at("feature").get<int>();
  if (feature < 0 || static_cast<std::size_t>(feature) >= features) {
    throw Error(ErrorCode::kModelFormat, "tree node references an unknown feature", {{"feature", feature}});
  }
  nodes[static_cast<std::size_t>(index)].feature = feature;
  nodes[static_cast<std::size_t>(index)].threshold = j.at("threshold").get<double>();
  const int l = node_from_json(j.at("left"), nodes, features);
  nodes[static_cast<std::size_t>(index)].left = l;
  const int r = node_from_json(j.at("right"), nodes, features);
  nodes[static_cast<std::size_t>(index)].right = r;
  return index;
}

}  // namespace

void to_json(nlohmann::json& j, const GbtModel& model) {
  nlohmann::json trees = nlohmann::json::array();
  for (const Tree& t : model.trees) trees.push_back(node_to_json(t, 0));
  j = {{"schema_version", kModelSchemaVersion},
       {"base_score", model.base_score},
       {"eta", model.eta},
       {"max_depth", model.max_depth},
       {"feature_names", model.feature_names},
       {"trees", trees}};
}

void from_json(const nlohmann::json& j, GbtModel& model) {
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kModelSchemaVersion) {
      throw Error(ErrorCode::kModelFormat, "unsupported model schema version", {{"schema_version", version}});
    }
    model = GbtModel{};
    model.base_score = j.at("base_score").get<double>();
    model.eta = j.at("eta").get<double>();
    model.max_depth = j.at("max_depth").get<int>();
    model.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    for (const auto& t : j.at("trees")) {
      std::vector<TreeNode> nodes;
      node_from_json(t, nodes, model.feature_names.size());
      model.trees.emplace_back(std::move(nodes));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kModelFormat, std::string("malformed GBT model: ") + e.what());
  }
}

void to_json(nlohmann::json& j, const GbtParams& p) {
  j = {{"max_depth", p.max_depth},         {"nrounds", p.nrounds},     {"eta", p.eta},
       {"colsample_bytree", p.colsample_bytree}, {"subsample", p.subsample}, {"min_leaf", p.min_leaf}};
}

void from_json(const nlohmann::json& j, GbtParams& p) {
  p = GbtParams{};
  p.max_depth = j.value("max_depth", p.max_depth);
  p.nrounds = j.value("nrounds", p.nrounds);
  p.eta = j.value("eta", p.eta);
  p.colsample_bytree = j.value("colsample_bytree", p.colsample_bytree);
  p.subsample = j.value("subsample", p.subsample);
  p.min_leaf = j.value("min_leaf", p.min_leaf);
}

void to_json(nlohmann::json& j, const TuneGrid& g) {
  j = {{"max_depth", g.max_depth}, {"nrounds", g.nrounds},   {"eta", g.eta},
       {"colsample_bytree", g.colsample_bytree}, {"subsample", g.subsample}, {"min_leaf", g.min_leaf},
       {"override_bounds", g.override_bounds}};
}

void from_json(const nlohmann::json& j, TuneGrid& g) {
  g = TuneGrid{};
  g.max_depth = j.value("max_depth", g.max_depth);
  g.nrounds = j.value("nrounds", g.nrounds);
  g.eta = j.value("eta", g.eta);
  g.colsample_bytree = j.value("colsample_bytree", g.colsample_bytree);
  g.subsample = j.value("subsample", g.subsample);
  g.min_leaf = j.value("min_leaf", g.min_leaf);
  g.override_bounds = j.value("override_bounds", g.override_bounds);
}

void to_json(nlohmann::json& j, const CvReport& report) {
  nlohmann::json cells = nlohmann::json::array();
  for (const CvCell& c : report.cells) {
    cells.push_back({{"params", c.params}, {"mean_rmse", c.mean_rmse}, {"std_rmse", c.std_rmse}, {"fold_rmse", c.fold_rmse}});
  }
  j = {{"cells", cells},
       {"chosen", report.chosen},
       {"chosen_params", report.cells.empty() ? nlohmann::json(nullptr) : nlohmann::json(report.cells[report.chosen].params)},
       {"seed", report.seed},
       {"k", report.k},
       {"repeats", report.repeats},
       {"fold_fingerprint", report.fold_fingerprint}};
}

}  // namespace ebench::gbt
