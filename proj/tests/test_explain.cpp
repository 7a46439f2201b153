#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <numeric>

#include "ebench/error.hpp"
#include "ebench/explain.hpp"
#include "support.hpp"

using namespace ebench;
using namespace ebench::explain;
using gbt::GbtModel;
using gbt::Tree;
using gbt::TreeNode;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kInternal;
}

// Cover-weighted descent written from scratch: in-coalition splits follow x,
// the rest blend both children by cover.
double descend(const Tree& t, int i, const std::vector<double>& x, std::uint64_t s) {
  const TreeNode& n = t.node(i);
  if (n.is_leaf()) return n.value;
  if (s >> n.feature & 1) return descend(t, x[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right, x, s);
  const double cl = t.node(n.left).cover;
  const double cr = t.node(n.right).cover;
  return (cl * descend(t, n.left, x, s) + cr * descend(t, n.right, x, s)) / (cl + cr);
}

double model_conditional(const GbtModel& m, const std::vector<double>& x, std::uint64_t s) {
  double v = m.base_score;
  for (const Tree& t : m.trees) v += m.eta * descend(t, 0, x, s);
  return v;
}

double factorial(int n) { return std::tgamma(n + 1.0); }

// Shapley values by the permutation-weighted subset sum.
std::vector<double> brute_shap(const std::function<double(std::uint64_t)>& f, int m) {
  std::vector<double> phi(static_cast<std::size_t>(m), 0.0);
  for (int i = 0; i < m; ++i) {
    for (std::uint64_t s = 0; s < (1ULL << m); ++s) {
      if (s >> i & 1) continue;
      const int k = std::popcount(s);
      const double w = factorial(k) * factorial(m - k - 1) / factorial(m);
      phi[static_cast<std::size_t>(i)] += w * (f(s | 1ULL << i) - f(s));
    }
  }
  return phi;
}

// Shapley interaction index for i != j, halved so the pair is split evenly.
double brute_interaction(const std::function<double(std::uint64_t)>& f, int m, int i, int j) {
  double acc = 0.0;
  for (std::uint64_t s = 0; s < (1ULL << m); ++s) {
    if ((s >> i & 1) || (s >> j & 1)) continue;
    const int k = std::popcount(s);
    const double w = factorial(k) * factorial(m - k - 2) / (2.0 * factorial(m - 1));
    const std::uint64_t bi = 1ULL << i;
    const std::uint64_t bj = 1ULL << j;
    acc += w * (f(s | bi | bj) - f(s | bi) - f(s | bj) + f(s));
  }
  return acc;
}

std::vector<double> row_of(const Eigen::MatrixXd& x, Eigen::Index r) {
  std::vector<double> v(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index j = 0; j < x.cols(); ++j) v[static_cast<std::size_t>(j)] = x(r, j);
  return v;
}

TreeNode leaf(double v, double cover) {
  TreeNode n;
  n.value = v;
  n.cover = cover;
  return n;
}

TreeNode split(int feature, double thr, int l, int r, double cover) {
  TreeNode n;
  n.feature = feature;
  n.threshold = thr;
  n.left = l;
  n.right = r;
  n.cover = cover;
  return n;
}

// f = a(x0) + b(x1) + c(x0,x1) on a balanced depth-2 tree.
Tree grid_tree(int f0, int f1, double v00, double v01, double v10, double v11) {
  return Tree({split(f0, 0.5, 1, 2, 16), split(f1, 0.5, 3, 4, 8), split(f1, 0.5, 5, 6, 8), leaf(v00, 4), leaf(v01, 4),
               leaf(v10, 4), leaf(v11, 4)});
}

GbtModel hand_model(std::size_t m, std::vector<Tree> trees, double base = 0.0, double eta = 1.0) {
  GbtModel g;
  g.base_score = base;
  g.eta = eta;
  g.max_depth = 3;
  for (std::size_t j = 0; j < m; ++j) g.feature_names.push_back("f" + std::to_string(j));
  g.trees = std::move(trees);
  return g;
}

}  // namespace

TEST(ShapExact, SingleFeatureGetsTheWholeDifference) {
  const Explanation e = shap_exact([](std::uint64_t s) { return s ? 7.0 : 3.0; }, 1);
  EXPECT_EQ(e.base_value, 3.0);
  EXPECT_EQ(e.prediction, 7.0);
  EXPECT_DOUBLE_EQ(e.phi[0], 4.0);
}

TEST(ShapExact, AdditiveModelClosedForm) {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(10));
    std::vector<double> gx(static_cast<std::size_t>(m));
    std::vector<double> eg(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      gx[i] = rng.normal() * 5;
      eg[i] = rng.normal() * 5;
    }
    auto f = [&](std::uint64_t s) {
      double v = 1.5;
      for (int i = 0; i < m; ++i) v += (s >> i & 1) ? gx[i] : eg[i];
      return v;
    };
    const Explanation e = shap_exact(f, static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) EXPECT_NEAR(e.phi[i], gx[i] - eg[i], 1e-10);
  }
}

TEST(ShapExact, MatchesBruteForceOnArbitraryGames) {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = 2 + static_cast<int>(rng.below(7));
    std::vector<double> table(1ULL << m);
    for (double& v : table) v = rng.normal() * 10;
    auto f = [&](std::uint64_t s) { return table[s]; };
    const Explanation e = shap_exact(f, static_cast<std::size_t>(m));
    const std::vector<double> oracle = brute_shap(f, m);
    double sum = e.base_value;
    for (int i = 0; i < m; ++i) {
      EXPECT_NEAR(e.phi[i], oracle[i], 1e-10);
      sum += e.phi[i];
    }
    EXPECT_NEAR(sum, table.back(), 1e-9);
  }
}

TEST(ShapExact, TooManyFeaturesIsCapacityError) {
  EXPECT_EQ(code_of([] { shap_exact([](std::uint64_t) { return 0.0; }, 16); }), ErrorCode::kCapacity);
}

TEST(ShapTree, MatchesExactEnumerationOnOfficeSizedModels) {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const auto e = testkit::random_ensemble(200 + seed, 6, 20, 1 + static_cast<int>(seed % 3), seed % 2);
    for (Eigen::Index r = 0; r < 5; ++r) {
      const std::vector<double> x = row_of(e.x, r * 7);
      const Explanation fast = shap_tree(e.model, x);
      const Explanation slow = shap_exact([&](std::uint64_t s) { return model_conditional(e.model, x, s); }, 6);
      EXPECT_NEAR(fast.base_value, slow.base_value, 1e-10);
      for (int i = 0; i < 6; ++i) EXPECT_NEAR(fast.phi[i], slow.phi[i], 1e-8) << seed << " " << r << " " << i;
    }
  }
}

TEST(ShapTree, MatchesExactEnumerationUpToTenFeatures) {
  for (int m = 1; m <= 10; ++m) {
    const auto e = testkit::random_ensemble(300 + static_cast<std::uint64_t>(m), m, 8, 3, m % 2);
    const std::vector<double> x = row_of(e.x, 3);
    const Explanation fast = shap_tree(e.model, x);
    const auto oracle = brute_shap([&](std::uint64_t s) { return model_conditional(e.model, x, s); }, m);
    for (int i = 0; i < m; ++i) EXPECT_NEAR(fast.phi[i], oracle[i], 1e-8) << m << " " << i;
  }
}

TEST(ShapTree, LocalAccuracyOnRandomPairs) {
  int pairs = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto e = testkit::random_ensemble(400 + seed, 2 + static_cast<int>(seed % 9), 5 + static_cast<int>(seed % 30),
                                            1 + static_cast<int>(seed % 3), seed % 3 == 0);
    Rng rng(seed);
    for (int k = 0; k < 10; ++k, ++pairs) {
      // Half training rows, half fresh points (some outside the training box).
      std::vector<double> x = row_of(e.x, static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(e.x.rows()))));
      if (k % 2) {
        for (double& v : x) v = 6.0 * rng.uniform() - 3.0;
      }
      const Explanation ex = shap_tree(e.model, x);
      const double f = gbt::predict_gbt(e.model, x);
      double sum = ex.base_value;
      for (double p : ex.phi) sum += p;
      EXPECT_NEAR(sum, f, 1e-6 * std::max(1.0, std::abs(f)));
      EXPECT_EQ(ex.prediction, f);
    }
  }
  EXPECT_EQ(pairs, 500);
}

TEST(ShapTree, DepthZeroTreesGiveZeroAttributions) {
  const GbtModel m = hand_model(3, {Tree({leaf(2.0, 10)}), Tree({leaf(-0.5, 10)})}, 10.0, 0.3);
  const Explanation e = shap_tree(m, std::vector<double>{1, 2, 3});
  EXPECT_EQ(e.phi, std::vector<double>(3, 0.0));
  EXPECT_NEAR(e.base_value, 10.0 + 0.3 * (2.0 - 0.5), 1e-15);
}

TEST(ShapTree, SymmetricCopiesShareCredit) {
  const GbtModel m = hand_model(3, {grid_tree(0, 1, 0, 1, 1, 3)});
  for (double v : {0.0, 1.0}) {
    const Explanation e = shap_tree(m, std::vector<double>{v, v, 5.0});
    EXPECT_NEAR(e.phi[0], e.phi[1], 1e-15);
    EXPECT_EQ(e.phi[2], 0.0);
  }
}

TEST(ShapTree, UnusedFeatureIsExactlyZero) {
  const auto e = testkit::random_ensemble(43, 4, 10, 2);
  GbtModel m = e.model;
  m.feature_names.push_back("unused");
  Eigen::MatrixXd x(1, 5);
  x << 0.1, -0.3, 1.2, 0.4, 99.0;
  EXPECT_EQ(shap_tree(m, row_of(x, 0)).phi[4], 0.0);
}

TEST(ShapTree, ConsistencyUnderAddedTree) {
  const Tree base_tree = grid_tree(0, 1, 0, 2, 1, 4);
  // A stump on f0 whose right leaf is higher, so f0's marginal contribution
  // grows for every coalition at x0 = 1.
  const Tree bump({split(0, 0.5, 1, 2, 16), leaf(-1, 8), leaf(1, 8)});
  const GbtModel a = hand_model(2, {base_tree});
  const GbtModel b = hand_model(2, {base_tree, bump});
  const std::vector<double> x{1.0, 0.0};
  EXPECT_GE(shap_tree(b, x).phi[0], shap_tree(a, x).phi[0]);
}

TEST(ShapTree, ZeroCoverIsModelFormatError) {
  GbtModel m = hand_model(2, {Tree({split(0, 0.5, 1, 2, 0), leaf(1, 0), leaf(2, 0)})});
  EXPECT_EQ(code_of([&] { shap_tree(m, std::vector<double>{0.0, 0.0}); }), ErrorCode::kModelFormat);
}

TEST(ShapTree, FeatureCountMismatchIsSchemaError) {
  const GbtModel m = hand_model(3, {grid_tree(0, 1, 0, 1, 1, 3)});
  EXPECT_EQ(code_of([&] { shap_tree(m, std::vector<double>{1.0}); }), ErrorCode::kSchema);
}

TEST(ShapInteractions, MatchesBruteForceIndex) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const int m = 3 + static_cast<int>(seed % 4);
    const auto e = testkit::random_ensemble(500 + seed, m, 10, 3, seed % 2);
    const std::vector<double> x = row_of(e.x, 5);
    const InteractionExplanation ie = shap_interactions(e.model, x);
    auto f = [&](std::uint64_t s) { return model_conditional(e.model, x, s); };
    const auto phi = brute_shap(f, m);
    for (int i = 0; i < m; ++i) {
      double off = 0.0;
      for (int j = 0; j < m; ++j) {
        if (i == j) continue;
        const double oracle = brute_interaction(f, m, i, j);
        EXPECT_NEAR(ie.matrix(i, j), oracle, 1e-8) << seed << " " << i << " " << j;
        off += oracle;
      }
      EXPECT_NEAR(ie.matrix(i, i), phi[i] - off, 1e-8);
    }
  }
}

TEST(ShapInteractions, SymmetricAndRowsReconstructPhi) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int m = 2 + static_cast<int>(seed % 7);
    const auto e = testkit::random_ensemble(600 + seed, m, 15, 1 + static_cast<int>(seed % 3), seed % 2);
    const std::vector<double> x = row_of(e.x, 1);
    const InteractionExplanation ie = shap_interactions(e.model, x);
    const Explanation ex = shap_tree(e.model, x);
    for (int i = 0; i < m; ++i) {
      EXPECT_NEAR(ie.matrix.row(i).sum(), ex.phi[i], 1e-8);
      for (int j = 0; j < m; ++j) EXPECT_EQ(ie.matrix(i, j), ie.matrix(j, i));
    }
  }
}

TEST(ShapInteractions, AdditiveModelHasNoOffDiagonal) {
  // Every tree splits on one feature only.
  const GbtModel m = hand_model(3, {Tree({split(0, 0.5, 1, 2, 10), leaf(1, 4), leaf(3, 6)}),
                                    Tree({split(1, 0.2, 1, 2, 10), leaf(-2, 5), leaf(2, 5)}),
                                    Tree({split(2, 0.7, 1, 2, 10), leaf(0, 9), leaf(5, 1)})});
  const InteractionExplanation ie = shap_interactions(m, std::vector<double>{1.0, 0.0, 1.0});
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i != j) EXPECT_LE(std::abs(ie.matrix(i, j)), 1e-10);
    }
  }
}

TEST(ShapInteractions, AndTreeHasNonzeroPair) {
  const GbtModel m = hand_model(2, {grid_tree(0, 1, 0, 0, 0, 1)});
  const InteractionExplanation ie = shap_interactions(m, std::vector<double>{1.0, 1.0});
  EXPECT_NE(ie.matrix(0, 1), 0.0);
  EXPECT_EQ(ie.matrix(0, 1), ie.matrix(1, 0));
  // Balanced covers: f(S) = 1/4, 1/2, 1/2, 1, so the halved index is 1/8.
  EXPECT_NEAR(ie.matrix(0, 1), 0.125, 1e-15);
}

TEST(ShapInteractions, TooManyFeaturesIsCapacityError) {
  const GbtModel m = hand_model(65, {});
  EXPECT_EQ(code_of([&] { shap_interactions(m, std::vector<double>(65, 0.0)); }), ErrorCode::kCapacity);
}

TEST(Importance, DummyFeaturesScoreZero) {
  const GbtModel m = hand_model(5, {Tree({split(3, 0.5, 1, 2, 10), leaf(1, 5), leaf(4, 5)}),
                                    Tree({split(3, 0.2, 1, 2, 10), leaf(-1, 2), leaf(0, 8)})});
  Rng rng(44);
  const ImportanceReport r = importance(m, testkit::uniform_matrix(rng, 30, 5));
  EXPECT_EQ(r.ranking.front().feature, "f3");
  for (const auto& fi : r.ranking) {
    if (fi.index != 3) EXPECT_EQ(fi.mean_abs_shap, 0.0);
  }
}

TEST(Importance, DuplicatedRowsLeaveImportancesUnchanged) {
  const auto e = testkit::random_ensemble(45, 4, 20, 3);
  Eigen::MatrixXd twice(e.x.rows() * 2, e.x.cols());
  twice << e.x, e.x;
  const ImportanceReport a = importance(e.model, e.x);
  const ImportanceReport b = importance(e.model, twice);
  ASSERT_EQ(a.ranking.size(), b.ranking.size());
  for (std::size_t k = 0; k < a.ranking.size(); ++k) {
    EXPECT_EQ(a.ranking[k].feature, b.ranking[k].feature);
    EXPECT_NEAR(a.ranking[k].mean_abs_shap, b.ranking[k].mean_abs_shap, 1e-12);
  }
}

TEST(Importance, DominantFeatureRanksFirst) {
  Rng rng(46);
  const Eigen::MatrixXd x = testkit::uniform_matrix(rng, 200, 2);
  std::vector<double> y(200);
  for (int i = 0; i < 200; ++i) y[i] = 10.0 * x(i, 0) + x(i, 1);
  gbt::GbtParams p;
  p.max_depth = 3;
  p.nrounds = 50;
  p.eta = 0.3;
  const GbtModel m = gbt::fit_gbt(x, y, std::nullopt, p, 1, {"a", "b"});
  const ImportanceReport r = importance(m, x);
  EXPECT_EQ(r.ranking[0].feature, "a");
  EXPECT_GT(r.ranking[0].mean_abs_shap, r.ranking[1].mean_abs_shap);
}

TEST(Importance, SortedNonNegativeAndThreadIndependent) {
  const auto e = testkit::random_ensemble(47, 6, 30, 3);
  const ImportanceReport a = importance(e.model, e.x, 1);
  const ImportanceReport b = importance(e.model, e.x, 4);
  EXPECT_EQ(nlohmann::json(a), nlohmann::json(b));
  for (std::size_t k = 0; k < a.ranking.size(); ++k) {
    EXPECT_GE(a.ranking[k].mean_abs_shap, 0.0);
    if (k) EXPECT_GE(a.ranking[k - 1].mean_abs_shap, a.ranking[k].mean_abs_shap);
    EXPECT_NEAR(a.ranking[k].mean_abs_shap, a.shap.col(static_cast<Eigen::Index>(a.ranking[k].index)).cwiseAbs().mean(),
                1e-12);
  }
}

TEST(Importance, EmptyInputIsDataError) {
  const auto e = testkit::random_ensemble(48, 3, 5, 2);
  EXPECT_EQ(code_of([&] { importance(e.model, Eigen::MatrixXd(0, 3)); }), ErrorCode::kData);
}

TEST(Dependence, PairsValuesWithAttributions) {
  const auto e = testkit::random_ensemble(49, 3, 10, 2);
  const ImportanceReport r = importance(e.model, e.x);
  const auto pts = dependence(r, "f1", std::string_view("f2"));
  ASSERT_EQ(pts.size(), static_cast<std::size_t>(e.x.rows()));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_EQ(pts[i].feature_value, e.x(static_cast<Eigen::Index>(i), 1));
    EXPECT_EQ(pts[i].shap_value, r.shap(static_cast<Eigen::Index>(i), 1));
    EXPECT_EQ(*pts[i].color_value, e.x(static_cast<Eigen::Index>(i), 2));
  }
  EXPECT_FALSE(dependence(r, "f0").front().color_value.has_value());
  EXPECT_EQ(code_of([&] { dependence(r, "nope"); }), ErrorCode::kSchema);
  const nlohmann::json j = pts.front();
  EXPECT_TRUE(j.contains("feature_value") && j.contains("shap_value") && j.contains("color_value"));
}

TEST(ForceData, PartitionsBySign) {
  Explanation e;
  e.base_value = 10;
  e.phi = {2, -3, 0};
  e.feature_names = {"f1", "f2", "f3"};
  e.feature_values = {1, 2, 3};
  e.prediction = 9;
  const ForceData f = force_data(e);
  ASSERT_EQ(f.positive.size(), 1u);
  ASSERT_EQ(f.negative.size(), 1u);
  EXPECT_EQ(f.positive[0].feature, "f1");
  EXPECT_EQ(f.positive[0].phi, 2);
  EXPECT_EQ(f.negative[0].feature, "f2");
  EXPECT_EQ(f.negative[0].phi, -3);
  EXPECT_EQ(f.output_value, 9);
}

TEST(ForceData, AllZeroHasNoBars) {
  Explanation e;
  e.base_value = 4;
  e.phi = {0, 0};
  e.feature_names = {"a", "b"};
  e.feature_values = {0, 0};
  e.prediction = 4;
  const ForceData f = force_data(e);
  EXPECT_TRUE(f.positive.empty());
  EXPECT_TRUE(f.negative.empty());
  EXPECT_EQ(f.output_value, f.base_value);
}

TEST(ForceData, OfficeRowFixture) {
  Explanation e;
  e.feature_names = {"GFA", "OpenHours", "WorkersCnt", "ComputersCnt", "IsBank", "CGFA", "CDD65"};
  e.phi = {1.23, -0.87, -2.47, -2.62, -0.35, 0.66, -0.73};
  e.feature_values.assign(7, 0.0);
  e.base_value = 100;
  e.prediction = 100 + std::accumulate(e.phi.begin(), e.phi.end(), 0.0);
  const ForceData f = force_data(e);
  EXPECT_EQ(f.positive.size(), 2u);
  EXPECT_EQ(f.negative.size(), 5u);
  EXPECT_EQ(f.positive[0].feature, "GFA");
  EXPECT_EQ(f.negative[0].feature, "ComputersCnt");
  EXPECT_EQ(f.negative[4].feature, "IsBank");
  double total = f.base_value;
  for (const auto& g : {f.positive, f.negative}) {
    for (const auto& x : g) total += x.phi;
  }
  EXPECT_NEAR(total, f.output_value, 1e-12);
}

TEST(Explanation, JsonRoundTrip) {
  const auto e = testkit::random_ensemble(50, 4, 10, 3);
  const Explanation ex = shap_tree(e.model, row_of(e.x, 0));
  const Explanation back = nlohmann::json::parse(nlohmann::json(ex).dump()).get<Explanation>();
  EXPECT_EQ(back.phi, ex.phi);
  EXPECT_EQ(back.base_value, ex.base_value);
  EXPECT_EQ(back.feature_names, ex.feature_names);
  const ForceData f = force_data(ex);
  EXPECT_EQ(nlohmann::json(nlohmann::json(f).get<ForceData>()), nlohmann::json(f));
}
