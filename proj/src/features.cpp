#include "ebench/features.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "ebench/error.hpp"

namespace ebench::features {
namespace {

// All k-subsets of [0, p), each ascending, in lexicographic order.
void combinations(std::size_t p, std::size_t k, std::vector<std::vector<std::size_t>>& out) {
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i;
  if (k > p) return;
  for (;;) {
    out.push_back(idx);
    std::size_t i = k;
    while (i > 0 && idx[i - 1] == p - k + (i - 1)) --i;
    if (i == 0) return;
    ++idx[i - 1];
    for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

}  // namespace

TermSpec::TermSpec(std::vector<std::string> constituents) : constituents_(std::move(constituents)) {
  if (constituents_.empty()) throw Error(ErrorCode::kArgument, "a term needs at least one feature");
  std::sort(constituents_.begin(), constituents_.end());
  if (std::adjacent_find(constituents_.begin(), constituents_.end()) != constituents_.end()) {
    throw Error(ErrorCode::kArgument, "term repeats a feature");
  }
}

std::string TermSpec::name() const {
  std::string out;
  for (std::size_t i = 0; i < constituents_.size(); ++i) {
    if (i) out += ':';
    out += constituents_[i];
  }
  return out;
}

bool term_less(const TermSpec& a, const TermSpec& b) {
  if (a.order() != b.order()) return a.order() < b.order();
  return a.constituents() < b.constituents();
}

std::vector<std::string> DesignMatrix::term_names() const {
  std::vector<std::string> names;
  names.reserve(terms.size());
  for (const TermSpec& t : terms) names.push_back(t.name());
  return names;
}

DesignMatrix base_design(const data::Dataset& dataset, const std::vector<std::string>& predictors) {
  DesignMatrix out;
  out.values.resize(static_cast<Eigen::Index>(dataset.rows()), static_cast<Eigen::Index>(predictors.size()));
  for (std::size_t j = 0; j < predictors.size(); ++j) {
    const std::vector<double> col = dataset.numeric(predictors[j]);
    for (std::size_t i = 0; i < col.size(); ++i) {
      if (std::isnan(col[i])) {
        throw Error(ErrorCode::kData, "missing value in column '" + predictors[j] + "' row " + std::to_string(i),
                    {{"column", predictors[j]}, {"row", i}});
      }
      out.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = col[i];
    }
    out.terms.emplace_back(std::vector<std::string>{predictors[j]});
  }
  return out;
}

std::vector<TermSpec> interaction_terms(std::vector<std::string> features, int max_order) {
  if (max_order < 1) throw Error(ErrorCode::kArgument, "interaction order must be >= 1", {{"order", max_order}});
  std::sort(features.begin(), features.end());
  if (std::adjacent_find(features.begin(), features.end()) != features.end()) {
    throw Error(ErrorCode::kArgument, "duplicate feature name");
  }
  std::vector<TermSpec> terms;
  const std::size_t p = features.size();
  for (std::size_t k = 1; k <= std::min<std::size_t>(static_cast<std::size_t>(max_order), p); ++k) {
    std::vector<std::vector<std::size_t>> subsets;
    combinations(p, k, subsets);
    for (const auto& subset : subsets) {
      std::vector<std::string> names;
      for (std::size_t i : subset) names.push_back(features[i]);
      terms.emplace_back(std::move(names));
    }
  }
  // Combinations of a sorted list already come out in canonical order.
  return terms;
}

DesignMatrix expand_interactions(const DesignMatrix& base, int max_order) {
  if (max_order < 1) throw Error(ErrorCode::kArgument, "interaction order must be >= 1", {{"order", max_order}});
  std::vector<std::string> features;
  std::map<std::string, Eigen::Index> column_of;
  for (std::size_t j = 0; j < base.terms.size(); ++j) {
    if (base.terms[j].order() != 1) throw Error(ErrorCode::kArgument, "base design must hold main effects only");
    features.push_back(base.terms[j].constituents().front());
    column_of[features.back()] = static_cast<Eigen::Index>(j);
  }

  DesignMatrix out;
  out.intercept = base.intercept;
  out.terms = interaction_terms(features, max_order);
  out.values.resize(base.values.rows(), static_cast<Eigen::Index>(out.terms.size()));
  for (std::size_t t = 0; t < out.terms.size(); ++t) {
    Eigen::VectorXd col = Eigen::VectorXd::Ones(base.values.rows());
    for (const std::string& f : out.terms[t].constituents()) col.array() *= base.values.col(column_of.at(f)).array();
    out.values.col(static_cast<Eigen::Index>(t)) = col;
  }
  return out;
}

Eigen::VectorXd evaluate_terms(const std::vector<TermSpec>& terms, const std::vector<std::string>& features,
                               const Eigen::VectorXd& raw) {
  std::map<std::string, double> value_of;
  for (std::size_t j = 0; j < features.size(); ++j) value_of[features[j]] = raw(static_cast<Eigen::Index>(j));
  Eigen::VectorXd out(static_cast<Eigen::Index>(terms.size()));
  for (std::size_t t = 0; t < terms.size(); ++t) {
    double v = 1.0;
    for (const std::string& f : terms[t].constituents()) {
      const auto it = value_of.find(f);
      if (it == value_of.end()) throw Error(ErrorCode::kSchema, "term uses unknown feature '" + f + "'", {{"feature", f}});
      v *= it->second;
    }
    out(static_cast<Eigen::Index>(t)) = v;
  }
  return out;
}

std::size_t expanded_term_count(std::size_t p, int max_order) {
  std::size_t total = 0;
  std::size_t binom = 1;  // C(p, k) built incrementally
  for (std::size_t k = 1; k <= static_cast<std::size_t>(std::max(max_order, 0)) && k <= p; ++k) {
    binom = binom * (p - k + 1) / k;
    total += binom;
  }
  return total;
}

BudgetCheck check_budget(std::size_t term_count, std::size_t sample_count) {
  const std::size_t limit = sample_count / 3;
  return {term_count <= limit, limit};
}

bool satisfies_hierarchy(const std::vector<TermSpec>& terms) {
  std::set<std::vector<std::string>> present;
  for (const TermSpec& t : terms) present.insert(t.constituents());
  for (const TermSpec& t : terms) {
    const auto& c = t.constituents();
    if (c.size() < 2) continue;
    // Checking the (k-1)-subsets suffices: each of those is checked in turn.
    for (std::size_t skip = 0; skip < c.size(); ++skip) {
      std::vector<std::string> sub;
      for (std::size_t i = 0; i < c.size(); ++i) {
        if (i != skip) sub.push_back(c[i]);
      }
      if (!present.count(sub)) return false;
    }
  }
  return true;
}

}  // namespace ebench::features
