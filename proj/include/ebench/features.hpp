#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ebench/datamodel.hpp"

namespace ebench::features {

// A main effect (order 1) or a product of distinct features. Constituents
// are kept sorted so a term has exactly one spelling.
class TermSpec {
 public:
  explicit TermSpec(std::vector<std::string> constituents);

  const std::vector<std::string>& constituents() const { return constituents_; }
  std::size_t order() const { return constituents_.size(); }
  // Constituents joined by ':' (e.g. "GFA:WorkersCnt").
  std::string name() const;

  bool operator==(const TermSpec&) const = default;

 private:
  std::vector<std::string> constituents_;
};

// Canonical term order: by order, then lexicographically by constituents.
bool term_less(const TermSpec& a, const TermSpec& b);

struct DesignMatrix {
  Eigen::MatrixXd values;  // n x q, no intercept column
  std::vector<TermSpec> terms;
  bool intercept = true;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t cols() const { return terms.size(); }
  std::vector<std::string> term_names() const;
};

// Order-1 design from named numeric/boolean columns. Columns keep the order
// given; rows with missing cells are rejected as a data error.
DesignMatrix base_design(const data::Dataset& dataset, const std::vector<std::string>& predictors);

// Adds every product of k distinct base features for 2 <= k <= max_order.
// Products use the raw columns. The output is in canonical term order.
DesignMatrix expand_interactions(const DesignMatrix& base, int max_order);

// Terms of the full expansion of `features` up to max_order, in canonical
// order; no data needed.
std::vector<TermSpec> interaction_terms(std::vector<std::string> features, int max_order);

// Evaluates `terms` on one row of raw feature values keyed by `features`.
Eigen::VectorXd evaluate_terms(const std::vector<TermSpec>& terms, const std::vector<std::string>& features,
                               const Eigen::VectorXd& raw);

// Number of terms p + C(p,2) + ... + C(p,m).
std::size_t expanded_term_count(std::size_t p, int max_order);

struct BudgetCheck {
  bool pass = false;
  std::size_t limit = 0;  // floor(n / 3)
};

BudgetCheck check_budget(std::size_t term_count, std::size_t sample_count);

// Every sub-term of every term is present.
bool satisfies_hierarchy(const std::vector<TermSpec>& terms);

}  // namespace ebench::features
