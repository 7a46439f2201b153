#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

namespace ebench::data {

enum class ColumnKind { kNumeric, kBoolean, kCategorical };
enum class ColumnRole { kPredictor, kTarget, kWeight, kKey, kMetadata };

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::kNumeric;
  std::string unit;
  ColumnRole role = ColumnRole::kPredictor;
  // Categorical only. Left empty, the levels are inferred from the cells
  // (sorted) so a Dataset always carries a finite list.
  std::vector<std::string> levels;

  bool operator==(const ColumnSpec&) const = default;
};

// A missing cell is std::monostate. Numeric cells hold double, boolean cells
// hold bool, categorical cells hold the level string.
using Cell = std::variant<std::monostate, double, bool, std::string>;

inline bool is_missing(const Cell& cell) { return std::holds_alternative<std::monostate>(cell); }

// Immutable column-major table. The constructor validates every cell against
// its column kind and the weight column (if any) for strict positivity.
class Dataset {
 public:
  Dataset(std::vector<ColumnSpec> schema, std::vector<std::vector<Cell>> columns);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return schema_.size(); }
  const std::vector<ColumnSpec>& schema() const { return schema_; }

  std::optional<std::size_t> find(std::string_view name) const;
  // Throws a schema error naming the column when absent.
  std::size_t index_of(std::string_view name) const;
  const ColumnSpec& spec(std::string_view name) const { return schema_[index_of(name)]; }

  const std::vector<Cell>& column(std::size_t index) const { return columns_[index]; }
  const std::vector<Cell>& column(std::string_view name) const { return columns_[index_of(name)]; }
  const Cell& at(std::size_t row, std::size_t col) const { return columns_[col][row]; }

  // Numeric or boolean column as doubles; missing cells become NaN.
  std::vector<double> numeric(std::string_view name) const;

  std::optional<std::size_t> target_index() const;
  std::optional<std::size_t> weight_index() const;
  // Per-row sample weights from the weight-role column, if declared.
  std::optional<std::vector<double>> weights() const;

  Dataset select_rows(std::span<const std::size_t> rows) const;

 private:
  std::vector<ColumnSpec> schema_;
  std::vector<std::vector<Cell>> columns_;
  std::size_t rows_ = 0;
};

// ---------------------------------------------------------------------------
// CSV

Dataset load_table(const std::filesystem::path& path, const std::vector<ColumnSpec>& schema);
Dataset parse_table(std::string_view text, const std::vector<ColumnSpec>& schema);
// RFC-4180 output; numbers use the shortest round-trip representation.
void write_table(const Dataset& dataset, std::ostream& out);
std::string format_number(double value);

// ---------------------------------------------------------------------------
// Merging

struct JoinStats {
  std::size_t matched = 0;
  std::size_t dropped_duplicate = 0;  // rows (both sides) whose key was not unique
  std::size_t unmatched_energy = 0;
  std::size_t unmatched_assessor = 0;
  std::size_t missing_key = 0;

  std::size_t unmatched() const { return unmatched_energy + unmatched_assessor; }
};

struct MergeResult {
  Dataset data;
  JoinStats stats;
};

// Inner join on a unique key. Keys that repeat on either side are dropped
// entirely. Output rows follow the energy side's order.
MergeResult merge_sources(const Dataset& energy, const Dataset& assessor, std::string_view key_column);

// ---------------------------------------------------------------------------
// Filters

struct RangeClause {
  std::string column;
  std::optional<double> min;
  std::optional<double> max;
};

// Percent units: low = 1, high = 99 keeps the 1st..99th percentile band.
struct PercentileClause {
  std::string column;
  double low = 0.0;
  double high = 100.0;
};

struct RequiredValueClause {
  std::string column;
  std::vector<std::string> values;
};

struct FilterSpec {
  std::vector<RangeClause> ranges;
  std::vector<PercentileClause> percentiles;
  std::vector<RequiredValueClause> required;
};

struct ClauseTally {
  std::string clause;
  std::size_t removed = 0;
};

struct FilterResult {
  Dataset data;
  std::vector<ClauseTally> tallies;  // one per clause, declaration order
};

// Percentile of `values` with linear interpolation between closest ranks
// (rank h = (n-1)*p/100). `values` need not be sorted.
double percentile(std::vector<double> values, double pct);

// Each removed row is tallied under the first clause it fails. Missing cells
// never fail a clause.
FilterResult apply_filters(const Dataset& dataset, const FilterSpec& filters);

// ---------------------------------------------------------------------------
// Peer groups

struct PeerGroupSpec {
  std::string name;
  std::string type_column;
  std::vector<std::string> labels;  // raw property-type labels mapped into the group
  std::vector<std::string> predictors;
  std::string target;
  // Predictors replaced by their natural log (rows with non-positive values
  // are dropped).
  std::vector<std::string> log_transform;
};

struct PeerGroupResult {
  Dataset data;
  std::size_t excluded_type = 0;
  std::size_t dropped_missing = 0;
  std::map<std::string, std::size_t> missing_by_column;
  std::size_t dropped_nonpositive_log = 0;
  // Predictor columns of `data` after one-hot expansion, in order.
  std::vector<std::string> predictors;
};

PeerGroupResult build_peer_group(const Dataset& dataset, const PeerGroupSpec& spec);

// ---------------------------------------------------------------------------
// JSON documents

void to_json(nlohmann::json& j, const ColumnSpec& spec);
void from_json(const nlohmann::json& j, ColumnSpec& spec);
void to_json(nlohmann::json& j, const FilterSpec& spec);
void from_json(const nlohmann::json& j, FilterSpec& spec);
void to_json(nlohmann::json& j, const PeerGroupSpec& spec);
void from_json(const nlohmann::json& j, PeerGroupSpec& spec);
void to_json(nlohmann::json& j, const JoinStats& stats);

std::string_view to_string(ColumnKind kind);
std::string_view to_string(ColumnRole role);

}  // namespace ebench::data
