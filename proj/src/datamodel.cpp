#include "ebench/datamodel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "ebench/error.hpp"

namespace ebench::data {
namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

bool is_missing_token(std::string_view s) {
  if (s.empty()) return true;
  const std::string l = lower(s);
  return l == "na" || l == "n/a" || l == "not available";
}

std::optional<double> parse_double(std::string_view s) {
  double value = 0.0;
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(value)) return std::nullopt;
  return value;
}

std::optional<bool> parse_bool(std::string_view s) {
  const std::string l = lower(s);
  if (l == "yes" || l == "y" || l == "true" || l == "1") return true;
  if (l == "no" || l == "n" || l == "false" || l == "0") return false;
  return std::nullopt;
}

struct Record {
  std::vector<std::string> fields;
  std::size_t line = 0;  // 1-based physical line where the record starts
};

// RFC-4180 record splitter. Quoted fields may span lines and use "" escapes.
std::vector<Record> split_csv(std::string_view text) {
  std::vector<Record> records;
  Record current;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;
  current.line = 1;

  auto end_field = [&] {
    current.fields.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    const bool blank = current.fields.size() == 1 && trim(current.fields[0]).empty();
    if (!blank) records.push_back(std::move(current));
    current = Record{};
    current.line = line;
  };

  if (text.size() >= 3 && static_cast<unsigned char>(text[0]) == 0xEF &&
      static_cast<unsigned char>(text[1]) == 0xBB && static_cast<unsigned char>(text[2]) == 0xBF) {
    text.remove_prefix(3);
  }

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field_started || trim(field).empty()) {
          field.clear();
          in_quotes = true;
          field_started = true;
        } else {
          field.push_back(c);
        }
        break;
      case ',':
        end_field();
        break;
      case '\r':
        break;
      case '\n':
        ++line;
        end_record();
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (in_quotes) {
    throw Error(ErrorCode::kRow, "unterminated quoted field starting on line " + std::to_string(current.line),
                {{"line", current.line}});
  }
  if (!field.empty() || !current.fields.empty()) end_record();
  return records;
}

std::string key_text(const Cell& cell) {
  if (const auto* d = std::get_if<double>(&cell)) {
    if (std::floor(*d) == *d && std::fabs(*d) < 1e15) {
      std::ostringstream os;
      os << static_cast<long long>(*d);
      return os.str();
    }
    return format_number(*d);
  }
  if (const auto* b = std::get_if<bool>(&cell)) return *b ? "1" : "0";
  if (const auto* s = std::get_if<std::string>(&cell)) return *s;
  return {};
}

std::string cell_text(const Cell& cell) {
  if (const auto* d = std::get_if<double>(&cell)) return format_number(*d);
  if (const auto* b = std::get_if<bool>(&cell)) return *b ? "yes" : "no";
  if (const auto* s = std::get_if<std::string>(&cell)) return *s;
  return {};
}

void write_field(std::ostream& out, const std::string& value) {
  if (value.find_first_of(",\"\n\r") == std::string::npos) {
    out << value;
    return;
  }
  out << '"';
  for (char c : value) {
    if (c == '"') out << '"';
    out << c;
  }
  out << '"';
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(std::vector<ColumnSpec> schema, std::vector<std::vector<Cell>> columns)
    : schema_(std::move(schema)), columns_(std::move(columns)) {
  if (schema_.size() != columns_.size()) {
    throw Error(ErrorCode::kSchema, "column count does not match schema");
  }
  rows_ = columns_.empty() ? 0 : columns_.front().size();

  std::set<std::string> names;
  int targets = 0;
  int weights = 0;
  for (std::size_t c = 0; c < schema_.size(); ++c) {
    if (schema_[c].kind == ColumnKind::kCategorical && schema_[c].levels.empty()) {
      std::set<std::string> seen;
      for (const Cell& cell : columns_[c]) {
        if (const auto* s = std::get_if<std::string>(&cell)) seen.insert(*s);
      }
      schema_[c].levels.assign(seen.begin(), seen.end());
    }
    const ColumnSpec& spec = schema_[c];
    if (!names.insert(spec.name).second) {
      throw Error(ErrorCode::kSchema, "duplicate column '" + spec.name + "'", {{"column", spec.name}});
    }
    if (spec.role == ColumnRole::kTarget) ++targets;
    if (spec.role == ColumnRole::kWeight) ++weights;
    if (columns_[c].size() != rows_) {
      throw Error(ErrorCode::kSchema, "ragged column '" + spec.name + "'", {{"column", spec.name}});
    }
    for (std::size_t r = 0; r < rows_; ++r) {
      const Cell& cell = columns_[c][r];
      if (is_missing(cell)) continue;
      bool ok = false;
      switch (spec.kind) {
        case ColumnKind::kNumeric:
          ok = std::holds_alternative<double>(cell) && std::isfinite(std::get<double>(cell));
          break;
        case ColumnKind::kBoolean:
          ok = std::holds_alternative<bool>(cell);
          break;
        case ColumnKind::kCategorical:
          ok = std::holds_alternative<std::string>(cell) &&
               std::find(spec.levels.begin(), spec.levels.end(), std::get<std::string>(cell)) != spec.levels.end();
          break;
      }
      if (!ok) {
        throw Error(ErrorCode::kSchema, "cell in row " + std::to_string(r) + " does not conform to column '" + spec.name + "'",
                    {{"column", spec.name}, {"row", r}});
      }
    }
    if (spec.role == ColumnRole::kWeight) {
      if (spec.kind != ColumnKind::kNumeric) {
        throw Error(ErrorCode::kSchema, "weight column '" + spec.name + "' must be numeric", {{"column", spec.name}});
      }
      for (std::size_t r = 0; r < rows_; ++r) {
        const Cell& cell = columns_[c][r];
        if (is_missing(cell) || !(std::get<double>(cell) > 0.0)) {
          throw Error(ErrorCode::kData, "weight in row " + std::to_string(r) + " is not strictly positive",
                      {{"column", spec.name}, {"row", r}});
        }
      }
    }
  }
  if (targets > 1) throw Error(ErrorCode::kSchema, "more than one target column");
  if (weights > 1) throw Error(ErrorCode::kSchema, "more than one weight column");
}

std::optional<std::size_t> Dataset::find(std::string_view name) const {
  for (std::size_t c = 0; c < schema_.size(); ++c) {
    if (schema_[c].name == name) return c;
  }
  return std::nullopt;
}

std::size_t Dataset::index_of(std::string_view name) const {
  if (auto c = find(name)) return *c;
  throw Error(ErrorCode::kSchema, "missing column '" + std::string(name) + "'", {{"column", std::string(name)}});
}

std::vector<double> Dataset::numeric(std::string_view name) const {
  const std::size_t c = index_of(name);
  if (schema_[c].kind == ColumnKind::kCategorical) {
    throw Error(ErrorCode::kSchema, "column '" + std::string(name) + "' is not numeric", {{"column", std::string(name)}});
  }
  std::vector<double> out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) {
    const Cell& cell = columns_[c][r];
    if (const auto* d = std::get_if<double>(&cell)) {
      out[r] = *d;
    } else if (const auto* b = std::get_if<bool>(&cell)) {
      out[r] = *b ? 1.0 : 0.0;
    } else {
      out[r] = std::nan("");
    }
  }
  return out;
}

std::optional<std::size_t> Dataset::target_index() const {
  for (std::size_t c = 0; c < schema_.size(); ++c) {
    if (schema_[c].role == ColumnRole::kTarget) return c;
  }
  return std::nullopt;
}

std::optional<std::size_t> Dataset::weight_index() const {
  for (std::size_t c = 0; c < schema_.size(); ++c) {
    if (schema_[c].role == ColumnRole::kWeight) return c;
  }
  return std::nullopt;
}

std::optional<std::vector<double>> Dataset::weights() const {
  const auto c = weight_index();
  if (!c) return std::nullopt;
  return numeric(schema_[*c].name);
}

Dataset Dataset::select_rows(std::span<const std::size_t> rows) const {
  std::vector<std::vector<Cell>> columns(schema_.size());
  for (std::size_t c = 0; c < schema_.size(); ++c) {
    columns[c].reserve(rows.size());
    for (std::size_t r : rows) columns[c].push_back(columns_[c].at(r));
  }
  return Dataset(schema_, std::move(columns));
}

// ---------------------------------------------------------------------------
// CSV

Dataset parse_table(std::string_view text, const std::vector<ColumnSpec>& schema) {
  const std::vector<Record> records = split_csv(text);
  if (records.empty()) throw Error(ErrorCode::kEmptyInput, "input has no header");
  const Record& header = records.front();

  std::vector<std::size_t> source(schema.size());
  for (std::size_t c = 0; c < schema.size(); ++c) {
    const auto it = std::find_if(header.fields.begin(), header.fields.end(),
                                 [&](const std::string& h) { return trim(h) == schema[c].name; });
    if (it == header.fields.end()) {
      throw Error(ErrorCode::kSchema, "missing column '" + schema[c].name + "'", {{"column", schema[c].name}});
    }
    source[c] = static_cast<std::size_t>(it - header.fields.begin());
  }
  if (records.size() == 1) throw Error(ErrorCode::kEmptyInput, "input has a header but no rows");

  std::vector<ColumnSpec> out_schema = schema;
  std::vector<std::vector<Cell>> columns(schema.size());
  for (auto& col : columns) col.reserve(records.size() - 1);

  for (std::size_t i = 1; i < records.size(); ++i) {
    const Record& rec = records[i];
    if (rec.fields.size() != header.fields.size()) {
      throw Error(ErrorCode::kRow,
                  "line " + std::to_string(rec.line) + ": expected " + std::to_string(header.fields.size()) +
                      " fields, found " + std::to_string(rec.fields.size()),
                  {{"line", rec.line}});
    }
    for (std::size_t c = 0; c < schema.size(); ++c) {
      const ColumnSpec& spec = schema[c];
      const std::string_view raw = trim(rec.fields[source[c]]);
      auto row_error = [&](const std::string& what) {
        return Error(ErrorCode::kRow,
                     "line " + std::to_string(rec.line) + ", column '" + spec.name + "': " + what,
                     {{"line", rec.line}, {"column", spec.name}, {"value", std::string(raw)}});
      };
      if (is_missing_token(raw)) {
        if (spec.role == ColumnRole::kWeight) throw row_error("missing weight");
        columns[c].emplace_back(std::monostate{});
        continue;
      }
      switch (spec.kind) {
        case ColumnKind::kNumeric: {
          const auto v = parse_double(raw);
          if (!v) throw row_error("'" + std::string(raw) + "' is not a number");
          if (spec.role == ColumnRole::kWeight && !(*v > 0.0)) throw row_error("weight must be positive");
          columns[c].emplace_back(*v);
          break;
        }
        case ColumnKind::kBoolean: {
          const auto v = parse_bool(raw);
          if (!v) throw row_error("'" + std::string(raw) + "' is not a yes/no value");
          columns[c].emplace_back(*v);
          break;
        }
        case ColumnKind::kCategorical: {
          std::string level(raw);
          if (!spec.levels.empty() &&
              std::find(spec.levels.begin(), spec.levels.end(), level) == spec.levels.end()) {
            throw row_error("'" + level + "' is not a declared level");
          }
          columns[c].emplace_back(std::move(level));
          break;
        }
      }
    }
  }

  return Dataset(std::move(out_schema), std::move(columns));
}

Dataset load_table(const std::filesystem::path& path, const std::vector<ColumnSpec>& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::kSchema, "cannot open '" + path.string() + "'", {{"path", path.string()}});
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_table(buffer.str(), schema);
}

std::string format_number(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

void write_table(const Dataset& dataset, std::ostream& out) {
  for (std::size_t c = 0; c < dataset.cols(); ++c) {
    if (c) out << ',';
    write_field(out, dataset.schema()[c].name);
  }
  out << '\n';
  for (std::size_t r = 0; r < dataset.rows(); ++r) {
    for (std::size_t c = 0; c < dataset.cols(); ++c) {
      if (c) out << ',';
      write_field(out, cell_text(dataset.at(r, c)));
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Merging

MergeResult merge_sources(const Dataset& energy, const Dataset& assessor, std::string_view key_column) {
  const std::size_t ekey = energy.index_of(key_column);
  const std::size_t akey = assessor.index_of(key_column);

  std::vector<ColumnSpec> schema = energy.schema();
  std::vector<std::size_t> assessor_cols;
  for (std::size_t c = 0; c < assessor.cols(); ++c) {
    if (c == akey) continue;
    const ColumnSpec& spec = assessor.schema()[c];
    if (energy.find(spec.name)) {
      throw Error(ErrorCode::kSchema, "column '" + spec.name + "' appears in both sources", {{"column", spec.name}});
    }
    schema.push_back(spec);
    assessor_cols.push_back(c);
  }

  JoinStats stats;
  auto count_keys = [&](const Dataset& d, std::size_t key) {
    std::unordered_map<std::string, std::vector<std::size_t>> rows;
    for (std::size_t r = 0; r < d.rows(); ++r) {
      const Cell& cell = d.at(r, key);
      if (is_missing(cell)) {
        ++stats.missing_key;
        continue;
      }
      rows[key_text(cell)].push_back(r);
    }
    return rows;
  };
  const auto energy_keys = count_keys(energy, ekey);
  const auto assessor_keys = count_keys(assessor, akey);

  for (const auto& [key, rows] : assessor_keys) {
    if (rows.size() > 1) stats.dropped_duplicate += rows.size();
  }

  std::vector<std::vector<Cell>> columns(schema.size());
  std::set<std::string> matched_keys;
  for (std::size_t r = 0; r < energy.rows(); ++r) {
    const Cell& cell = energy.at(r, ekey);
    if (is_missing(cell)) continue;
    const std::string key = key_text(cell);
    const auto& erows = energy_keys.at(key);
    if (erows.size() > 1) {
      ++stats.dropped_duplicate;
      continue;
    }
    const auto it = assessor_keys.find(key);
    if (it == assessor_keys.end()) {
      ++stats.unmatched_energy;
      continue;
    }
    if (it->second.size() > 1) {
      // Counted with the assessor duplicates; the energy row goes too.
      ++stats.dropped_duplicate;
      continue;
    }
    ++stats.matched;
    matched_keys.insert(key);
    for (std::size_t c = 0; c < energy.cols(); ++c) columns[c].push_back(energy.at(r, c));
    for (std::size_t i = 0; i < assessor_cols.size(); ++i) {
      columns[energy.cols() + i].push_back(assessor.at(it->second.front(), assessor_cols[i]));
    }
  }
  for (const auto& [key, rows] : assessor_keys) {
    if (rows.size() == 1 && !matched_keys.count(key)) {
      const auto e = energy_keys.find(key);
      if (e == energy_keys.end()) {
        ++stats.unmatched_assessor;
      } else if (e->second.size() > 1) {
        ++stats.dropped_duplicate;
      }
    }
  }
  return {Dataset(std::move(schema), std::move(columns)), stats};
}

// ---------------------------------------------------------------------------
// Filters

double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw Error(ErrorCode::kData, "percentile of an empty sample");
  if (pct < 0.0 || pct > 100.0) throw Error(ErrorCode::kArgument, "percentile outside [0, 100]");
  std::sort(values.begin(), values.end());
  const double h = static_cast<double>(values.size() - 1) * pct / 100.0;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

FilterResult apply_filters(const Dataset& dataset, const FilterSpec& filters) {
  struct Check {
    std::string label;
    std::size_t column;
    double lo;
    double hi;
    const std::vector<std::string>* allowed = nullptr;
  };
  std::vector<Check> checks;
  auto require_numeric = [&](const std::string& name) {
    const std::size_t c = dataset.index_of(name);
    if (dataset.schema()[c].kind != ColumnKind::kNumeric) {
      throw Error(ErrorCode::kSchema, "filter column '" + name + "' is not numeric", {{"column", name}});
    }
    return c;
  };
  constexpr double kInf = std::numeric_limits<double>::infinity();

  for (const RangeClause& clause : filters.ranges) {
    const std::size_t c = require_numeric(clause.column);
    checks.push_back({"range:" + clause.column, c, clause.min.value_or(-kInf), clause.max.value_or(kInf)});
  }
  for (const PercentileClause& clause : filters.percentiles) {
    const std::size_t c = require_numeric(clause.column);
    if (!(clause.low < clause.high) || clause.low < 0.0 || clause.high > 100.0) {
      throw Error(ErrorCode::kArgument, "percentile clause on '" + clause.column + "' needs 0 <= low < high <= 100",
                  {{"column", clause.column}});
    }
    std::vector<double> present;
    for (double v : dataset.numeric(clause.column)) {
      if (!std::isnan(v)) present.push_back(v);
    }
    double lo = -kInf;
    double hi = kInf;
    if (!present.empty()) {
      lo = percentile(present, clause.low);
      hi = percentile(present, clause.high);
    }
    checks.push_back({"percentile:" + clause.column, c, lo, hi});
  }
  for (const RequiredValueClause& clause : filters.required) {
    const std::size_t c = dataset.index_of(clause.column);
    if (dataset.schema()[c].kind != ColumnKind::kCategorical) {
      throw Error(ErrorCode::kSchema, "required-value column '" + clause.column + "' is not categorical",
                  {{"column", clause.column}});
    }
    checks.push_back({"required:" + clause.column, c, 0.0, 0.0, &clause.values});
  }

  std::vector<ClauseTally> tallies;
  for (const Check& check : checks) tallies.push_back({check.label, 0});

  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < dataset.rows(); ++r) {
    bool kept = true;
    for (std::size_t k = 0; k < checks.size() && kept; ++k) {
      const Check& check = checks[k];
      const Cell& cell = dataset.at(r, check.column);
      if (is_missing(cell)) continue;
      if (check.allowed) {
        const auto& level = std::get<std::string>(cell);
        kept = std::find(check.allowed->begin(), check.allowed->end(), level) != check.allowed->end();
      } else {
        const double v = std::get<double>(cell);
        kept = v >= check.lo && v <= check.hi;
      }
      if (!kept) ++tallies[k].removed;
    }
    if (kept) keep.push_back(r);
  }
  return {dataset.select_rows(keep), std::move(tallies)};
}

// ---------------------------------------------------------------------------
// Peer groups

PeerGroupResult build_peer_group(const Dataset& dataset, const PeerGroupSpec& spec) {
  if (spec.predictors.empty()) throw Error(ErrorCode::kArgument, "peer group '" + spec.name + "' has no predictors");
  const std::size_t type_col = dataset.index_of(spec.type_column);
  const std::size_t target_col = dataset.index_of(spec.target);
  if (dataset.schema()[target_col].kind != ColumnKind::kNumeric) {
    throw Error(ErrorCode::kSchema, "target '" + spec.target + "' must be numeric", {{"column", spec.target}});
  }
  std::vector<std::size_t> predictor_cols;
  for (const std::string& p : spec.predictors) predictor_cols.push_back(dataset.index_of(p));
  for (const std::string& p : spec.log_transform) {
    if (std::find(spec.predictors.begin(), spec.predictors.end(), p) == spec.predictors.end()) {
      throw Error(ErrorCode::kSchema, "log-transform column '" + p + "' is not a predictor", {{"column", p}});
    }
    if (dataset.spec(p).kind != ColumnKind::kNumeric) {
      throw Error(ErrorCode::kSchema, "log-transform column '" + p + "' is not numeric", {{"column", p}});
    }
  }
  const std::optional<std::size_t> weight_col = dataset.weight_index();

  PeerGroupResult result{Dataset({}, {}), 0, 0, {}, 0, {}};
  for (const std::string& p : spec.predictors) result.missing_by_column[p] = 0;
  result.missing_by_column[spec.target] = 0;

  auto label_of = [&](std::size_t r) { return key_text(dataset.at(r, type_col)); };
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < dataset.rows(); ++r) {
    const std::string label = label_of(r);
    if (std::find(spec.labels.begin(), spec.labels.end(), label) == spec.labels.end()) {
      ++result.excluded_type;
      continue;
    }
    bool missing = false;
    for (std::size_t i = 0; i < predictor_cols.size(); ++i) {
      if (is_missing(dataset.at(r, predictor_cols[i]))) {
        ++result.missing_by_column[spec.predictors[i]];
        missing = true;
      }
    }
    if (is_missing(dataset.at(r, target_col))) {
      ++result.missing_by_column[spec.target];
      missing = true;
    }
    if (missing) {
      ++result.dropped_missing;
      continue;
    }
    bool nonpositive = false;
    for (const std::string& p : spec.log_transform) {
      if (!(std::get<double>(dataset.at(r, dataset.index_of(p))) > 0.0)) nonpositive = true;
    }
    if (nonpositive) {
      ++result.dropped_nonpositive_log;
      continue;
    }
    keep.push_back(r);
  }
  if (keep.empty()) {
    throw Error(ErrorCode::kEmptyPeerGroup, "peer group '" + spec.name + "' has no surviving rows",
                {{"group", spec.name}, {"excluded_type", result.excluded_type}, {"dropped_missing", result.dropped_missing}});
  }

  std::vector<ColumnSpec> schema;
  std::vector<std::vector<Cell>> columns;
  auto copy_column = [&](std::size_t c, ColumnRole role) {
    ColumnSpec s = dataset.schema()[c];
    s.role = role;
    std::vector<Cell> col;
    col.reserve(keep.size());
    for (std::size_t r : keep) col.push_back(dataset.at(r, c));
    schema.push_back(std::move(s));
    columns.push_back(std::move(col));
  };

  for (std::size_t c = 0; c < dataset.cols(); ++c) {
    if (dataset.schema()[c].role == ColumnRole::kKey && c != type_col) copy_column(c, ColumnRole::kKey);
  }
  {
    ColumnSpec s{spec.type_column, ColumnKind::kCategorical, "", ColumnRole::kMetadata, {spec.name}};
    schema.push_back(std::move(s));
    columns.emplace_back(keep.size(), Cell{spec.name});
  }
  for (std::size_t i = 0; i < predictor_cols.size(); ++i) {
    const std::size_t c = predictor_cols[i];
    const ColumnSpec& source = dataset.schema()[c];
    const bool log = std::find(spec.log_transform.begin(), spec.log_transform.end(), source.name) != spec.log_transform.end();
    if (source.kind != ColumnKind::kCategorical) {
      copy_column(c, ColumnRole::kPredictor);
      if (log) {
        for (Cell& cell : columns.back()) cell = std::log(std::get<double>(cell));
        schema.back().unit = "ln(" + schema.back().unit + ")";
      }
      result.predictors.push_back(source.name);
      continue;
    }
    // One-hot with the most frequent level as the dropped reference.
    std::map<std::string, std::size_t> counts;
    for (std::size_t r : keep) ++counts[std::get<std::string>(dataset.at(r, c))];
    std::string reference;
    std::size_t best = 0;
    for (const std::string& level : source.levels) {
      const auto it = counts.find(level);
      if (it != counts.end() && it->second > best) {
        best = it->second;
        reference = level;
      }
    }
    for (const std::string& level : source.levels) {
      if (level == reference || !counts.count(level)) continue;
      const std::string name = source.name + "=" + level;
      schema.push_back({name, ColumnKind::kBoolean, "", ColumnRole::kPredictor, {}});
      std::vector<Cell> col;
      col.reserve(keep.size());
      for (std::size_t r : keep) col.emplace_back(std::get<std::string>(dataset.at(r, c)) == level);
      columns.push_back(std::move(col));
      result.predictors.push_back(name);
    }
  }
  copy_column(target_col, ColumnRole::kTarget);
  if (weight_col) copy_column(*weight_col, ColumnRole::kWeight);

  result.data = Dataset(std::move(schema), std::move(columns));
  return result;
}

// ---------------------------------------------------------------------------
// JSON

std::string_view to_string(ColumnKind kind) {
  switch (kind) {
    case ColumnKind::kNumeric: return "numeric";
    case ColumnKind::kBoolean: return "boolean";
    case ColumnKind::kCategorical: return "categorical";
  }
  return "numeric";
}

std::string_view to_string(ColumnRole role) {
  switch (role) {
    case ColumnRole::kPredictor: return "predictor";
    case ColumnRole::kTarget: return "target";
    case ColumnRole::kWeight: return "weight";
    case ColumnRole::kKey: return "key";
    case ColumnRole::kMetadata: return "metadata";
  }
  return "predictor";
}

void to_json(nlohmann::json& j, const ColumnSpec& spec) {
  j = {{"name", spec.name}, {"kind", to_string(spec.kind)}, {"unit", spec.unit}, {"role", to_string(spec.role)}};
  if (spec.kind == ColumnKind::kCategorical) j["levels"] = spec.levels;
}

void from_json(const nlohmann::json& j, ColumnSpec& spec) {
  spec.name = j.at("name").get<std::string>();
  const std::string kind = j.value("kind", std::string("numeric"));
  if (kind == "numeric") spec.kind = ColumnKind::kNumeric;
  else if (kind == "boolean") spec.kind = ColumnKind::kBoolean;
  else if (kind == "categorical") spec.kind = ColumnKind::kCategorical;
  else throw Error(ErrorCode::kSchema, "unknown column kind '" + kind + "'", {{"column", spec.name}});
  spec.unit = j.value("unit", std::string());
  const std::string role = j.value("role", std::string("predictor"));
  if (role == "predictor") spec.role = ColumnRole::kPredictor;
  else if (role == "target") spec.role = ColumnRole::kTarget;
  else if (role == "weight") spec.role = ColumnRole::kWeight;
  else if (role == "key") spec.role = ColumnRole::kKey;
  else if (role == "metadata") spec.role = ColumnRole::kMetadata;
  else throw Error(ErrorCode::kSchema, "unknown column role '" + role + "'", {{"column", spec.name}});
  spec.levels = j.value("levels", std::vector<std::string>{});
}

void to_json(nlohmann::json& j, const FilterSpec& spec) {
  j = nlohmann::json::object();
  j["ranges"] = nlohmann::json::array();
  for (const auto& r : spec.ranges) {
    nlohmann::json c = {{"column", r.column}};
    if (r.min) c["min"] = *r.min;
    if (r.max) c["max"] = *r.max;
    j["ranges"].push_back(c);
  }
  j["percentiles"] = nlohmann::json::array();
  for (const auto& p : spec.percentiles) {
    j["percentiles"].push_back({{"column", p.column}, {"low", p.low}, {"high", p.high}});
  }
  j["required"] = nlohmann::json::array();
  for (const auto& r : spec.required) j["required"].push_back({{"column", r.column}, {"values", r.values}});
}

void from_json(const nlohmann::json& j, FilterSpec& spec) {
  spec = FilterSpec{};
  for (const auto& c : j.value("ranges", nlohmann::json::array())) {
    RangeClause r{c.at("column").get<std::string>(), std::nullopt, std::nullopt};
    if (c.contains("min")) r.min = c.at("min").get<double>();
    if (c.contains("max")) r.max = c.at("max").get<double>();
    spec.ranges.push_back(std::move(r));
  }
  for (const auto& c : j.value("percentiles", nlohmann::json::array())) {
    spec.percentiles.push_back({c.at("column").get<std::string>(), c.at("low").get<double>(), c.at("high").get<double>()});
  }
  for (const auto& c : j.value("required", nlohmann::json::array())) {
    spec.required.push_back({c.at("column").get<std::string>(), c.at("values").get<std::vector<std::string>>()});
  }
}

void to_json(nlohmann::json& j, const PeerGroupSpec& spec) {
  j = {{"name", spec.name},           {"type_column", spec.type_column}, {"labels", spec.labels},
       {"predictors", spec.predictors}, {"target", spec.target},           {"log_transform", spec.log_transform}};
}

void from_json(const nlohmann::json& j, PeerGroupSpec& spec) {
  spec.name = j.at("name").get<std::string>();
  spec.type_column = j.at("type_column").get<std::string>();
  spec.labels = j.at("labels").get<std::vector<std::string>>();
  spec.predictors = j.at("predictors").get<std::vector<std::string>>();
  spec.target = j.at("target").get<std::string>();
  spec.log_transform = j.value("log_transform", std::vector<std::string>{});
}

void to_json(nlohmann::json& j, const JoinStats& stats) {
  j = {{"matched", stats.matched},
       {"dropped_duplicate", stats.dropped_duplicate},
       {"unmatched", stats.unmatched()},
       {"unmatched_energy", stats.unmatched_energy},
       {"unmatched_assessor", stats.unmatched_assessor},
       {"missing_key", stats.missing_key}};
}

}  // namespace ebench::data
