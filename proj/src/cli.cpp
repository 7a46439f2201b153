#include "ebench/cli.hpp"

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "ebench/datamodel.hpp"
#include "ebench/error.hpp"
#include "ebench/model.hpp"
#include "ebench/render.hpp"
#include "ebench/service.hpp"

namespace ebench::cli {
namespace {

namespace fs = std::filesystem;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kNotFound, "cannot read '" + path.string() + "'", {{"path", path.string()}});
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kSchema, "'" + path.string() + "' is not valid JSON: " + e.what(), {{"path", path.string()}});
  }
}

template <typename T>
T decode(const nlohmann::json& j, const std::string& what) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kSchema, "invalid " + what + ": " + e.what());
  }
}

// A record is either inline JSON or a path to a JSON file.
nlohmann::json read_record(const std::string& arg) {
  if (!arg.empty() && arg.front() == '{') {
    try {
      return nlohmann::json::parse(arg);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kSchema, std::string("record is not valid JSON: ") + e.what());
    }
  }
  return read_json(arg);
}

fs::path default_schema_path(const fs::path& data) {
  fs::path p = data;
  p.replace_extension(".schema.json");
  return p;
}

data::Dataset load_dataset(const fs::path& data, const std::string& schema_arg) {
  const fs::path schema_path = schema_arg.empty() ? default_schema_path(data) : fs::path(schema_arg);
  const auto schema = decode<std::vector<data::ColumnSpec>>(read_json(schema_path), "schema");
  return data::load_table(data, schema);
}

model::ModelBundle load_bundle(const fs::path& path) {
  return model::bundle_from_json(read_json(path));
}

std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

struct TrainFlags {
  std::string data;
  std::string schema;
  std::vector<std::string> kinds;
  std::uint64_t seed = 0;
  std::string grid;
  std::size_t k = 10;
  std::size_t repeats = 2;
  unsigned threads = 1;
  bool no_weights = false;
  bool in_sample = false;
};

void add_train_flags(CLI::App* sub, TrainFlags& f, const std::string& kind_flag) {
  sub->add_option("--data", f.data, "Cleaned peer-group CSV")->required();
  sub->add_option("--schema", f.schema, "Column schema JSON (default: <data>.schema.json)");
  sub->add_option(kind_flag, f.kinds, "Model kinds: mlr, mlri2, mlri3, mlri4, gbt")->required();
  sub->add_option("--seed", f.seed, "Seed for folds and boosting")->required();
  sub->add_option("--grid", f.grid, "TuneGrid JSON for gbt");
  sub->add_option("--k", f.k, "Cross-validation folds")->capture_default_str();
  sub->add_option("--repeats", f.repeats, "Grid-search repeats")->capture_default_str();
  sub->add_option("--threads", f.threads, "Worker threads (0 = all cores)")->capture_default_str();
  sub->add_flag("--no-weights", f.no_weights, "Ignore the weight column");
}

model::TrainConfig config_from(const TrainFlags& f) {
  model::TrainConfig c;
  c.cv.k = f.k;
  c.cv.repeats = f.repeats;
  c.cv.seed = f.seed;
  c.cv.threads = f.threads;
  c.use_weights = !f.no_weights;
  c.in_sample_calibration = f.in_sample;
  if (!f.grid.empty()) c.grid = decode<gbt::TuneGrid>(read_json(f.grid), "grid");
  return c;
}

std::vector<model::ModelKind> kinds_from(const std::vector<std::string>& names) {
  std::vector<model::ModelKind> out;
  for (const auto& n : names) out.push_back(model::parse_model_kind(n));
  return out;
}

// ---------------------------------------------------------------------------

struct IngestFlags {
  std::string energy;
  std::string assessor;
  std::string key;
  std::string schema;
  std::string filters;
  std::vector<std::string> groups;
  std::string out;
};

int do_ingest(const IngestFlags& f, std::ostream& out) {
  const nlohmann::json schemas = read_json(f.schema);
  const auto energy_schema = decode<std::vector<data::ColumnSpec>>(schemas.at("energy"), "energy schema");
  data::Dataset merged = data::load_table(f.energy, energy_schema);
  nlohmann::json report = {{"energy_rows", merged.rows()}};
  if (!f.assessor.empty()) {
    if (f.key.empty()) throw Error(ErrorCode::kSchema, "--key is required with --assessor");
    if (!schemas.contains("assessor")) throw Error(ErrorCode::kSchema, "schema file lacks 'assessor'");
    const auto assessor_schema = decode<std::vector<data::ColumnSpec>>(schemas.at("assessor"), "assessor schema");
    const data::Dataset assessor = data::load_table(f.assessor, assessor_schema);
    report["assessor_rows"] = assessor.rows();
    data::MergeResult m = data::merge_sources(merged, assessor, f.key);
    report["join"] = m.stats;
    merged = std::move(m.data);
  }
  if (!f.filters.empty()) {
    data::FilterResult fr = data::apply_filters(merged, decode<data::FilterSpec>(read_json(f.filters), "filters"));
    nlohmann::json tallies = nlohmann::json::array();
    for (const auto& t : fr.tallies) tallies.push_back({{"clause", t.clause}, {"removed", t.removed}});
    report["filters"] = tallies;
    merged = std::move(fr.data);
  }
  report["rows_after_filters"] = merged.rows();

  std::vector<data::PeerGroupSpec> specs;
  for (const auto& g : f.groups) {
    const nlohmann::json j = read_json(g);
    if (j.is_array()) {
      for (const auto& s : j) specs.push_back(decode<data::PeerGroupSpec>(s, "peer group"));
    } else {
      specs.push_back(decode<data::PeerGroupSpec>(j, "peer group"));
    }
  }
  if (specs.empty()) throw Error(ErrorCode::kSchema, "at least one --group is required");

  fs::create_directories(f.out);
  for (const auto& spec : specs) {
    const data::PeerGroupResult pg = data::build_peer_group(merged, spec);
    std::ostringstream csv;
    data::write_table(pg.data, csv);
    service::write_atomic(fs::path(f.out) / (spec.name + ".csv"), csv.str());
    service::write_atomic(fs::path(f.out) / (spec.name + ".schema.json"), dump(pg.data.schema()));
    nlohmann::json r = report;
    r["peer_group"] = {{"name", spec.name},
                       {"rows", pg.data.rows()},
                       {"excluded_type", pg.excluded_type},
                       {"dropped_missing", pg.dropped_missing},
                       {"missing_by_column", pg.missing_by_column},
                       {"dropped_nonpositive_log", pg.dropped_nonpositive_log},
                       {"predictors", pg.predictors}};
    service::write_atomic(fs::path(f.out) / (spec.name + ".report.json"), dump(r));
    out << spec.name << ": " << pg.data.rows() << " rows -> " << (fs::path(f.out) / (spec.name + ".csv")).string() << '\n';
  }
  return 0;
}

int do_train(const TrainFlags& f, const std::string& out_dir, std::ostream& out) {
  const data::Dataset d = load_dataset(f.data, f.schema);
  const model::TrainConfig base = config_from(f);
  fs::create_directories(out_dir);
  nlohmann::json summary = {{"seed", f.seed},
                            {"data", fs::path(f.data).filename().string()},
                            {"data_fingerprint", model::hex64(model::fingerprint(d))},
                            {"models", nlohmann::json::object()}};
  std::string group = fs::path(f.data).stem().string();
  for (model::ModelKind kind : kinds_from(f.kinds)) {
    model::TrainConfig c = base;
    c.kind = kind;
    const model::TrainResult r = model::train(d, c, group);
    const std::string name = std::string(model::to_string(kind));
    const fs::path file = fs::path(out_dir) / (name + ".model.json");
    service::write_atomic(file, dump(r.bundle));
    nlohmann::json entry = {{"model_file", file.filename().string()},
                            {"metrics", r.bundle.metrics},
                            {"fold_fingerprint", model::hex64(r.fold_fingerprint)}};
    entry["score_table"] = r.bundle.table ? nlohmann::json(*r.bundle.table) : nlohmann::json(nullptr);
    if (r.cv_report) entry["chosen_params"] = r.cv_report->cells[r.cv_report->chosen].params;
    summary["models"][name] = entry;
    out << "== " << name << " ==\n" << scoring::render_text(r.bundle.metrics);
    if (r.summary) out << linreg::render_text(*r.summary);
  }
  service::write_atomic(fs::path(out_dir) / "summary.json", dump(summary));
  return 0;
}

int do_compare(const TrainFlags& f, const std::string& format, const std::string& out_file, std::ostream& out) {
  const data::Dataset d = load_dataset(f.data, f.schema);
  const std::vector<model::CompareRow> rows = model::compare(d, kinds_from(f.kinds), config_from(f));
  std::string text;
  if (format == "json") {
    text = dump({{"seed", f.seed}, {"rows", rows}});
  } else {
    text = model::render_markdown(rows);
  }
  if (out_file.empty()) {
    out << text;
  } else {
    service::write_atomic(out_file, text);
  }
  return 0;
}

int do_score(const std::string& model_path, const std::string& record, std::ostream& out) {
  const model::ModelBundle b = load_bundle(model_path);
  out << nlohmann::json(model::score_record(b, read_record(record))).dump() << '\n';
  return 0;
}

int do_explain(const std::string& model_path, const std::string& record, bool interactions, const std::string& format,
               const std::string& out_file, std::ostream& out) {
  const model::ModelBundle b = load_bundle(model_path);
  const model::ParsedRecord r = model::parse_record(b.model, read_record(record));
  const explain::Explanation e = model::explain_record(b.model, r.x);
  const explain::ForceData force = explain::force_data(e);
  std::string text;
  if (format == "text") {
    text = render::force_text(force);
  } else if (format == "svg") {
    text = render::force_svg(force);
  } else {
    nlohmann::json j = {{"explanation", e}, {"force", force}};
    if (interactions) j["interactions"] = model::explain_interactions(b.model, r.x);
    text = dump(j);
  }
  if (interactions && format != "json") model::explain_interactions(b.model, r.x);
  if (out_file.empty()) {
    out << text;
  } else {
    service::write_atomic(out_file, text);
  }
  return 0;
}

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop.store(true); }

int do_serve(const std::string& config_path, std::ostream& out) {
  const service::ServiceConfig cfg =
      service::load_config(config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path));
  service::Api api(cfg);
  service::Server server(api);
  const int port = server.bind();
  out << "listening on " << cfg.host << ':' << port << std::endl;
  g_stop.store(false);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::thread watcher([&] {
    while (!g_stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
  });
  server.run();
  g_stop.store(true);
  watcher.join();
  api.wait_for_jobs();
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Building energy benchmarking: ingest, train, compare, explain, serve"};
  app.name("bench");
  app.require_subcommand(1);

  IngestFlags ingest;
  CLI::App* ingest_cmd = app.add_subcommand("ingest", "Merge, clean and split raw data into peer-group CSVs");
  ingest_cmd->add_option("--energy", ingest.energy, "Energy (or survey) CSV")->required();
  ingest_cmd->add_option("--assessor", ingest.assessor, "Assessor CSV joined on --key");
  ingest_cmd->add_option("--key", ingest.key, "Join key column");
  ingest_cmd->add_option("--schema", ingest.schema, "JSON with 'energy' and 'assessor' column lists")->required();
  ingest_cmd->add_option("--filters", ingest.filters, "FilterSpec JSON");
  ingest_cmd->add_option("--group", ingest.groups, "PeerGroupSpec JSON (object or array)")->required();
  ingest_cmd->add_option("--out", ingest.out, "Output directory")->required();

  TrainFlags train;
  std::string train_out;
  CLI::App* train_cmd = app.add_subcommand("train", "Fit models and write model bundles with score tables");
  add_train_flags(train_cmd, train, "--kind");
  train_cmd->add_flag("--in-sample-calibration", train.in_sample, "Calibrate on in-sample predictions");
  train_cmd->add_option("--out", train_out, "Output directory")->required();

  TrainFlags cmp;
  std::string cmp_format = "md";
  std::string cmp_out;
  CLI::App* compare_cmd = app.add_subcommand("compare", "Cross-validated metrics per model kind on shared folds");
  add_train_flags(compare_cmd, cmp, "--kinds");
  compare_cmd->add_option("--format", cmp_format, "md or json")->check(CLI::IsMember({"md", "json"}))->capture_default_str();
  compare_cmd->add_option("--out", cmp_out, "Write the table to a file");

  std::string score_model;
  std::string score_record_arg;
  CLI::App* score_cmd = app.add_subcommand("score", "Score one building record");
  score_cmd->add_option("--model", score_model, "Model bundle JSON")->required();
  score_cmd->add_option("--record", score_record_arg, "Record JSON file or inline object")->required();

  std::string ex_model;
  std::string ex_record;
  bool ex_interactions = false;
  std::string ex_format = "json";
  std::string ex_out;
  CLI::App* explain_cmd = app.add_subcommand("explain", "Shapley explanation of one record");
  explain_cmd->add_option("--model", ex_model, "Model bundle JSON")->required();
  explain_cmd->add_option("--record", ex_record, "Record JSON file or inline object")->required();
  explain_cmd->add_flag("--interactions", ex_interactions, "Include the interaction matrix (tree models)");
  explain_cmd->add_option("--format", ex_format, "json, text or svg")
      ->check(CLI::IsMember({"json", "text", "svg"}))
      ->capture_default_str();
  explain_cmd->add_option("--out", ex_out, "Write to a file");

  std::string serve_config;
  CLI::App* serve_cmd = app.add_subcommand("serve", "Run the HTTP service until interrupted");
  serve_cmd->add_option("--config", serve_config, "Service config JSON");

  std::vector<const char*> argv{"bench"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*ingest_cmd) return do_ingest(ingest, out);
    if (*train_cmd) return do_train(train, train_out, out);
    if (*compare_cmd) return do_compare(cmp, cmp_format, cmp_out, out);
    if (*score_cmd) return do_score(score_model, score_record_arg, out);
    if (*explain_cmd) return do_explain(ex_model, ex_record, ex_interactions, ex_format, ex_out, out);
    if (*serve_cmd) return do_serve(serve_config, out);
  } catch (const Error& e) {
    err << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    if (!e.details().empty()) err << e.details().dump() << '\n';
    return exit_code_for(e.code());
  } catch (const nlohmann::json::exception& e) {
    err << "error [schema]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error [internal]: " << e.what() << '\n';
    return 5;
  }
  return 5;
}

}  // namespace ebench::cli
