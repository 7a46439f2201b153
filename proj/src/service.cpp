#include "ebench/service.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "ebench/datamodel.hpp"
#include "ebench/error.hpp"
#include "ebench/explain.hpp"
#include "httplib.h"

namespace ebench::service {
namespace {

namespace fs = std::filesystem;

nlohmann::json error_body(const Error& e) {
  return {{"code", std::string(to_string(e.code()))}, {"message", e.what()}, {"details", e.details()}};
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool valid_id(std::string_view id) {
  if (id.empty() || id.size() > 128) return false;
  for (char c : id) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_')) return false;
  }
  return true;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kNotFound, "cannot read '" + path.string() + "'", {{"path", path.string()}});
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

template <typename T>
T field(const nlohmann::json& j, const char* name) {
  const auto it = j.find(name);
  if (it == j.end()) throw Error(ErrorCode::kSchema, std::string("request lacks '") + name + "'", {{"field", name}});
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::kSchema, std::string("request field '") + name + "' has the wrong type", {{"field", name}});
  }
}

// Request prepared for training: the peer-group dataset and the parts of the
// request that define the model.
struct PreparedTraining {
  data::Dataset dataset{{}, {}};
  std::string group;
  model::TrainConfig config;
  nlohmann::json cleaning;
};

PreparedTraining prepare(const nlohmann::json& req, const ServiceConfig& sc) {
  if (!req.is_object()) throw Error(ErrorCode::kSchema, "request body must be a JSON object");
  PreparedTraining p;
  std::vector<data::ColumnSpec> schema;
  try {
    schema = field<nlohmann::json>(req, "schema").get<std::vector<data::ColumnSpec>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kSchema, std::string("invalid schema: ") + e.what());
  }
  std::string text;
  if (req.contains("csv")) {
    text = field<std::string>(req, "csv");
  } else if (req.contains("dataset_path")) {
    if (sc.data_dir.empty()) throw Error(ErrorCode::kSchema, "server-side dataset paths are disabled");
    const fs::path rel = field<std::string>(req, "dataset_path");
    for (const auto& part : rel) {
      if (part == "..") throw Error(ErrorCode::kSchema, "dataset_path may not leave the data directory");
    }
    if (rel.is_absolute()) throw Error(ErrorCode::kSchema, "dataset_path must be relative");
    text = read_file(sc.data_dir / rel);
  } else {
    throw Error(ErrorCode::kSchema, "request needs 'csv' or 'dataset_path'");
  }
  data::Dataset d = data::parse_table(text, schema);

  if (req.contains("filters")) {
    data::FilterSpec filters;
    try {
      filters = req.at("filters").get<data::FilterSpec>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kSchema, std::string("invalid filters: ") + e.what());
    }
    data::FilterResult fr = data::apply_filters(d, filters);
    nlohmann::json tallies = nlohmann::json::array();
    for (const auto& t : fr.tallies) tallies.push_back({{"clause", t.clause}, {"removed", t.removed}});
    p.cleaning["filters"] = tallies;
    d = std::move(fr.data);
  }
  p.group = req.value("group", std::string{});
  if (req.contains("peer_group")) {
    data::PeerGroupSpec spec;
    try {
      spec = req.at("peer_group").get<data::PeerGroupSpec>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kSchema, std::string("invalid peer_group: ") + e.what());
    }
    data::PeerGroupResult pg = data::build_peer_group(d, spec);
    p.cleaning["excluded_type"] = pg.excluded_type;
    p.cleaning["dropped_missing"] = pg.dropped_missing;
    p.cleaning["dropped_nonpositive_log"] = pg.dropped_nonpositive_log;
    p.group = spec.name;
    d = std::move(pg.data);
  }
  p.dataset = std::move(d);

  p.config.kind = model::parse_model_kind(field<std::string>(req, "kind"));
  p.config.cv.seed = field<std::uint64_t>(req, "seed");
  p.config.cv.threads = sc.threads;
  if (req.contains("cv")) {
    const nlohmann::json& cvj = req.at("cv");
    p.config.cv.k = cvj.value("k", p.config.cv.k);
    p.config.cv.repeats = cvj.value("repeats", p.config.cv.repeats);
  }
  if (req.contains("grid")) {
    try {
      p.config.grid = req.at("grid").get<gbt::TuneGrid>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kSchema, std::string("invalid grid: ") + e.what());
    }
  }
  p.config.use_weights = req.value("use_weights", true);
  const std::string calibration = req.value("calibration", std::string("out_of_fold"));
  if (calibration != "out_of_fold" && calibration != "in_sample") {
    throw Error(ErrorCode::kSchema, "calibration must be 'out_of_fold' or 'in_sample'");
  }
  p.config.in_sample_calibration = calibration == "in_sample";
  return p;
}

std::string model_id_for(const nlohmann::json& req, const PreparedTraining& p) {
  nlohmann::json key = req;
  key.erase("csv");
  key.erase("dataset_path");
  key["data_fingerprint"] = model::hex64(model::fingerprint(p.dataset));
  return std::string(model::to_string(p.config.kind)) + "-" + model::hex64(fnv1a(key.dump()));
}

nlohmann::json feature_schema(const model::BenchmarkModel& m) {
  nlohmann::json features = nlohmann::json::array();
  for (std::size_t i = 0; i < m.features.size(); ++i) {
    const auto& f = m.features[i];
    features.push_back({{"name", f.name},
                        {"kind", std::string(data::to_string(f.kind))},
                        {"unit", f.unit},
                        {"mean", m.feature_means[i]}});
  }
  return {{"features", features}, {"target", m.target}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ServiceConfig load_config(const std::optional<fs::path>& path, const std::function<const char*(const char*)>& getenv) {
  ServiceConfig c;
  if (path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(*path));
      c.host = j.value("host", c.host);
      c.port = j.value("port", c.port);
      c.registry_dir = j.value("registry_dir", c.registry_dir.string());
      c.data_dir = j.value("data_dir", c.data_dir.string());
      c.async_threshold = j.value("async_threshold", c.async_threshold);
      c.threads = j.value("threads", c.threads);
      c.max_body_bytes = j.value("max_body_bytes", c.max_body_bytes);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kConfiguration, std::string("invalid config file: ") + e.what(), {{"path", path->string()}});
    } catch (const Error& e) {
      throw Error(ErrorCode::kConfiguration, e.what(), {{"path", path->string()}});
    }
  }
  const auto env = getenv ? getenv : [](const char* name) -> const char* { return std::getenv(name); };
  auto number = [&](const char* name, auto& target) {
    const char* v = env(name);
    if (!v) return;
    try {
      std::size_t used = 0;
      const unsigned long long parsed = std::stoull(v, &used);
      if (used != std::string_view(v).size()) throw std::invalid_argument(name);
      target = static_cast<std::remove_reference_t<decltype(target)>>(parsed);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kConfiguration, std::string(name) + " must be a non-negative integer", {{"value", v}});
    }
  };
  if (const char* v = env("EBENCH_HOST")) c.host = v;
  number("EBENCH_PORT", c.port);
  if (const char* v = env("EBENCH_REGISTRY_DIR")) c.registry_dir = v;
  if (const char* v = env("EBENCH_DATA_DIR")) c.data_dir = v;
  number("EBENCH_ASYNC_THRESHOLD", c.async_threshold);
  number("EBENCH_THREADS", c.threads);
  number("EBENCH_MAX_BODY_BYTES", c.max_body_bytes);
  if (c.port < 0 || c.port > 65535) throw Error(ErrorCode::kConfiguration, "port out of range", {{"port", c.port}});
  return c;
}

void to_json(nlohmann::json& j, const ServiceConfig& c) {
  j = {{"host", c.host},
       {"port", c.port},
       {"registry_dir", c.registry_dir.string()},
       {"data_dir", c.data_dir.string()},
       {"async_threshold", c.async_threshold},
       {"threads", c.threads},
       {"max_body_bytes", c.max_body_bytes}};
}

// ---------------------------------------------------------------------------
// Registry

void write_atomic(const fs::path& path, std::string_view content) {
  fs::path tmp = path;
  tmp += ".tmp-" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kInternal, "cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw Error(ErrorCode::kInternal, "short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

Registry::Registry(fs::path dir) : dir_(std::move(dir)) {
  fs::create_directories(dir_);
  const fs::path index = dir_ / "index.json";
  if (fs::exists(index)) {
    try {
      const nlohmann::json stored = nlohmann::json::parse(read_file(index));
      for (const auto& e : stored.at("models")) {
        index_[e.at("id").get<std::string>()] = e;
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kConfiguration, std::string("corrupt registry index: ") + e.what());
    }
  }
}

void Registry::publish(const std::string& id, const model::ModelBundle& bundle) {
  const nlohmann::json file = {{"id", id}, {"bundle", bundle}};
  const nlohmann::json& training = bundle.training.is_object() ? bundle.training : nlohmann::json::object();
  nlohmann::json summary = {{"id", id},
                            {"group", bundle.model.group},
                            {"kind", std::string(model::to_string(bundle.model.kind))},
                            {"target", bundle.model.target},
                            {"metrics", bundle.metrics},
                            {"training",
                             {{"seed", training.value("seed", nlohmann::json())},
                              {"n", training.value("n", nlohmann::json())},
                              {"data_fingerprint", training.value("data_fingerprint", nlohmann::json())}}}};
  std::unique_lock lock(mutex_);
  write_atomic(dir_ / (id + ".json"), file.dump());
  index_[id] = summary;
  nlohmann::json models = nlohmann::json::array();
  for (const auto& [_, e] : index_) models.push_back(e);
  write_atomic(dir_ / "index.json", nlohmann::json{{"models", models}}.dump(2));
  std::lock_guard cache_lock(cache_mutex_);
  cache_[id] = std::make_shared<const model::ModelBundle>(bundle);
}

std::shared_ptr<const model::ModelBundle> Registry::get(const std::string& id) const {
  std::shared_lock lock(mutex_);
  if (!index_.count(id)) return nullptr;
  std::lock_guard cache_lock(cache_mutex_);
  if (const auto it = cache_.find(id); it != cache_.end()) return it->second;
  const nlohmann::json file = nlohmann::json::parse(read_file(dir_ / (id + ".json")));
  auto bundle = std::make_shared<const model::ModelBundle>(model::bundle_from_json(file.at("bundle")));
  cache_[id] = bundle;
  return bundle;
}

nlohmann::json Registry::entry(const std::string& id) const {
  const auto bundle = get(id);
  if (!bundle) return nullptr;
  std::shared_lock lock(mutex_);
  nlohmann::json out = index_.at(id);
  out["feature_schema"] = feature_schema(bundle->model);
  out["bundle"] = *bundle;
  return out;
}

nlohmann::json Registry::list() const {
  std::shared_lock lock(mutex_);
  nlohmann::json models = nlohmann::json::array();
  for (const auto& [_, e] : index_) models.push_back(e);
  return {{"models", models}};
}

// ---------------------------------------------------------------------------
// Api

Api::Api(ServiceConfig config) : config_(std::move(config)), registry_(config_.registry_dir) {}

Api::~Api() { wait_for_jobs(); }

void Api::wait_for_jobs() {
  std::vector<std::thread> workers;
  {
    std::lock_guard lock(jobs_mutex_);
    workers.swap(workers_);
  }
  for (auto& w : workers) w.join();
}

Response Api::handle(std::string_view method, std::string_view path, std::string_view body) {
  auto respond = [](int status, const nlohmann::json& j) { return Response{status, j.dump()}; };
  try {
    auto parse_body = [&] {
      try {
        return nlohmann::json::parse(body);
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::kSchema, std::string("request body is not valid JSON: ") + e.what());
      }
    };
    auto tail = [&](std::string_view prefix) -> std::optional<std::string> {
      if (path.substr(0, prefix.size()) != prefix) return std::nullopt;
      return std::string(path.substr(prefix.size()));
    };

    if (method == "GET") {
      if (path == "/v1/healthz") return respond(200, {{"status", "ok"}});
      if (path == "/v1/models") return respond(200, registry_.list());
      if (auto id = tail("/v1/models/")) {
        if (valid_id(*id)) {
          nlohmann::json e = registry_.entry(*id);
          if (!e.is_null()) return respond(200, e);
        }
        throw Error(ErrorCode::kNotFound, "unknown model '" + *id + "'", {{"model_id", *id}});
      }
      if (auto id = tail("/v1/jobs/")) return respond(200, job(*id));
    } else if (method == "POST") {
      if (path == "/v1/train") {
        int status = 200;
        nlohmann::json out = train(parse_body(), true, status);
        return respond(status, out);
      }
      if (path == "/v1/score") return respond(200, score(parse_body()));
      if (path == "/v1/explain") return respond(200, explain(parse_body()));
      if (path == "/v1/whatif") return respond(200, whatif(parse_body()));
    }
    const bool known = path == "/v1/healthz" || path == "/v1/models" || path == "/v1/train" || path == "/v1/score" ||
                       path == "/v1/explain" || path == "/v1/whatif" || tail("/v1/models/") || tail("/v1/jobs/");
    if (known) {
      return respond(405, {{"code", "method_not_allowed"},
                           {"message", std::string(method) + " is not supported on " + std::string(path)},
                           {"details", nlohmann::json::object()}});
    }
    throw Error(ErrorCode::kNotFound, "no such endpoint '" + std::string(path) + "'", {{"path", std::string(path)}});
  } catch (const Error& e) {
    return respond(http_status_for(e.code()), error_body(e));
  } catch (const nlohmann::json::exception& e) {
    return respond(400, error_body(Error(ErrorCode::kSchema, e.what())));
  } catch (const std::exception& e) {
    return respond(500, error_body(Error(ErrorCode::kInternal, e.what())));
  }
}

nlohmann::json Api::run_training(const nlohmann::json& request, const std::string& model_id) {
  PreparedTraining p = prepare(request, config_);
  const model::TrainResult r = model::train(p.dataset, p.config, p.group);
  registry_.publish(model_id, r.bundle);
  nlohmann::json out = {{"model_id", model_id},
                        {"kind", std::string(model::to_string(p.config.kind))},
                        {"group", p.group},
                        {"metrics", r.bundle.metrics},
                        {"fold_fingerprint", model::hex64(r.fold_fingerprint)},
                        {"calibration", r.bundle.training.value("calibration", nlohmann::json())},
                        {"cleaning", p.cleaning}};
  out["score_table"] = r.bundle.table ? nlohmann::json(*r.bundle.table) : nlohmann::json(nullptr);
  if (r.cv_report) out["cv_report"] = *r.cv_report;
  if (r.summary) out["summary"] = *r.summary;
  return out;
}

nlohmann::json Api::train(const nlohmann::json& request, bool allow_async, int& status) {
  const PreparedTraining p = prepare(request, config_);
  const std::string id = model_id_for(request, p);
  if (!allow_async || p.dataset.rows() <= config_.async_threshold) {
    status = 200;
    return run_training(request, id);
  }
  const std::string job_id = "job-" + id;
  std::lock_guard lock(jobs_mutex_);
  status = 202;
  if (!jobs_.count(job_id) || jobs_.at(job_id).status == "failed") {
    jobs_[job_id] = Job{};
    workers_.emplace_back([this, request, id, job_id] {
      {
        std::lock_guard l(jobs_mutex_);
        jobs_[job_id].status = "running";
      }
      nlohmann::json result;
      nlohmann::json error;
      try {
        result = run_training(request, id);
      } catch (const Error& e) {
        error = error_body(e);
      } catch (const std::exception& e) {
        error = error_body(Error(ErrorCode::kInternal, e.what()));
      }
      std::lock_guard l(jobs_mutex_);
      Job& j = jobs_[job_id];
      j.status = error.is_null() ? "done" : "failed";
      j.result = std::move(result);
      j.error = std::move(error);
    });
  }
  return {{"job_id", job_id}, {"model_id", id}, {"status", jobs_.at(job_id).status}};
}

nlohmann::json Api::job(const std::string& id) const {
  std::lock_guard lock(jobs_mutex_);
  const auto it = jobs_.find(id);
  if (it == jobs_.end()) throw Error(ErrorCode::kNotFound, "unknown job '" + id + "'", {{"job_id", id}});
  nlohmann::json out = {{"job_id", id}, {"status", it->second.status}};
  if (!it->second.result.is_null()) out["result"] = it->second.result;
  if (!it->second.error.is_null()) out["error"] = it->second.error;
  return out;
}

std::shared_ptr<const model::ModelBundle> Api::require_model(const nlohmann::json& request) const {
  if (!request.is_object()) throw Error(ErrorCode::kSchema, "request body must be a JSON object");
  const std::string id = field<std::string>(request, "model_id");
  auto bundle = valid_id(id) ? registry_.get(id) : nullptr;
  if (!bundle) throw Error(ErrorCode::kNotFound, "unknown model '" + id + "'", {{"model_id", id}});
  return bundle;
}

nlohmann::json Api::score(const nlohmann::json& request) {
  const auto bundle = require_model(request);
  return model::score_record(*bundle, field<nlohmann::json>(request, "record"));
}

nlohmann::json Api::explain(const nlohmann::json& request) {
  const auto bundle = require_model(request);
  const model::ParsedRecord r = model::parse_record(bundle->model, field<nlohmann::json>(request, "record"));
  const bool interactions = request.value("interactions", false);
  nlohmann::json out;
  if (interactions) out["interactions"] = model::explain_interactions(bundle->model, r.x);
  const explain::Explanation e = model::explain_record(bundle->model, r.x);
  out["model_id"] = request.at("model_id");
  out["explanation"] = e;
  out["force"] = explain::force_data(e);
  return out;
}

nlohmann::json Api::whatif(const nlohmann::json& request) {
  const auto bundle = require_model(request);
  const nlohmann::json record = field<nlohmann::json>(request, "record");
  const nlohmann::json modified = model::apply_overrides(bundle->model, record, request.value("overrides", nlohmann::json::object()));
  auto half = [&](const nlohmann::json& rec) {
    const scoring::ScoreResult s = model::score_record(*bundle, rec);
    nlohmann::json h = s;
    h["force"] = explain::force_data(model::explain_record(bundle->model, model::parse_record(bundle->model, rec).x));
    return std::pair{s.score, h};
  };
  const auto [base_score, base] = half(record);
  const auto [mod_score, mod] = half(modified);
  return {{"model_id", request.at("model_id")},
          {"baseline", base},
          {"modified", mod},
          {"delta_score", mod_score - base_score}};
}

// ---------------------------------------------------------------------------
// Server

struct Server::Impl {
  explicit Impl(Api& a) : api(a) {}
  Api& api;
  httplib::Server server;
};

Server::Server(Api& api) : impl_(std::make_unique<Impl>(api)) {
  auto handler = [this](const httplib::Request& req, httplib::Response& res) {
    const Response r = impl_->api.handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  impl_->server.set_payload_max_length(api.config().max_body_bytes);
  impl_->server.Get(".*", handler);
  impl_->server.Post(".*", handler);
  impl_->server.Put(".*", handler);
  impl_->server.Delete(".*", handler);
}

Server::~Server() { stop(); }

int Server::bind() {
  const ServiceConfig& c = impl_->api.config();
  if (c.port == 0) {
    const int port = impl_->server.bind_to_any_port(c.host);
    if (port < 0) throw Error(ErrorCode::kConfiguration, "cannot bind " + c.host);
    return port;
  }
  if (!impl_->server.bind_to_port(c.host, c.port)) {
    throw Error(ErrorCode::kConfiguration, "cannot bind " + c.host + ":" + std::to_string(c.port));
  }
  return c.port;
}

void Server::run() { impl_->server.listen_after_bind(); }

void Server::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

}  // namespace ebench::service
