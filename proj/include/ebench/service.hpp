#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "ebench/model.hpp"
#include "json.hpp"

namespace ebench::service {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path registry_dir = "registry";
  // Directory that "dataset_path" in /v1/train is resolved against; empty
  // disables server-side paths.
  std::filesystem::path data_dir;
  std::size_t async_threshold = 50000;  // rows; larger training runs become jobs
  unsigned threads = 1;                 // workers for cross-validation
  std::size_t max_body_bytes = 64u << 20;
};

// Reads a JSON config file (any subset of the fields) and applies the
// EBENCH_* environment overrides. `getenv` is injectable for tests.
ServiceConfig load_config(const std::optional<std::filesystem::path>& path,
                          const std::function<const char*(const char*)>& getenv = nullptr);
void to_json(nlohmann::json& j, const ServiceConfig& c);

// Directory of <id>.json model entries plus index.json. Every file is
// written to a temporary name and renamed into place.
class Registry {
 public:
  explicit Registry(std::filesystem::path dir);

  void publish(const std::string& id, const model::ModelBundle& bundle);
  // nullptr when unknown.
  std::shared_ptr<const model::ModelBundle> get(const std::string& id) const;
  nlohmann::json entry(const std::string& id) const;
  nlohmann::json list() const;

 private:
  std::filesystem::path dir_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, nlohmann::json> index_;
  mutable std::mutex cache_mutex_;
  mutable std::map<std::string, std::shared_ptr<const model::ModelBundle>> cache_;
};

void write_atomic(const std::filesystem::path& path, std::string_view content);

struct Response {
  int status = 200;
  std::string body;
};

// Transport-independent /v1 request handling; the HTTP server and the tests
// both go through handle().
class Api {
 public:
  explicit Api(ServiceConfig config);
  ~Api();
  Api(const Api&) = delete;
  Api& operator=(const Api&) = delete;

  Response handle(std::string_view method, std::string_view path, std::string_view body);

  const ServiceConfig& config() const { return config_; }
  // Blocks until every background job has finished.
  void wait_for_jobs();

 private:
  nlohmann::json train(const nlohmann::json& request, bool allow_async, int& status);
  nlohmann::json run_training(const nlohmann::json& request, const std::string& model_id);
  nlohmann::json score(const nlohmann::json& request);
  nlohmann::json explain(const nlohmann::json& request);
  nlohmann::json whatif(const nlohmann::json& request);
  nlohmann::json job(const std::string& id) const;
  std::shared_ptr<const model::ModelBundle> require_model(const nlohmann::json& request) const;

  struct Job {
    std::string status = "queued";
    nlohmann::json result;
    nlohmann::json error;
  };

  ServiceConfig config_;
  Registry registry_;
  mutable std::mutex jobs_mutex_;
  std::map<std::string, Job> jobs_;
  std::vector<std::thread> workers_;
};

// Blocking HTTP/1.1 server over Api. stop() may be called from any thread.
class Server {
 public:
  explicit Server(Api& api);
  ~Server();

  // Binds config host:port (port 0 picks a free one) and returns the port.
  int bind();
  void run();  // until stop()
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ebench::service
