#pragma once

#include "tokopt/backend.hpp"
#include "tokopt/error.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace tokopt {

struct ServiceConfig {
  std::filesystem::path data_dir = "tokopt-data";
  std::string host = "127.0.0.1";
  int port = 8080;
  BackendConfig tokenizer = BackendConfig::of_kind("toy-tokenizer");
  BackendConfig scorer = BackendConfig::of_kind("toy-scorer");
  int job_workers = 1;
  int progress_stride = 10;
  int snapshot_size = 64;  // longest side of streamed snapshots

  void validate() const;
  // `key = value` lines; keys: data-dir, host, port, tokenizer, tokenizer-seed,
  // tokenizer-variant, tokenizer-path, scorer, scorer-seed, scorer-path,
  // job-workers, progress-stride, snapshot-size. Unknown keys are rejected.
  static ServiceConfig from_key_value(const std::string& text);
  // Applies TOKOPT_<KEY> variables (dashes as underscores, upper case).
  void apply_environment();
  std::string to_key_value() const;
};

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

// HTTP status of a library error kind.
int http_status(ErrorKind kind);

// Sessions, content-addressed artifacts and the optimisation job queue behind
// the HTTP endpoints. All numeric work is delegated to the library; handle()
// is the router shared by the socket server and in-process callers.
class Service {
 public:
  explicit Service(ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  HttpResponse handle(const std::string& method, const std::string& path, const std::string& body);

  // Writes server-sent events for a job until it reaches a terminal state.
  // `sink` returns false when the client has gone away.
  void stream_job(const std::string& job_id, const std::function<bool(const std::string&)>& sink);

  // Blocks until the job is terminal; returns its status document.
  nlohmann::json wait_job(const std::string& job_id);

  // Re-executes every recorded mutation of a session and compares the
  // produced artifact ids with the recorded ones.
  nlohmann::json replay_session(const std::string& session_id);

  // Serves HTTP until stop(); port 0 picks a free port. listen() blocks, while
  // start() runs the server on a background thread and returns its port.
  void listen();
  int start();
  void stop();

  const ServiceConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace tokopt
