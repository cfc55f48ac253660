#include "tokopt/service.hpp"

#include "tokopt/analysis.hpp"
#include "tokopt/edit.hpp"
#include "tokopt/error.hpp"
#include "tokopt/io.hpp"
#include "tokopt/objectives.hpp"
#include "tokopt/optimizer.hpp"
#include "tokopt/random.hpp"

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <ctime>
#include <deque>
#include <map>
#include <mutex>
#include <random>
#include <regex>
#include <sstream>
#include <thread>

namespace tokopt {

namespace fs = std::filesystem;
using nlohmann::json;

// --- configuration --------------------------------------------------------------

void ServiceConfig::validate() const {
  auto check = [](bool ok, const char* key, const char* why) {
    if (!ok) fail(ErrorKind::kConfiguration, std::string("service config: key '") + key + "' " + why);
  };
  check(!data_dir.empty(), "data-dir", "must not be empty");
  check(port >= 0 && port <= 65535, "port", "must lie in [0, 65535]");
  check(job_workers >= 1, "job-workers", "must be >= 1");
  check(progress_stride >= 1, "progress-stride", "must be >= 1");
  check(snapshot_size >= 1, "snapshot-size", "must be >= 1");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<T>(v);
  } catch (const std::exception&) {
    fail(ErrorKind::kConfiguration,
         "service config: key '" + key + "' expects an integer, got '" + value + "'");
  }
}

void set_service_key(ServiceConfig& c, const std::string& key, const std::string& value) {
  if (key == "data-dir") c.data_dir = value;
  else if (key == "host") c.host = value;
  else if (key == "port") c.port = parse_number<int>(key, value);
  else if (key == "tokenizer") c.tokenizer.kind = value;
  else if (key == "tokenizer-seed") c.tokenizer.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "tokenizer-variant") c.tokenizer.variant = value;
  else if (key == "tokenizer-path") c.tokenizer.path = value;
  else if (key == "scorer") c.scorer.kind = value;
  else if (key == "scorer-seed") c.scorer.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "scorer-path") c.scorer.path = value;
  else if (key == "job-workers") c.job_workers = parse_number<int>(key, value);
  else if (key == "progress-stride") c.progress_stride = parse_number<int>(key, value);
  else if (key == "snapshot-size") c.snapshot_size = parse_number<int>(key, value);
  else fail(ErrorKind::kConfiguration, "service config: unknown key '" + key + "'");
}

const char* const kServiceKeys[] = {"data-dir",       "host",           "port",
                                    "tokenizer",      "tokenizer-seed", "tokenizer-variant",
                                    "tokenizer-path", "scorer",         "scorer-seed",
                                    "scorer-path",    "job-workers",    "progress-stride",
                                    "snapshot-size"};

}  // namespace

ServiceConfig ServiceConfig::from_key_value(const std::string& text) {
  ServiceConfig c;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line.substr(0, line.find('#')));
    if (t.empty()) continue;
    const auto eq = t.find('=');
    require(eq != std::string::npos, ErrorKind::kConfiguration,
            "service config line " + std::to_string(line_no) + ": expected 'key = value'");
    set_service_key(c, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  c.validate();
  return c;
}

void ServiceConfig::apply_environment() {
  for (const char* key : kServiceKeys) {
    std::string name = "TOKOPT_";
    for (const char* p = key; *p; ++p) name += *p == '-' ? '_' : static_cast<char>(std::toupper(*p));
    if (const char* value = std::getenv(name.c_str())) set_service_key(*this, key, value);
  }
  validate();
}

std::string ServiceConfig::to_key_value() const {
  std::ostringstream out;
  out << "data-dir = " << data_dir.string() << "\n"
      << "host = " << host << "\n"
      << "port = " << port << "\n"
      << "tokenizer = " << tokenizer.kind << "\n"
      << "tokenizer-seed = " << tokenizer.seed << "\n"
      << "tokenizer-variant = " << tokenizer.variant << "\n"
      << "tokenizer-path = " << tokenizer.path << "\n"
      << "scorer = " << scorer.kind << "\n"
      << "scorer-seed = " << scorer.seed << "\n"
      << "scorer-path = " << scorer.path << "\n"
      << "job-workers = " << job_workers << "\n"
      << "progress-stride = " << progress_stride << "\n"
      << "snapshot-size = " << snapshot_size << "\n";
  return out.str();
}

int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidInput:
      return 400;
    case ErrorKind::kNotFound:
      return 404;
    case ErrorKind::kInvalidState:
    case ErrorKind::kCancelled:
      return 409;
    case ErrorKind::kConfiguration:
    case ErrorKind::kDegenerateClass:
    case ErrorKind::kDegenerateMask:
      return 422;
    case ErrorKind::kBackendUnavailable:
      return 503;
    case ErrorKind::kNumerical:
      return 500;
  }
  return 500;
}

// --- internals -------------------------------------------------------------------

namespace {

struct ApiError : std::runtime_error {
  ApiError(int s, const std::string& msg) : std::runtime_error(msg), status(s) {}
  int status;
};

std::string now_iso8601() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fresh_id(const char* prefix) {
  static std::atomic<std::uint64_t> counter{0};
  static const std::uint64_t salt = std::random_device{}();
  const auto now = std::chrono::steady_clock::now().time_since_epoch().count();
  return std::string(prefix) +
         to_hex(mix_seed(salt ^ static_cast<std::uint64_t>(now) ^ mix_seed(++counter)));
}

// Append-only, content-addressed: id = <kind>_<fnv1a64 of the bytes>.
class ArtifactStore {
 public:
  explicit ArtifactStore(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  std::string put(const std::string& bytes, const std::string& kind) {
    const std::string id = kind + "_" + to_hex(fnv1a64(bytes));
    const fs::path path = file_of(id);
    if (!fs::exists(path)) write_file_atomic(path, bytes);
    return id;
  }
  std::string put_png(const ImageTensor& image) {
    const auto bytes = encode_png(image);
    return put(std::string(bytes.begin(), bytes.end()), "img");
  }
  std::string put_json(const json& doc) { return put(doc.dump(), "json"); }

  std::string get(const std::string& id, std::string* content_type = nullptr) const {
    static const std::regex kId("^(img|json|csv)_[0-9a-f]{16}$");
    if (!std::regex_match(id, kId)) throw ApiError(404, "unknown artifact '" + id + "'");
    const fs::path path = file_of(id);
    if (!fs::exists(path)) throw ApiError(404, "unknown artifact '" + id + "'");
    if (content_type) {
      const std::string kind = id.substr(0, id.find('_'));
      *content_type = kind == "img" ? "image/png" : kind == "csv" ? "text/csv" : "application/json";
    }
    return read_file_text(path);
  }
  ImageTensor get_image(const std::string& id, int channels = 3) const {
    const std::string bytes = get(id);
    if (id.rfind("img_", 0) != 0) throw ApiError(422, "artifact '" + id + "' is not an image");
    return decode_png(std::vector<std::uint8_t>(bytes.begin(), bytes.end()), channels);
  }
  json get_json(const std::string& id) const { return json::parse(get(id)); }

 private:
  fs::path file_of(const std::string& id) const {
    const std::string kind = id.substr(0, id.find('_'));
    return dir_ / (id + (kind == "img" ? ".png" : kind == "csv" ? ".csv" : ".json"));
  }
  fs::path dir_;
};

struct Session {
  std::string id;
  std::string created_at;
  BackendConfig tokenizer_config;
  BackendConfig scorer_config;
  std::shared_ptr<const TokenizerBackend> tokenizer;
  std::shared_ptr<const ScorerBackend> scorer;
  std::string backend_error;
  std::vector<std::string> artifacts;
  json manifest = json::array();
  std::map<std::string, std::string> idempotency;

  json to_json() const {
    return {{"id", id},
            {"created_at", created_at},
            {"tokenizer", tokenizer_config.to_json()},
            {"scorer", scorer_config.to_json()},
            {"variant", tokenizer ? tokenizer->variant() : tokenizer_config.kind},
            {"backend_status", backend_error.empty() ? "loaded" : "unavailable: " + backend_error},
            {"artifacts", artifacts},
            {"manifest", manifest},
            {"idempotency", idempotency}};
  }

  const TokenizerBackend& need_tokenizer() const {
    if (!tokenizer) throw ApiError(503, "tokenizer backend unavailable: " + backend_error);
    return *tokenizer;
  }
  std::shared_ptr<const ScorerBackend> need_scorer() const {
    if (!scorer) throw ApiError(503, "scorer backend unavailable: " + backend_error);
    return scorer;
  }
};

// Everything needed to run one optimisation; built and validated at submission.
struct JobPlan {
  std::string kind;
  OptimizerConfig config;
  std::optional<ImageTensor> seed_image;
  std::shared_ptr<const Objective> objective;
  std::shared_ptr<const InpaintContext> inpaint;
  std::shared_ptr<const TokenizerBackend> tokenizer;
};

struct Job {
  std::string id;
  std::string session_id;
  std::string kind;
  json request;
  std::string status = "queued";
  int step = 0;
  int iterations = 0;
  double value = 0.0;
  int progress_events = 0;
  json result;
  std::string error;
  std::vector<std::string> events;  // formatted SSE frames
  std::stop_source stop;
  std::shared_ptr<JobPlan> plan;

  bool terminal() const { return status == "done" || status == "failed" || status == "cancelled"; }
  json to_json() const {
    json doc = {{"id", id},
                {"session", session_id},
                {"kind", kind},
                {"status", status},
                {"progress", {{"step", step}, {"iterations", iterations}, {"value", value}}},
                {"progress_events", progress_events},
                {"request", request}};
    if (!result.is_null()) doc["result"] = result;
    if (!error.empty()) doc["error"] = error;
    return doc;
  }
};

std::string sse(const std::string& event, const json& data) {
  return "event: " + event + "\ndata: " + data.dump() + "\n\n";
}

json parse_body(const std::string& body) {
  if (trim(body).empty()) return json::object();
  json doc;
  try {
    doc = json::parse(body);
  } catch (const json::parse_error& e) {
    throw ApiError(400, std::string("malformed JSON body: ") + e.what());
  }
  if (!doc.is_object()) throw ApiError(400, "request body must be a JSON object");
  return doc;
}

template <typename T>
T body_field(const json& body, const char* key) {
  if (!body.contains(key)) throw ApiError(400, std::string("missing field '") + key + "'");
  try {
    return body.at(key).get<T>();
  } catch (const json::exception&) {
    throw ApiError(400, std::string("field '") + key + "' has the wrong type");
  }
}

std::vector<std::uint8_t> decode_payload(const std::string& b64) {
  try {
    return base64_decode(b64);
  } catch (const Error& e) {
    throw ApiError(400, std::string("bad base64 payload: ") + e.what());
  }
}

ImageTensor downscale(const ImageTensor& image, int longest) {
  const int side = std::max(image.height(), image.width());
  if (side <= longest) return image;
  const int h = std::max(1, image.height() * longest / side);
  const int w = std::max(1, image.width() * longest / side);
  return Resizer(image.height(), image.width(), h, w).apply(image).clamped();
}

}  // namespace

struct Service::Impl {
  ServiceConfig config;
  ArtifactStore artifacts;
  std::mutex mu;
  std::condition_variable cv;
  std::map<std::string, std::shared_ptr<Session>> sessions;
  std::map<std::string, std::shared_ptr<Job>> jobs;
  std::deque<std::string> queue;
  bool shutting_down = false;
  std::vector<std::jthread> workers;
  httplib::Server server;
  std::jthread server_thread;

  explicit Impl(ServiceConfig c)
      : config(std::move(c)), artifacts(config.data_dir / "artifacts") {
    fs::create_directories(config.data_dir / "sessions");
    fs::create_directories(config.data_dir / "jobs");
    load_persisted();
    for (int i = 0; i < config.job_workers; ++i) {
      workers.emplace_back([this] { worker_loop(); });
    }
  }

  ~Impl() {
    {
      std::lock_guard lock(mu);
      shutting_down = true;
      for (auto& [id, job] : jobs) job->stop.request_stop();
    }
    cv.notify_all();
    server.stop();
    workers.clear();
  }

  // --- persistence -----------------------------------------------------------

  void load_backends(Session& s) {
    try {
      s.tokenizer = load_tokenizer(s.tokenizer_config);
      s.scorer = load_scorer(s.scorer_config);
      s.backend_error.clear();
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kBackendUnavailable) throw;
      s.tokenizer.reset();
      s.scorer.reset();
      s.backend_error = e.what();
    }
  }

  void load_persisted() {
    for (const auto& entry : fs::directory_iterator(config.data_dir / "sessions")) {
      if (entry.path().extension() != ".json") continue;
      try {
        const json doc = json::parse(read_file_text(entry.path()));
        auto s = std::make_shared<Session>();
        s->id = doc.at("id");
        s->created_at = doc.at("created_at");
        s->tokenizer_config = BackendConfig::from_json(doc.at("tokenizer"));
        s->scorer_config = BackendConfig::from_json(doc.at("scorer"));
        s->artifacts = doc.at("artifacts").get<std::vector<std::string>>();
        s->manifest = doc.at("manifest");
        s->idempotency = doc.value("idempotency", std::map<std::string, std::string>{});
        load_backends(*s);
        sessions[s->id] = s;
      } catch (const std::exception&) {
        // A corrupt session file is skipped rather than blocking startup.
      }
    }
    for (const auto& entry : fs::directory_iterator(config.data_dir / "jobs")) {
      if (entry.path().extension() != ".json") continue;
      try {
        const json doc = json::parse(read_file_text(entry.path()));
        auto job = std::make_shared<Job>();
        job->id = doc.at("id");
        job->session_id = doc.at("session");
        job->kind = doc.at("kind");
        job->request = doc.at("request");
        job->status = doc.at("status");
        job->step = doc.at("progress").at("step");
        job->iterations = doc.at("progress").at("iterations");
        job->value = doc.at("progress").at("value");
        job->progress_events = doc.value("progress_events", 0);
        if (doc.contains("result")) job->result = doc["result"];
        job->error = doc.value("error", "");
        if (!job->terminal()) {
          job->status = "failed";
          job->error = "interrupted by a service restart";
        }
        jobs[job->id] = job;
      } catch (const std::exception&) {
      }
    }
  }

  void save_session(const Session& s) {
    write_file_atomic(config.data_dir / "sessions" / (s.id + ".json"), s.to_json().dump(2));
  }
  void save_job(const Job& j) {
    write_file_atomic(config.data_dir / "jobs" / (j.id + ".json"), j.to_json().dump(2));
  }

  std::shared_ptr<Session> session(const std::string& id) {
    std::lock_guard lock(mu);
    const auto it = sessions.find(id);
    if (it == sessions.end()) throw ApiError(404, "unknown session '" + id + "'");
    return it->second;
  }
  std::shared_ptr<Job> job(const std::string& id) {
    std::lock_guard lock(mu);
    const auto it = jobs.find(id);
    if (it == jobs.end()) throw ApiError(404, "unknown job '" + id + "'");
    return it->second;
  }

  void record(Session& s, json entry, const std::vector<std::string>& produced) {
    std::lock_guard lock(mu);
    record_locked(s, std::move(entry), produced);
  }

  void record_locked(Session& s, json entry, const std::vector<std::string>& produced) {
    for (const auto& id : produced)
      if (std::find(s.artifacts.begin(), s.artifacts.end(), id) == s.artifacts.end())
        s.artifacts.push_back(id);
    s.manifest.push_back(std::move(entry));
    save_session(s);
  }

  ImageTensor session_image(const Session& s, const std::string& id) {
    ImageTensor image = artifacts.get_image(id);
    const ImageShape expected = s.need_tokenizer().image_shape();
    if (image.shape() != expected) {
      throw ApiError(400, "image artifact " + id + " is " + image.shape().str() + ", backend expects " +
                              expected.str());
    }
    return image;
  }

  // --- operations --------------------------------------------------------------
  // Each op takes a normalized request (artifact ids, no inline payloads) and
  // returns its outputs; replay calls them again with the recorded request.

  json op_encode(const Session& s, const json& req) {
    const TokenizerBackend& tok = s.need_tokenizer();
    ImageTensor image = artifacts.get_image(req.at("image").get<std::string>());
    if (image.shape() != tok.image_shape()) {
      if (!req.value("resize", false)) {
        throw ApiError(400, "image is " + image.shape().str() + ", backend expects " +
                                tok.image_shape().str() + " (set \"resize\": true to resize)");
      }
      image = Resizer(image.height(), image.width(), tok.image_shape().height, tok.image_shape().width)
                  .apply(image)
                  .clamped();
    }
    const LatentFeatures features = tok.encode(image);
    const QuantizeResult q = quantize(features, tok.codebook());
    const json tokens = tokens_to_json(q.tokens);
    return {{"tokens", tokens},
            {"tokens_artifact", artifacts.put_json(tokens)},
            {"features_summary",
             {{"k", features.tokens()},
              {"dim", features.dim()},
              {"mean_feature_norm", features.values.rowwise().norm().mean()},
              {"mean_quantization_error", (features.values - q.quantized.values).rowwise().norm().mean()}}}};
  }

  TokenSequence request_tokens(const json& req) {
    if (req.contains("tokens_artifact")) return tokens_from_json(artifacts.get_json(req["tokens_artifact"]));
    if (req.contains("tokens")) return tokens_from_json(req["tokens"]);
    throw ApiError(400, "missing field 'tokens' or 'tokens_artifact'");
  }

  json op_decode(const Session& s, const json& req) {
    const ImageTensor image = s.need_tokenizer().decode_tokens(request_tokens(req));
    return {{"image", artifacts.put_png(image)}};
  }

  json op_copy_paste(const Session& s, const json& req) {
    const TokenizerBackend& tok = s.need_tokenizer();
    const ImageTensor target = session_image(s, req.at("target"));
    const ImageTensor ref = session_image(s, req.at("ref"));
    std::vector<int> positions;
    if (req.contains("preset")) {
      try {
        positions = preset_positions(req["preset"].get<std::string>());
      } catch (const Error& e) {
        throw ApiError(422, e.what());
      }
    } else {
      positions = req.value("positions", std::vector<int>{});
    }
    for (int p : positions) {
      if (p < 0 || p >= tok.num_tokens()) {
        throw ApiError(422, "position " + std::to_string(p) + " outside [0, " +
                                std::to_string(tok.num_tokens() - 1) + "] for " + tok.variant());
      }
    }
    const TokenSequence edited = replace_tokens(tok.tokenize(target), tok.tokenize(ref), positions);
    const json tokens = tokens_to_json(edited);
    return {{"image", artifacts.put_png(tok.decode_tokens(edited))},
            {"tokens", tokens},
            {"tokens_artifact", artifacts.put_json(tokens)},
            {"positions", positions}};
  }

  json op_importance(const Session& s, const json& req) {
    const TokenizerBackend& tok = s.need_tokenizer();
    const auto ids = req.at("images").get<std::vector<std::string>>();
    std::vector<ImageTensor> images;
    images.reserve(ids.size());
    for (const auto& id : ids) images.push_back(session_image(s, id));
    ClassPartition partition;
    if (req.contains("labels")) {
      partition.prompts = req.value("prompts", std::vector<std::string>{});
      partition.assignment = req["labels"].get<std::vector<int>>();
      int max_label = -1;
      for (int l : partition.assignment) max_label = std::max(max_label, l);
      while (static_cast<int>(partition.prompts.size()) <= max_label)
        partition.prompts.push_back("class-" + std::to_string(partition.prompts.size()));
    } else {
      partition = assign_classes(images, req.at("prompts").get<std::vector<std::string>>(),
                                 *s.need_scorer());
    }
    std::vector<LatentFeatures> features;
    features.reserve(images.size());
    for (const auto& img : images) features.push_back(lookup(tok.tokenize(img), tok.codebook()));
    const ImportanceProfile profile = importance_profile(fit_token_stats(features, partition));
    const std::string csv = profile.to_csv();
    return {{"profile", profile.to_json()},
            {"partition", partition.to_json()},
            {"csv", artifacts.put(csv, "csv")},
            {"profile_artifact", artifacts.put_json(profile.to_json())}};
  }

  std::shared_ptr<JobPlan> plan_job(const Session& s, const json& req) {
    auto plan = std::make_shared<JobPlan>();
    plan->kind = req.value("kind", "optimize");
    if (plan->kind != "optimize" && plan->kind != "inpaint" && plan->kind != "generate") {
      throw ApiError(422, "field 'kind' must be optimize, inpaint or generate");
    }
    const json objective = req.value("objective", json::object());
    const std::string type =
        objective.value("type", plan->kind == "inpaint" ? "inpaint-mask" : "clip-prompt");
    if (plan->kind == "inpaint" && type != "inpaint-mask") {
      throw ApiError(422, "inpaint jobs need an 'inpaint-mask' objective");
    }
    if (plan->kind != "inpaint" && type != "clip-prompt") {
      throw ApiError(422, plan->kind + " jobs need a 'clip-prompt' objective");
    }

    OptimizerConfig base = plan->kind == "optimize"   ? OptimizerConfig::text_edit()
                           : plan->kind == "inpaint" ? OptimizerConfig::inpainting()
                                                     : OptimizerConfig::from_scratch();
    const json overrides = req.value("config", json::object());
    if (!overrides.is_object()) throw ApiError(422, "field 'config' must be an object");
    json merged = base.to_json();
    for (const auto& [k, v] : overrides.items()) merged[k] = v;
    plan->config = OptimizerConfig::from_json(merged);  // kConfiguration names the field

    plan->tokenizer = s.tokenizer;
    const TokenizerBackend& tok = s.need_tokenizer();
    const std::string seed = req.value("seed", plan->kind == "generate" ? "random" : "");
    if (seed.empty()) throw ApiError(422, "field 'seed' must name an image artifact or \"random\"");
    if (seed == "random") {
      if (plan->kind == "inpaint") throw ApiError(422, "inpaint jobs need a seed image artifact");
      plan->config.init = InitMode::kRandom;
    } else {
      plan->seed_image = session_image(s, seed);
    }

    if (type == "clip-prompt") {
      const std::string prompt = objective.value("prompt", "");
      if (prompt.empty()) throw ApiError(422, "clip-prompt objective needs a non-empty 'prompt'");
      CropSmoothing crops;
      crops.n_crops = objective.value("crops", CropSmoothing::kDefaultCrops);
      crops.area_frac = objective.value("crop_area_frac", CropSmoothing::kDefaultAreaFrac);
      if (crops.n_crops < 0 || !(crops.area_frac > 0.0 && crops.area_frac <= 1.0)) {
        throw ApiError(422, "objective field 'crops' or 'crop_area_frac' out of range");
      }
      const auto scorer = s.need_scorer();
      plan->objective =
          std::make_shared<ScorerSimilarityObjective>(scorer, scorer->embed_text(prompt), crops, prompt);
    } else {
      if (!objective.contains("mask")) throw ApiError(422, "inpaint-mask objective needs a 'mask' artifact");
      const ImageTensor mask_image = artifacts.get_image(objective["mask"].get<std::string>(), 1);
      if (mask_image.height() != tok.image_shape().height || mask_image.width() != tok.image_shape().width) {
        throw ApiError(422, "mask is " + mask_image.shape().str() + ", image is " + tok.image_shape().str());
      }
      const double radius = objective.value("blur_radius", 2.0);
      if (!(radius >= 0.0)) throw ApiError(422, "objective field 'blur_radius' must be >= 0");
      const SoftMask mask =
          soft_mask_from_binary(SoftMask::from_image(mask_image).weights(), radius);
      if (!(mask.mass() > 0.0)) throw ApiError(422, "mask marks no given pixels");
      auto context = std::make_shared<InpaintContext>(InpaintContext{*plan->seed_image, mask});
      plan->inpaint = context;
      plan->objective = std::make_shared<MaskedL1Objective>(context->reference, context->mask);
    }
    return plan;
  }

  struct JobOutcome {
    json result;
    bool partial = false;
  };

  JobOutcome execute(const JobPlan& plan, const std::function<void(const Progress&)>& on_progress,
                     std::stop_token stop) {
    RunOptions options;
    options.on_progress = on_progress;
    options.progress_stride = config.progress_stride;
    options.snapshots = static_cast<bool>(on_progress);
    options.stop = std::move(stop);
    options.inpaint = plan.inpaint.get();
    RunResult r = run(plan.seed_image, *plan.objective, *plan.tokenizer, plan.config, options);
    ImageTensor output = r.image;
    if (plan.inpaint) output = blend(r.image, plan.inpaint->reference, plan.inpaint->mask);
    json values = json::array();
    for (const auto& p : r.trajectory.values) values.push_back({p.step, p.value});
    JobOutcome out;
    out.partial = r.partial;
    out.result = {{"image", artifacts.put_png(output)},
                  {"tokens", artifacts.put_json(tokens_to_json(r.tokens))},
                  {"trajectory", artifacts.put_json({{"values", values}, {"steps", r.state.step}})},
                  {"steps", r.state.step},
                  {"partial", r.partial},
                  {"used_ema", r.used_ema}};
    return out;
  }

  // --- job queue -----------------------------------------------------------------

  void push_event(Job& j, const std::string& event) {
    j.events.push_back(event);
    cv.notify_all();
  }

  void worker_loop() {
    for (;;) {
      std::shared_ptr<Job> j;
      {
        std::unique_lock lock(mu);
        cv.wait(lock, [&] { return shutting_down || !queue.empty(); });
        if (shutting_down) return;
        j = jobs.at(queue.front());
        queue.pop_front();
        j->status = "running";
        save_job(*j);
      }
      run_job(*j);
    }
  }

  void run_job(Job& j) {
    auto on_progress = [&](const Progress& p) {
      json data = {{"step", p.step}, {"iterations", p.iterations}, {"value", p.value}};
      if (p.snapshot) {
        data["snapshot_png_b64"] = base64_encode(encode_png(downscale(*p.snapshot, config.snapshot_size)));
      }
      std::lock_guard lock(mu);
      j.step = p.step;
      j.iterations = p.iterations;
      j.value = p.value;
      ++j.progress_events;
      push_event(j, sse("progress", data));
    };
    JobOutcome outcome;
    std::string error;
    try {
      outcome = execute(*j.plan, on_progress, j.stop.get_token());
    } catch (const std::exception& e) {
      error = e.what();
    }
    {
      std::lock_guard lock(mu);
      if (!error.empty()) {
        j.status = "failed";
        j.error = error;
      } else {
        j.status = outcome.partial ? "cancelled" : "done";
        j.result = outcome.result;
      }
      json terminal = {{"status", j.status}, {"progress_events", j.progress_events}};
      if (!j.result.is_null()) terminal["result"] = j.result;
      if (!j.error.empty()) terminal["error"] = j.error;
      save_job(j);
      // Recorded before the terminal event so waiters see the manifest entry.
      const auto it = sessions.find(j.session_id);
      if (it != sessions.end() && j.status != "failed") {
        std::vector<std::string> produced;
        for (const char* key : {"image", "tokens", "trajectory"}) produced.push_back(j.result[key]);
        record_locked(*it->second,
                      {{"op", "job"}, {"job", j.id}, {"status", j.status}, {"request", j.request}, {"outputs", j.result}},
                      produced);
      }
      push_event(j, sse(j.status, terminal));
      j.plan.reset();
    }
  }

  json submit_job(Session& s, const json& req) {
    const std::string key = req.value("idempotency_key", "");
    {
      std::lock_guard lock(mu);
      if (!key.empty()) {
        const auto it = s.idempotency.find(key);
        if (it != s.idempotency.end()) {
          const auto& existing = jobs.at(it->second);
          return {{"job_id", existing->id}, {"status", existing->status}, {"duplicate", true}};
        }
      }
    }
    auto plan = plan_job(s, req);
    auto j = std::make_shared<Job>();
    j->id = fresh_id("job_");
    j->session_id = s.id;
    j->kind = plan->kind;
    j->request = req;
    j->request.erase("idempotency_key");
    j->iterations = plan->config.iterations;
    j->plan = std::move(plan);
    {
      std::lock_guard lock(mu);
      if (!key.empty()) {
        // Concurrent duplicates: the first registration wins.
        const auto it = s.idempotency.find(key);
        if (it != s.idempotency.end()) return {{"job_id", it->second}, {"status", jobs.at(it->second)->status}, {"duplicate", true}};
        s.idempotency[key] = j->id;
        save_session(s);
      }
      jobs[j->id] = j;
      queue.push_back(j->id);
      save_job(*j);
    }
    cv.notify_all();
    return {{"job_id", j->id}, {"status", "queued"}, {"duplicate", false}};
  }

  json replay(const std::string& session_id) {
    const auto s = session(session_id);
    json entries;
    {
      std::lock_guard lock(mu);
      entries = s->manifest;
    }
    json report = {{"session", session_id}, {"entries", entries.size()}, {"replayed", 0}, {"skipped", 0},
                   {"mismatches", json::array()}};
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const json& e = entries[i];
      const std::string op = e.at("op");
      json outputs;
      if (op == "upload") {
        report["skipped"] = report["skipped"].get<int>() + 1;
        continue;
      } else if (op == "encode") {
        outputs = op_encode(*s, e.at("request"));
      } else if (op == "decode") {
        outputs = op_decode(*s, e.at("request"));
      } else if (op == "copy-paste") {
        outputs = op_copy_paste(*s, e.at("request"));
      } else if (op == "importance") {
        outputs = op_importance(*s, e.at("request"));
      } else if (op == "job") {
        if (e.at("status") != "done") {
          report["skipped"] = report["skipped"].get<int>() + 1;
          continue;
        }
        outputs = execute(*plan_job(*s, e.at("request")), {}, {}).result;
      }
      report["replayed"] = report["replayed"].get<int>() + 1;
      if (outputs != e.at("outputs")) report["mismatches"].push_back({{"index", i}, {"op", op}});
    }
    report["identical"] = report["mismatches"].empty();
    return report;
  }

  // --- routing -------------------------------------------------------------------

  void install_routes(Service& service);

  json create_session(const json& body) {
    auto s = std::make_shared<Session>();
    s->id = fresh_id("s_");
    s->created_at = now_iso8601();
    s->tokenizer_config = body.contains("tokenizer") ? BackendConfig::from_json(body["tokenizer"]) : config.tokenizer;
    s->scorer_config = body.contains("scorer") ? BackendConfig::from_json(body["scorer"]) : config.scorer;
    load_backends(*s);
    std::lock_guard lock(mu);
    sessions[s->id] = s;
    save_session(*s);
    return {{"id", s->id},
            {"created_at", s->created_at},
            {"variant", s->tokenizer ? s->tokenizer->variant() : s->tokenizer_config.kind},
            {"backend_status", s->backend_error.empty() ? "loaded" : "unavailable: " + s->backend_error}};
  }

  std::string upload(const json& body, int channels) {
    const auto bytes = decode_payload(body_field<std::string>(body, "png_b64"));
    // Validate and normalise: the stored artifact is the decoded image re-encoded.
    return artifacts.put_png(decode_png(bytes, channels));
  }

  HttpResponse session_post(const std::string& sid, const std::string& action, const json& body) {
    const auto s = session(sid);
    json out;
    if (action == "encode") {
      json req = {{"image", body.contains("image") ? body_field<std::string>(body, "image") : upload(body, 3)},
                  {"resize", body.value("resize", false)}};
      out = op_encode(*s, req);
      out["image"] = req["image"];
      record(*s, {{"op", "encode"}, {"request", req}, {"outputs", op_outputs(out)}},
             {req["image"], out["tokens_artifact"]});
    } else if (action == "decode") {
      json req;
      if (body.contains("tokens_artifact")) req["tokens_artifact"] = body["tokens_artifact"];
      else req["tokens_artifact"] = artifacts.put_json(tokens_to_json(request_tokens(body)));
      out = op_decode(*s, req);
      out["png_b64"] = base64_encode(read_file_bytes_of(out["image"]));
      record(*s, {{"op", "decode"}, {"request", req}, {"outputs", json{{"image", out["image"]}}}},
             {req["tokens_artifact"], out["image"]});
    } else if (action == "artifacts") {
      const std::string kind = body.value("kind", "image");
      if (kind != "image" && kind != "mask") throw ApiError(400, "field 'kind' must be image or mask");
      const std::string id = upload(body, kind == "mask" ? 1 : 3);
      out = {{"id", id}, {"kind", kind}};
      record(*s, {{"op", "upload"}, {"request", json{{"kind", kind}}}, {"outputs", out}}, {id});
    } else if (action == "edit/copy-paste") {
      json req = {{"target", body_field<std::string>(body, "target")}, {"ref", body_field<std::string>(body, "ref")}};
      if (body.contains("preset")) req["preset"] = body["preset"];
      else req["positions"] = body.value("positions", std::vector<int>{});
      out = op_copy_paste(*s, req);
      record(*s, {{"op", "copy-paste"}, {"request", req}, {"outputs", out}}, {out["image"], out["tokens_artifact"]});
      out["png_b64"] = base64_encode(read_file_bytes_of(out["image"]));
    } else if (action == "analysis/importance") {
      json req = {{"images", body_field<std::vector<std::string>>(body, "images")}};
      if (body.contains("labels")) req["labels"] = body["labels"];
      if (body.contains("prompts")) req["prompts"] = body["prompts"];
      out = op_importance(*s, req);
      record(*s, {{"op", "importance"}, {"request", req}, {"outputs", out}}, {out["csv"], out["profile_artifact"]});
    } else if (action == "jobs") {
      out = submit_job(*s, body);
      return {202, "application/json", out.dump()};
    } else if (action == "replay") {
      out = replay(sid);
    } else {
      throw ApiError(404, "unknown endpoint POST /sessions/" + sid + "/" + action);
    }
    return {200, "application/json", out.dump()};
  }

  static json op_outputs(const json& out) {
    json o = out;
    o.erase("image");
    return o;
  }

  std::vector<std::uint8_t> read_file_bytes_of(const std::string& id) {
    const std::string bytes = artifacts.get(id);
    return {bytes.begin(), bytes.end()};
  }

  std::string job_stream_text(const std::string& id, bool replay_history) {
    std::string text;
    stream(id, replay_history, [&](const std::string& e) {
      text += e;
      return true;
    });
    return text;
  }

  void stream(const std::string& id, bool replay_history,
              const std::function<bool(const std::string&)>& sink) {
    const auto j = job(id);
    std::unique_lock lock(mu);
    std::size_t next = 0;
    if (j->terminal() && !replay_history) {
      json terminal = {{"status", j->status}, {"progress_events", j->progress_events}};
      if (!j->result.is_null()) terminal["result"] = j->result;
      if (!j->error.empty()) terminal["error"] = j->error;
      const std::string frame = sse(j->status, terminal);
      lock.unlock();
      sink(frame);
      return;
    }
    if (j->terminal() && j->events.empty()) {
      // Loaded from disk after a restart: only the terminal state is known.
      lock.unlock();
      stream(id, false, sink);
      return;
    }
    for (;;) {
      cv.wait(lock, [&] { return next < j->events.size() || shutting_down; });
      if (next >= j->events.size()) return;
      std::vector<std::string> pending(j->events.begin() + static_cast<std::ptrdiff_t>(next), j->events.end());
      next = j->events.size();
      const bool done = j->terminal() && next == j->events.size();
      lock.unlock();
      for (const auto& frame : pending)
        if (!sink(frame)) return;
      if (done) return;
      lock.lock();
    }
  }

  HttpResponse route(const std::string& method, const std::string& target, const std::string& body) {
    std::string path = target;
    std::string query;
    if (const auto q = target.find('?'); q != std::string::npos) {
      path = target.substr(0, q);
      query = target.substr(q + 1);
    }
    std::vector<std::string> parts;
    std::stringstream ss(path);
    for (std::string part; std::getline(ss, part, '/');)
      if (!part.empty()) parts.push_back(part);
    const auto n = parts.size();

    if (method == "GET" && n == 1 && parts[0] == "healthz") return {200, "application/json", R"({"ok":true})"};
    if (method == "POST" && n == 1 && parts[0] == "sessions") {
      return {201, "application/json", create_session(parse_body(body)).dump()};
    }
    if (n >= 2 && parts[0] == "sessions") {
      if (method == "GET" && n == 2) {
        const auto s = session(parts[1]);
        std::lock_guard lock(mu);
        return {200, "application/json", s->to_json().dump()};
      }
      if (method == "POST" && n >= 3) {
        std::string action = parts[2];
        for (std::size_t i = 3; i < n; ++i) action += "/" + parts[i];
        return session_post(parts[1], action, parse_body(body));
      }
    }
    if (n >= 2 && parts[0] == "jobs") {
      if (method == "GET" && n == 2) {
        const auto j = job(parts[1]);
        std::lock_guard lock(mu);
        return {200, "application/json", j->to_json().dump()};
      }
      if (method == "GET" && n == 3 && parts[2] == "stream") {
        return {200, "text/event-stream", job_stream_text(parts[1], query.find("replay=1") != std::string::npos)};
      }
      if (method == "POST" && n == 3 && parts[2] == "cancel") {
        const auto j = job(parts[1]);
        j->stop.request_stop();
        std::lock_guard lock(mu);
        return {202, "application/json", json{{"job_id", j->id}, {"status", j->status}}.dump()};
      }
    }
    if (method == "GET" && n == 2 && parts[0] == "artifacts") {
      std::string type;
      std::string bytes = artifacts.get(parts[1], &type);
      return {200, type, std::move(bytes)};
    }
    throw ApiError(404, "no route for " + method + " " + path);
  }
};

Service::Service(ServiceConfig config) {
  config.validate();
  impl_ = std::make_unique<Impl>(std::move(config));
}

Service::~Service() = default;

const ServiceConfig& Service::config() const { return impl_->config; }

HttpResponse Service::handle(const std::string& method, const std::string& path, const std::string& body) {
  auto error = [](int status, const std::string& message, const char* kind) {
    return HttpResponse{status, "application/json", json{{"error", message}, {"kind", kind}}.dump()};
  };
  try {
    return impl_->route(method, path, body);
  } catch (const ApiError& e) {
    return error(e.status, e.what(), "api");
  } catch (const Error& e) {
    return error(http_status(e.kind()), e.what(), to_string(e.kind()));
  } catch (const json::exception& e) {
    return error(400, std::string("bad request: ") + e.what(), "invalid-input");
  } catch (const std::exception& e) {
    return error(500, e.what(), "internal");
  }
}

void Service::stream_job(const std::string& job_id, const std::function<bool(const std::string&)>& sink) {
  impl_->stream(job_id, true, sink);
}

json Service::wait_job(const std::string& job_id) {
  const auto j = impl_->job(job_id);
  std::unique_lock lock(impl_->mu);
  impl_->cv.wait(lock, [&] { return j->terminal() || impl_->shutting_down; });
  return j->to_json();
}

json Service::replay_session(const std::string& session_id) { return impl_->replay(session_id); }

void Service::Impl::install_routes(Service& service) {
  Impl& impl = *this;
  auto forward = [&service](const httplib::Request& req, httplib::Response& res) {
    std::string target = req.path;
    if (!req.params.empty()) {
      target += "?";
      for (const auto& [k, v] : req.params) target += k + "=" + v + "&";
    }
    const HttpResponse r = service.handle(req.method, target, req.body);
    res.status = r.status;
    res.set_content(r.body, r.content_type.c_str());
  };
  server.Get(R"(/jobs/([^/]+)/stream)", [&impl, forward](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    try {
      impl.job(id);
    } catch (const ApiError&) {
      forward(req, res);
      return;
    }
    const bool replay = req.has_param("replay") && req.get_param_value("replay") == "1";
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider("text/event-stream", [&impl, id, replay](std::size_t, httplib::DataSink& sink) {
      impl.stream(id, replay, [&](const std::string& frame) { return sink.write(frame.data(), frame.size()); });
      sink.done();
      return true;
    });
  });
  server.Get(R"(/.*)", forward);
  server.Post(R"(/.*)", forward);
}

void Service::listen() {
  impl_->install_routes(*this);
  if (!impl_->server.listen(impl_->config.host, impl_->config.port)) {
    fail(ErrorKind::kInvalidState, "cannot listen on " + impl_->config.host + ":" + std::to_string(impl_->config.port));
  }
}

int Service::start() {
  impl_->install_routes(*this);
  int port = impl_->config.port;
  if (port == 0) {
    port = impl_->server.bind_to_any_port(impl_->config.host);
  } else if (!impl_->server.bind_to_port(impl_->config.host, port)) {
    port = -1;
  }
  require(port > 0, ErrorKind::kInvalidState, "cannot bind " + impl_->config.host);
  impl_->server_thread = std::jthread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port;
}

void Service::stop() {
  impl_->server.stop();
  if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

}  // namespace tokopt
