#include "helpers.hpp"

#include "tokopt/edit.hpp"
#include "tokopt/io.hpp"
#include "tokopt/objectives.hpp"
#include "tokopt/optimizer.hpp"
#include "tokopt/service.hpp"

#include <doctest.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include <sstream>

using namespace tokopt;
using namespace tokopt::test;
using nlohmann::json;

namespace {

ServiceConfig service_config(const std::string& name) {
  ServiceConfig c;
  c.data_dir = scratch_dir(name);
  c.port = 0;
  return c;
}

json ok(const HttpResponse& r, int status = 200) {
  INFO(r.body);
  REQUIRE(r.status == status);
  return json::parse(r.body);
}

std::string png_b64(const ImageTensor& img) { return base64_encode(encode_png(img)); }

std::string upload(Service& svc, const std::string& sid, const ImageTensor& img, const char* kind = "image") {
  return ok(svc.handle("POST", "/sessions/" + sid + "/artifacts", json{{"kind", kind}, {"png_b64", png_b64(img)}}.dump()))
      .at("id");
}

std::string artifact(Service& svc, const std::string& id) { return svc.handle("GET", "/artifacts/" + id, "").body; }

std::string as_string(const std::vector<std::uint8_t>& b) { return {b.begin(), b.end()}; }

struct Frame {
  std::string event;
  json data;
};

std::vector<Frame> parse_sse(const std::string& text) {
  std::vector<Frame> out;
  std::istringstream in(text);
  Frame f;
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("event: ", 0) == 0) f.event = line.substr(7);
    else if (line.rfind("data: ", 0) == 0) f.data = json::parse(line.substr(6));
    else if (line.empty() && !f.event.empty()) {
      out.push_back(f);
      f = {};
    }
  }
  return out;
}

}  // namespace

TEST_CASE("service config key-value round trip and validation") {
  ServiceConfig c;
  c.port = 9000;
  c.job_workers = 3;
  const ServiceConfig back = ServiceConfig::from_key_value(c.to_key_value());
  CHECK(back.port == 9000);
  CHECK(back.job_workers == 3);
  CHECK_THROWS_AS(ServiceConfig::from_key_value("no-such-key = 1\n"), Error);
  c.job_workers = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK(http_status(ErrorKind::kBackendUnavailable) == 503);
  CHECK(http_status(ErrorKind::kDegenerateMask) == 422);
}

TEST_CASE("service encode and copy-paste equal direct calls") {
  Service svc(service_config("svc-parity"));
  const json session = ok(svc.handle("POST", "/sessions", "{}"), 201);
  CHECK(session["backend_status"] == "loaded");
  const std::string sid = session["id"];

  const auto tok = load_tokenizer(BackendConfig::of_kind("toy-tokenizer"));
  const ImageTensor target = decode_png(encode_png(random_image(1)));
  const ImageTensor ref = decode_png(encode_png(random_image(2)));

  const json enc = ok(svc.handle("POST", "/sessions/" + sid + "/encode", json{{"png_b64", png_b64(target)}}.dump()));
  CHECK(tokens_from_json(enc["tokens"]) == tok->tokenize(target));
  CHECK(tokens_from_json(json::parse(artifact(svc, enc["tokens_artifact"]))) == tok->tokenize(target));

  const std::string t_id = upload(svc, sid, target), r_id = upload(svc, sid, ref);
  const std::vector<int> positions{0, 3, 7};
  const json edit = ok(svc.handle("POST", "/sessions/" + sid + "/edit/copy-paste",
                                  json{{"target", t_id}, {"ref", r_id}, {"positions", positions}}.dump()));
  const ImageTensor direct = copy_paste_edit(target, ref, positions, *tok);
  CHECK(artifact(svc, edit["image"]) == as_string(encode_png(direct)));
  CHECK(base64_decode(edit["png_b64"].get<std::string>()) == encode_png(direct));

  const HttpResponse bad = svc.handle("POST", "/sessions/" + sid + "/edit/copy-paste",
                                      json{{"target", t_id}, {"ref", r_id}, {"positions", {8}}}.dump());
  CHECK(bad.status == 422);
  CHECK(json::parse(bad.body)["kind"] == "api");
}

TEST_CASE("service optimize job equals a direct run") {
  Service svc(service_config("svc-opt"));
  const std::string sid = ok(svc.handle("POST", "/sessions", "{}"), 201)["id"];
  const ImageTensor seed = decode_png(encode_png(random_image(3)));
  const std::string seed_id = upload(svc, sid, seed);
  const json request = {{"kind", "optimize"},
                        {"objective", {{"type", "clip-prompt"}, {"prompt", "axis-1"}, {"crops", 2}, {"crop_area_frac", 0.8}}},
                        {"config", {{"iterations", 20}, {"seed", 5}}},
                        {"seed", seed_id}};
  const json accepted = ok(svc.handle("POST", "/sessions/" + sid + "/jobs", request.dump()), 202);
  const json done = svc.wait_job(accepted["job_id"]);
  REQUIRE(done["status"] == "done");

  const auto tok = load_tokenizer(BackendConfig::of_kind("toy-tokenizer"));
  const auto scorer = load_scorer(BackendConfig::of_kind("toy-scorer"));
  OptimizerConfig config = OptimizerConfig::text_edit();
  config.iterations = 20;
  config.seed = 5;
  CropSmoothing crops;
  crops.n_crops = 2;
  crops.area_frac = 0.8;
  const ScorerSimilarityObjective objective(scorer, scorer->embed_text("axis-1"), crops, "axis-1");
  const RunResult direct = run(seed, objective, *tok, config);
  CHECK(artifact(svc, done["result"]["image"]) == as_string(encode_png(direct.image)));
  CHECK(tokens_from_json(json::parse(artifact(svc, done["result"]["tokens"]))) == direct.tokens);
  CHECK(done["result"]["steps"] == 20);

  // Progress stream: strictly increasing steps, terminal frame last.
  const std::string text = svc.handle("GET", "/jobs/" + done["id"].get<std::string>() + "/stream?replay=1", "").body;
  const auto frames = parse_sse(text);
  REQUIRE(frames.size() >= 2);
  int last = -1;
  for (std::size_t i = 0; i + 1 < frames.size(); ++i) {
    CHECK(frames[i].event == "progress");
    CHECK(frames[i].data["step"].get<int>() > last);
    last = frames[i].data["step"];
    CHECK(frames[i].data.contains("snapshot_png_b64"));
  }
  CHECK(frames.back().event == "done");
  const auto latest = parse_sse(svc.handle("GET", "/jobs/" + done["id"].get<std::string>() + "/stream", "").body);
  REQUIRE(latest.size() == 1);
  CHECK(latest[0].event == "done");

  // Idempotent resubmission returns the same job.
  json keyed = request;
  keyed["idempotency_key"] = "k1";
  const json a = ok(svc.handle("POST", "/sessions/" + sid + "/jobs", keyed.dump()), 202);
  const json b = ok(svc.handle("POST", "/sessions/" + sid + "/jobs", keyed.dump()), 202);
  CHECK(a["job_id"] == b["job_id"]);
  CHECK(b["duplicate"] == true);
  svc.wait_job(a["job_id"]);

  const json replay = ok(svc.handle("POST", "/sessions/" + sid + "/replay", "{}"));
  CHECK(replay["identical"] == true);
  CHECK(replay["replayed"].get<int>() >= 2);
}

TEST_CASE("service inpaint job and mask round trip") {
  Service svc(service_config("svc-inpaint"));
  const std::string sid = ok(svc.handle("POST", "/sessions", "{}"), 201)["id"];
  ImageTensor mask(ImageShape{1, 32, 32}, 1.0);
  for (int y = 10; y < 22; ++y)
    for (int x = 10; x < 22; ++x) mask.at(0, y, x) = 0.0;
  const std::string mask_id = upload(svc, sid, mask, "mask");
  CHECK(artifact(svc, mask_id) == as_string(encode_png(mask)));

  const ImageTensor image = decode_png(encode_png(random_image(4)));
  const std::string image_id = upload(svc, sid, image);
  const json request = {{"kind", "inpaint"},
                        {"objective", {{"type", "inpaint-mask"}, {"mask", mask_id}, {"blur_radius", 1.0}}},
                        {"config", {{"iterations", 10}}},
                        {"seed", image_id}};
  const json done = svc.wait_job(ok(svc.handle("POST", "/sessions/" + sid + "/jobs", request.dump()), 202)["job_id"]);
  REQUIRE(done["status"] == "done");
  const std::string out_png = artifact(svc, done["result"]["image"]);
  const ImageTensor out = decode_png(std::vector<std::uint8_t>(out_png.begin(), out_png.end()));
  const SoftMask soft = soft_mask_from_binary(SoftMask::from_image(mask).weights(), 1.0);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      if (soft(y, x) == 1.0)
        for (int c = 0; c < 3; ++c) REQUIRE(out.at(c, y, x) == image.at(c, y, x));

  const ImageTensor empty(ImageShape{1, 32, 32}, 0.0);
  json bad = request;
  bad["objective"]["mask"] = upload(svc, sid, empty, "mask");
  CHECK(svc.handle("POST", "/sessions/" + sid + "/jobs", bad.dump()).status == 422);
}

TEST_CASE("service error statuses") {
  Service svc(service_config("svc-errors"));
  CHECK(svc.handle("GET", "/healthz", "").status == 200);
  CHECK(svc.handle("GET", "/sessions/nope", "").status == 404);
  CHECK(svc.handle("GET", "/jobs/nope", "").status == 404);
  CHECK(svc.handle("GET", "/nowhere", "").status == 404);
  CHECK(svc.handle("POST", "/sessions", "{not json").status == 400);
  const std::string sid = ok(svc.handle("POST", "/sessions", "{}"), 201)["id"];
  CHECK(svc.handle("POST", "/sessions/" + sid + "/artifacts", R"({"png_b64":"AAAA"})").status == 400);
  const std::string seed_id = upload(svc, sid, random_image(1));
  const json bad_config = {{"kind", "optimize"},
                           {"objective", {{"prompt", "x"}}},
                           {"config", {{"learning-rate", -1.0}}},
                           {"seed", seed_id}};
  const HttpResponse r = svc.handle("POST", "/sessions/" + sid + "/jobs", bad_config.dump());
  CHECK(r.status == 422);
  CHECK(json::parse(r.body)["error"].get<std::string>().find("learning-rate") != std::string::npos);
  CHECK(svc.handle("POST", "/sessions", R"({"tokenizer":{"kind":"titok","variant":"nope"}})").status == 422);
  const auto checkpoint = scratch_dir("svc-ckpt") / "weights.bin";
  write_file_atomic(checkpoint, std::string("not a real checkpoint"));
  const json tokenizer = {{"kind", "titok"}, {"variant", "VQ-LL-32"}, {"path", checkpoint.string()}};
  const json busted = ok(svc.handle("POST", "/sessions", json{{"tokenizer", tokenizer}}.dump()), 201);
  CHECK(busted["backend_status"].get<std::string>().rfind("unavailable", 0) == 0);
  const std::string bsid = busted["id"];
  CHECK(svc.handle("POST", "/sessions/" + bsid + "/encode", json{{"png_b64", png_b64(random_image(1))}}.dump()).status == 503);
}

TEST_CASE("queued jobs are marked interrupted after a restart") {
  ServiceConfig config = service_config("svc-restart");
  std::string sid, queued;
  {
    Service svc(config);
    sid = ok(svc.handle("POST", "/sessions", "{}"), 201)["id"];
    const std::string seed_id = upload(svc, sid, random_image(1));
    const json slow = {{"kind", "optimize"},
                       {"objective", {{"prompt", "x"}}},
                       {"config", {{"iterations", 1000000}}},
                       {"seed", seed_id}};
    ok(svc.handle("POST", "/sessions/" + sid + "/jobs", slow.dump()), 202);
    queued = ok(svc.handle("POST", "/sessions/" + sid + "/jobs", slow.dump()), 202)["job_id"];
  }
  Service again(config);
  const json j = ok(again.handle("GET", "/jobs/" + queued, ""));
  CHECK(j["status"] == "failed");
  CHECK(j["error"].get<std::string>().find("restart") != std::string::npos);
  CHECK(ok(again.handle("GET", "/sessions/" + sid, "")).contains("manifest"));
}

TEST_CASE("service over http") {
  Service svc(service_config("svc-http"));
  const int port = svc.start();
  httplib::Client client("127.0.0.1", port);
  const auto health = client.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  const auto created = client.Post("/sessions", "{}", "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const std::string sid = json::parse(created->body)["id"];
  const auto up = client.Post("/sessions/" + sid + "/artifacts",
                              json{{"kind", "image"}, {"png_b64", png_b64(random_image(2))}}.dump(), "application/json");
  REQUIRE(up);
  const std::string seed_id = json::parse(up->body)["id"];
  const json request = {{"kind", "optimize"}, {"objective", {{"prompt", "axis-0"}}}, {"config", {{"iterations", 25}}},
                        {"seed", seed_id}};
  const auto job = client.Post("/sessions/" + sid + "/jobs", request.dump(), "application/json");
  REQUIRE(job);
  CHECK(job->status == 202);
  const std::string job_id = json::parse(job->body)["job_id"];
  const auto stream = client.Get("/jobs/" + job_id + "/stream?replay=1");
  REQUIRE(stream);
  const auto frames = parse_sse(stream->body);
  REQUIRE_FALSE(frames.empty());
  CHECK(frames.back().event == "done");
  int last = -1;
  for (std::size_t i = 0; i + 1 < frames.size(); ++i) {
    CHECK(frames[i].data["step"].get<int>() > last);
    last = frames[i].data["step"];
  }
  const auto missing = client.Get("/jobs/nope/stream");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  svc.stop();
}

TEST_CASE("cancelling a job ends it cancelled with a partial result") {
  Service svc(service_config("svc-cancel"));
  const std::string sid = ok(svc.handle("POST", "/sessions", "{}"), 201)["id"];
  const std::string image_id = upload(svc, sid, decode_png(encode_png(random_image(6))));
  const json request = {{"kind", "optimize"},
                        {"objective", {{"type", "clip-prompt"}, {"prompt", "axis-2"}}},
                        {"config", {{"iterations", 1000000}}},
                        {"seed", image_id}};
  const std::string job_id = ok(svc.handle("POST", "/sessions/" + sid + "/jobs", request.dump()), 202)["job_id"];
  ok(svc.handle("POST", "/jobs/" + job_id + "/cancel", ""), 202);
  const json done = svc.wait_job(job_id);
  CHECK(done["status"] == "cancelled");
  CHECK(done["result"]["partial"] == true);
  CHECK(done["result"]["steps"].get<int>() < 1000000);
  const auto frames = parse_sse(svc.handle("GET", "/jobs/" + job_id + "/stream?replay=1", "").body);
  REQUIRE_FALSE(frames.empty());
  CHECK(frames.back().event == "cancelled");
}
