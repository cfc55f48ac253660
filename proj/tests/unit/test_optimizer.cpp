#include "helpers.hpp"

#include "tokopt/error.hpp"
#include "tokopt/eval.hpp"
#include "tokopt/objectives.hpp"
#include "tokopt/optimizer.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>

using namespace tokopt;
using namespace tokopt::test;

namespace {

struct Stack {
  std::shared_ptr<const ToyTokenizer> tok = toy_tokenizer(1);
  std::shared_ptr<const ToyScorer> scorer = toy_scorer(1);
  ScorerSimilarityObjective objective{scorer, scorer->embed_text("axis-1"), CropSmoothing{}};
  ImageTensor seed_image = toy_image(*tok, 3);
};

// Returns NaN gradients everywhere.
class PoisonObjective final : public Objective {
 public:
  Direction direction() const override { return Direction::kMaximize; }
  double evaluate(const ImageTensor&, std::uint64_t) const override { return 0.0; }
  ObjectiveValue evaluate_with_gradient(const ImageTensor& image, std::uint64_t) const override {
    return {0.0, ImageTensor(image.shape(), std::nan(""))};
  }
  nlohmann::json describe() const override { return {{"type", "poison"}}; }
};

// Zero objective: only the regulariser acts.
class ZeroObjective final : public Objective {
 public:
  Direction direction() const override { return Direction::kMaximize; }
  double evaluate(const ImageTensor&, std::uint64_t) const override { return 0.0; }
  ObjectiveValue evaluate_with_gradient(const ImageTensor& image, std::uint64_t) const override {
    return {0.0, ImageTensor(image.shape(), 0.0)};
  }
  nlohmann::json describe() const override { return {{"type", "zero"}}; }
};

}  // namespace

TEST_CASE("presets") {
  const auto t = OptimizerConfig::text_edit();
  CHECK(t.iterations == 300);
  CHECK(t.learning_rate == 0.1);
  CHECK(t.ema_decay == 0.98);
  CHECK_FALSE(t.noise.has_value());
  CHECK(t.reg_lambda == 0.0);
  const auto w = OptimizerConfig::with_tweaks();
  CHECK(w.noise.has_value());
  CHECK(w.noise->sigma2_start == 0.3);
  CHECK(w.reg_lambda > 0.0);
  CHECK(OptimizerConfig::inpainting().reset_interval == 25);
  CHECK(OptimizerConfig::from_scratch().init == InitMode::kRandom);
  CHECK(OptimizerConfig::from_scratch().iterations == 400);
}

TEST_CASE("noise schedule") {
  OptimizerConfig c = OptimizerConfig::with_tweaks();
  CHECK(noise_sigma2(c, 1) == 0.3);
  CHECK(noise_sigma2(c, 200) == 0.0);
  CHECK(noise_sigma2(c, 250) == 0.0);
  for (int s = 2; s < 200; s += 7) {
    const double expected = 0.3 * (1.0 + std::cos(std::numbers::pi * (s - 1) / 199.0)) / 2.0;
    CHECK(std::abs(noise_sigma2(c, s) - expected) <= 1e-12);
    CHECK(noise_sigma2(c, s) < noise_sigma2(c, s - 1));
  }
  c.noise->ramp_end_iter = 1;
  CHECK(noise_sigma2(c, 1) == 0.3);
  CHECK(noise_sigma2(OptimizerConfig::text_edit(), 5) == 0.0);
  CHECK_THROWS_AS(noise_sigma2(c, 0), Error);
}

TEST_CASE("config json and key-value round trips") {
  for (const auto& c : {OptimizerConfig::text_edit(), OptimizerConfig::with_tweaks(),
                        OptimizerConfig::inpainting(), OptimizerConfig::from_scratch()}) {
    CHECK(OptimizerConfig::from_json(c.to_json()) == c);
    CHECK(OptimizerConfig::from_key_value(c.to_key_value()) == c);
  }
  OptimizerConfig odd = OptimizerConfig::with_tweaks();
  odd.learning_rate = 0.1 + 1e-15;
  odd.seed = 0xFFFFFFFFFFFFFFFFULL;
  odd.ema_decay.reset();
  CHECK(OptimizerConfig::from_key_value(odd.to_key_value()) == odd);
}

TEST_CASE("config errors name the field") {
  auto message = [](const nlohmann::json& doc) {
    try {
      OptimizerConfig::from_json(doc);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kConfiguration);
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message({{"learning-rate", -1.0}}).find("learning-rate") != std::string::npos);
  CHECK(message({{"adam-beta1", 1.0}}).find("adam-beta1") != std::string::npos);
  CHECK(message({{"ema-decay", "sometimes"}}).find("ema-decay") != std::string::npos);
  CHECK(message({{"iterations", "many"}}).find("iterations") != std::string::npos);
  CHECK(message({{"lr", 0.1}}).find("lr") != std::string::npos);
  CHECK(message({{"reset-interval", 0}}).find("reset-interval") != std::string::npos);
  CHECK_THROWS_AS(OptimizerConfig::from_key_value("iterations 5"), Error);
}

TEST_CASE("EMA equals the decay-weighted sum of iterates") {
  Stack s;
  OptimizerConfig c = OptimizerConfig::text_edit();
  OptimizationState state = init_from_image(s.seed_image, *s.tok);
  const double d = *c.ema_decay;
  std::vector<Eigen::MatrixXd> iterates{state.features.values};
  for (int i = 0; i < 50; ++i) {
    step(state, s.objective, *s.tok, c);
    iterates.push_back(state.features.values);
  }
  Eigen::MatrixXd expected = std::pow(d, 50) * iterates[0];
  for (int t = 1; t <= 50; ++t) expected += (1.0 - d) * std::pow(d, 50 - t) * iterates[t];
  CHECK(((state.ema_features.values - expected).array().abs() <=
         1e-6 * expected.array().abs().max(1e-12))
            .all());
}

TEST_CASE("run with all tweaks off matches a hand-written Adam loop") {
  Stack s;
  OptimizerConfig c = OptimizerConfig::text_edit();
  c.iterations = 20;
  c.ema_decay.reset();
  const RunResult r = run(s.seed_image, s.objective, *s.tok, c);

  // Same loop written from scratch against the public primitives.
  Eigen::MatrixXd z = s.tok->encode(s.seed_image).values;
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(z.rows(), z.cols());
  Eigen::MatrixXd v = m;
  for (int t = 1; t <= 20; ++t) {
    const QuantizeResult q = quantize(LatentFeatures{z}, s.tok->codebook());
    const ImageTensor img = s.tok->decode(q.quantized);
    const ObjectiveValue o = s.objective.evaluate_with_gradient(img, objective_seed(c, t));
    CHECK(o.value == r.trajectory.values[t - 1].value);
    const Eigen::MatrixXd g = s.tok->decode_vjp(q.quantized, o.gradient).values;
    const double b1 = 0.9, b2m = 0.999;
    m = b1 * m + (1.0 - b1) * g;
    v = b2m * v + (1.0 - b2m) * g.cwiseProduct(g);
    const double step_size = 0.1 / (1.0 - std::pow(0.9, t));
    const double b2 = std::sqrt(1.0 - std::pow(0.999, t));
    for (Eigen::Index i = 0; i < z.size(); ++i)
      z.data()[i] += step_size * (m.data()[i] / (std::sqrt(v.data()[i]) / b2 + 1e-8));
  }
  CHECK(r.state.features.values == z);
  CHECK_FALSE(r.used_ema);
}

TEST_CASE("runs are deterministic and seeds matter") {
  Stack s;
  OptimizerConfig c = OptimizerConfig::with_tweaks();
  c.iterations = 15;
  const RunResult a = run(s.seed_image, s.objective, *s.tok, c);
  const RunResult b = run(s.seed_image, s.objective, *s.tok, c);
  CHECK(a.state.features == b.state.features);
  CHECK(a.image == b.image);
  c.seed = 1;
  const RunResult other = run(s.seed_image, s.objective, *s.tok, c);
  CHECK_FALSE(other.state.features == a.state.features);
}

TEST_CASE("optimisation raises the objective") {
  Stack s;
  OptimizerConfig c = OptimizerConfig::text_edit();
  c.iterations = 60;
  const RunResult r = run(s.seed_image, s.objective, *s.tok, c);
  CHECK(s.objective.evaluate(r.image, 0) > s.objective.evaluate(s.seed_image, 0));
  CHECK(r.used_ema);
  CHECK(r.image.in_unit_range());
  CHECK(r.trajectory.values.size() == 60);
}

TEST_CASE("zero iterations returns the reconstruction of the seed") {
  Stack s;
  OptimizerConfig c;
  c.iterations = 0;
  const RunResult r = run(s.seed_image, s.objective, *s.tok, c);
  CHECK(r.image == s.tok->reconstruct(s.seed_image));
  CHECK(r.trajectory.values.empty());
}

TEST_CASE("random init ignores the seed image") {
  Stack s;
  OptimizerConfig c = OptimizerConfig::from_scratch();
  c.iterations = 5;
  const RunResult a = run(s.seed_image, s.objective, *s.tok, c);
  const RunResult b = run(std::nullopt, s.objective, *s.tok, c);
  CHECK(a.state.features == b.state.features);
}

TEST_CASE("the L2 term shrinks the features") {
  Stack s;
  ZeroObjective zero;
  OptimizerConfig c;
  c.reg_lambda = 0.5;
  c.iterations = 30;
  c.ema_decay.reset();
  const OptimizationState start = init_from_image(s.seed_image, *s.tok);
  const RunResult r = run_from_state(start, zero, *s.tok, c);
  CHECK(r.state.features.values.norm() < start.features.values.norm());
  OptimizationState state = start;
  for (int i = 0; i < c.iterations; ++i) {
    const double before = state.features.values.norm();
    step(state, zero, *s.tok, c);
    CHECK(state.features.values.norm() < before);
  }
  const LatentGradient g = latent_gradient(start.features, zero, *s.tok, c, 0);
  const Eigen::MatrixXd expected = -(0.5 * 2.0 / 8.0) * start.features.values;
  CHECK(g.gradient.values.isApprox(expected, 1e-14));
}

TEST_CASE("non-finite gradients stop the run with a snapshot") {
  Stack s;
  PoisonObjective poison;
  OptimizerConfig c;
  c.iterations = 5;
  try {
    run(s.seed_image, poison, *s.tok, c);
    FAIL("expected NonFiniteGradient");
  } catch (const NonFiniteGradient& e) {
    CHECK(e.step() == 1);
    CHECK(e.kind() == ErrorKind::kNumerical);
    CHECK(e.snapshot().shape() == s.tok->image_shape());
  }
}

TEST_CASE("progress, snapshots and cancellation") {
  Stack s;
  OptimizerConfig c;
  c.iterations = 25;
  RunOptions o;
  std::vector<int> steps;
  o.progress_stride = 10;
  o.snapshots = true;
  o.snapshot_capacity = 2;
  o.on_progress = [&](const Progress& p) {
    steps.push_back(p.step);
    CHECK(p.snapshot != nullptr);
  };
  const RunResult r = run(s.seed_image, s.objective, *s.tok, c, o);
  CHECK(steps == std::vector<int>{10, 20, 25});
  CHECK(r.trajectory.snapshots.size() == 2);
  CHECK(r.trajectory.snapshots.front().step == 20);

  std::stop_source stop;
  RunOptions cancel;
  cancel.stop = stop.get_token();
  cancel.progress_stride = 1;
  cancel.on_progress = [&](const Progress& p) {
    if (p.step == 3) stop.request_stop();
  };
  const RunResult partial = run(s.seed_image, s.objective, *s.tok, c, cancel);
  CHECK(partial.partial);
  CHECK(partial.state.step == 3);
}

TEST_CASE("token reset keeps moments, restarts the EMA and re-encodes the blend") {
  Stack s;
  OptimizerConfig c;
  c.iterations = 4;
  OptimizationState state = init_from_image(s.seed_image, *s.tok);
  for (int i = 0; i < 4; ++i) step(state, s.objective, *s.tok, c);
  const Eigen::MatrixXd m = state.adam_m.values;
  const Eigen::MatrixXd ema = state.ema_features.values;
  const SoftMask all(Eigen::MatrixXd::Ones(32, 32));
  const ImageTensor reference = toy_image(*s.tok, 99);
  token_reset(state, reference, all, *s.tok);
  CHECK(state.adam_m.values == m);
  CHECK(state.ema_features.values != ema);
  CHECK(state.ema_features == state.features);
  CHECK(state.features == s.tok->encode(reference));
}

TEST_CASE("from-scratch optimisation reaches a reachable toy prompt") {
  std::ifstream in(std::string(TOKOPT_FIXTURE_DIR) + "/from_scratch/pilot.json");
  REQUIRE(in);
  const nlohmann::json fixture = nlohmann::json::parse(in);
  const auto pilot = fixture.at("similarity").get<std::vector<double>>();
  const double floor = fixture.at("min_similarity").get<double>();

  const auto tok = toy_tokenizer(0);
  const auto base = toy_scorer(0);
  const ToyDataset data = make_toy_dataset(*tok, *base, static_cast<int>(pilot.size()), 1, 0);
  const auto scorer = base->with_prompts(data.prompt_vectors);
  CropSmoothing whole;
  whole.n_crops = 0;
  for (std::size_t c = 0; c < pilot.size(); ++c) {
    const std::string name = "class-" + std::to_string(c);
    // Similarity 1 is attainable: the prompt is the embedding of a decodable image.
    CHECK(cosine_similarity(embed_whole_image(*scorer, tok->decode_tokens(data.prototypes[c])),
                            scorer->embed_text(name)) == doctest::Approx(1.0).epsilon(1e-12));
    const ScorerSimilarityObjective objective(scorer, scorer->embed_text(name), whole, name);
    OptimizerConfig config = OptimizerConfig::from_scratch();
    config.iterations = 200;
    config.seed = c;
    const RunResult r = run(std::nullopt, objective, *tok, config);
    const double sim = cosine_similarity(embed_whole_image(*scorer, r.image), scorer->embed_text(name));
    CHECK(sim >= floor);
    CHECK(sim == doctest::Approx(pilot[c]).epsilon(1e-9));
  }
}

TEST_CASE("random init has the requested spread") {
  const auto tok = toy_tokenizer(1);
  CHECK(OptimizerConfig::from_scratch().sigma_init == 0.3);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const OptimizationState a = init_random(*tok, 0.3, seed);
    CHECK(a.features == init_random(*tok, 0.3, seed).features);
    const Eigen::MatrixXd& z = a.features.values;
    const double n = static_cast<double>(z.size());
    const double mean = z.mean();
    const double sd = std::sqrt((z.array() - mean).square().sum() / (n - 1));
    // Standard errors of the sample mean and sample standard deviation.
    CHECK(std::abs(mean) <= 5.0 * 0.3 / std::sqrt(n));
    CHECK(std::abs(sd - 0.3) <= 5.0 * 0.3 / std::sqrt(2.0 * (n - 1)));
  }
  CHECK(init_random(*tok, 0.3, 0).features != init_random(*tok, 0.3, 1).features);
}
