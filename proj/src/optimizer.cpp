#include "tokopt/optimizer.hpp"

#include "tokopt/random.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

namespace tokopt {

// --- config -----------------------------------------------------------------

OptimizerConfig OptimizerConfig::text_edit() { return OptimizerConfig{}; }

OptimizerConfig OptimizerConfig::with_tweaks() {
  OptimizerConfig c;
  c.noise = NoiseSchedule{};
  c.reg_lambda = kDefaultRegLambda;
  return c;
}

OptimizerConfig OptimizerConfig::inpainting() {
  OptimizerConfig c = with_tweaks();
  c.reset_interval = kDefaultResetInterval;
  return c;
}

OptimizerConfig OptimizerConfig::from_scratch() {
  OptimizerConfig c = with_tweaks();
  c.init = InitMode::kRandom;
  c.iterations = kFromScratchIterations;
  return c;
}

bool operator==(const NoiseSchedule& a, const NoiseSchedule& b) {
  return a.sigma2_start == b.sigma2_start && a.ramp_end_iter == b.ramp_end_iter;
}

bool OptimizerConfig::operator==(const OptimizerConfig& o) const {
  return iterations == o.iterations && learning_rate == o.learning_rate &&
         adam_beta1 == o.adam_beta1 && adam_beta2 == o.adam_beta2 &&
         adam_epsilon == o.adam_epsilon && ema_decay == o.ema_decay && noise == o.noise &&
         reg_lambda == o.reg_lambda && reset_interval == o.reset_interval && init == o.init &&
         sigma_init == o.sigma_init && seed == o.seed;
}

namespace {

void check_field(bool ok, const char* field, const std::string& why) {
  require(ok, ErrorKind::kConfiguration, std::string("optimizer config: field '") + field + "' " + why);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void OptimizerConfig::validate() const {
  check_field(iterations >= 0, "iterations", "must be >= 0");
  check_field(std::isfinite(learning_rate) && learning_rate >= 0, "learning-rate",
              "must be finite and >= 0");
  check_field(adam_beta1 >= 0 && adam_beta1 < 1, "adam-beta1", "must lie in [0,1)");
  check_field(adam_beta2 >= 0 && adam_beta2 < 1, "adam-beta2", "must lie in [0,1)");
  check_field(std::isfinite(adam_epsilon) && adam_epsilon > 0, "adam-epsilon", "must be > 0");
  if (ema_decay) check_field(*ema_decay >= 0 && *ema_decay < 1, "ema-decay", "must lie in [0,1)");
  if (noise) {
    check_field(std::isfinite(noise->sigma2_start) && noise->sigma2_start >= 0,
                "noise-sigma2-start", "must be finite and >= 0");
    check_field(noise->ramp_end_iter >= 1, "noise-ramp-end-iter", "must be >= 1");
  }
  check_field(std::isfinite(reg_lambda) && reg_lambda >= 0, "reg-lambda", "must be finite and >= 0");
  if (reset_interval) check_field(*reset_interval >= 1, "reset-interval", "must be >= 1");
  check_field(std::isfinite(sigma_init) && sigma_init > 0, "sigma-init", "must be > 0");
}

nlohmann::json OptimizerConfig::to_json() const {
  nlohmann::json doc;
  doc["iterations"] = iterations;
  doc["learning-rate"] = learning_rate;
  doc["adam-beta1"] = adam_beta1;
  doc["adam-beta2"] = adam_beta2;
  doc["adam-epsilon"] = adam_epsilon;
  doc["ema-decay"] = ema_decay ? nlohmann::json(*ema_decay) : nlohmann::json("off");
  doc["noise"] = noise ? "cosine" : "off";
  doc["noise-sigma2-start"] = noise ? noise->sigma2_start : NoiseSchedule{}.sigma2_start;
  doc["noise-ramp-end-iter"] = noise ? noise->ramp_end_iter : NoiseSchedule{}.ramp_end_iter;
  doc["reg-lambda"] = reg_lambda;
  doc["reset-interval"] = reset_interval ? nlohmann::json(*reset_interval) : nlohmann::json("off");
  doc["init"] = init == InitMode::kRandom ? "random" : "from-image";
  doc["sigma-init"] = sigma_init;
  doc["seed"] = seed;
  return doc;
}

namespace {

template <typename T>
T get_field(const nlohmann::json& doc, const char* key) {
  try {
    return doc.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::kConfiguration, std::string("optimizer config: field '") + key + "' has the wrong type");
  }
}

}  // namespace

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& doc) {
  require(doc.is_object(), ErrorKind::kConfiguration, "optimizer config must be an object");
  static const char* kKeys[] = {"iterations", "learning-rate",      "adam-beta1",
                                "adam-beta2", "adam-epsilon",       "ema-decay",
                                "noise",      "noise-sigma2-start", "noise-ramp-end-iter",
                                "reg-lambda", "reset-interval",     "init",
                                "sigma-init", "seed"};
  for (const auto& [key, _] : doc.items()) {
    bool known = false;
    for (const char* k : kKeys) known = known || key == k;
    require(known, ErrorKind::kConfiguration, "optimizer config: unknown field '" + key + "'");
  }
  OptimizerConfig c;
  if (doc.contains("iterations")) c.iterations = get_field<int>(doc, "iterations");
  if (doc.contains("learning-rate")) c.learning_rate = get_field<double>(doc, "learning-rate");
  if (doc.contains("adam-beta1")) c.adam_beta1 = get_field<double>(doc, "adam-beta1");
  if (doc.contains("adam-beta2")) c.adam_beta2 = get_field<double>(doc, "adam-beta2");
  if (doc.contains("adam-epsilon")) c.adam_epsilon = get_field<double>(doc, "adam-epsilon");
  if (doc.contains("ema-decay")) {
    const auto& v = doc.at("ema-decay");
    if (v.is_string()) {
      check_field(v.get<std::string>() == "off", "ema-decay", "must be a number or \"off\"");
      c.ema_decay.reset();
    } else {
      c.ema_decay = get_field<double>(doc, "ema-decay");
    }
  }
  NoiseSchedule schedule;
  if (doc.contains("noise-sigma2-start"))
    schedule.sigma2_start = get_field<double>(doc, "noise-sigma2-start");
  if (doc.contains("noise-ramp-end-iter"))
    schedule.ramp_end_iter = get_field<int>(doc, "noise-ramp-end-iter");
  if (doc.contains("noise")) {
    const auto mode = get_field<std::string>(doc, "noise");
    check_field(mode == "off" || mode == "cosine", "noise", "must be \"off\" or \"cosine\"");
    if (mode == "cosine") c.noise = schedule;
  }
  if (doc.contains("reg-lambda")) c.reg_lambda = get_field<double>(doc, "reg-lambda");
  if (doc.contains("reset-interval")) {
    const auto& v = doc.at("reset-interval");
    if (v.is_string()) {
      check_field(v.get<std::string>() == "off", "reset-interval", "must be an integer or \"off\"");
      c.reset_interval.reset();
    } else {
      c.reset_interval = get_field<int>(doc, "reset-interval");
    }
  }
  if (doc.contains("init")) {
    const auto mode = get_field<std::string>(doc, "init");
    check_field(mode == "from-image" || mode == "random", "init",
                "must be \"from-image\" or \"random\"");
    c.init = mode == "random" ? InitMode::kRandom : InitMode::kFromImage;
  }
  if (doc.contains("sigma-init")) c.sigma_init = get_field<double>(doc, "sigma-init");
  if (doc.contains("seed")) c.seed = get_field<std::uint64_t>(doc, "seed");
  c.validate();
  return c;
}

std::string OptimizerConfig::to_key_value() const {
  std::ostringstream out;
  const nlohmann::json doc = to_json();
  for (const auto& [key, value] : doc.items()) {
    out << key << " = ";
    if (value.is_string()) {
      out << value.get<std::string>();
    } else if (value.is_number_float()) {
      out << format_double(value.get<double>());
    } else {
      out << value.dump();
    }
    out << "\n";
  }
  return out.str();
}

OptimizerConfig OptimizerConfig::from_key_value(const std::string& text) {
  nlohmann::json doc = nlohmann::json::object();
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::kConfiguration,
            "optimizer config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string scrubbed = value.size() >= 2 && value.front() == '"' ? value.substr(1, value.size() - 2) : value;
    if (auto j = nlohmann::json::parse(scrubbed, nullptr, false); !j.is_discarded() && j.is_number()) {
      doc[key] = j;
    } else {
      doc[key] = scrubbed;
    }
  }
  return from_json(doc);
}

double noise_sigma2(const OptimizerConfig& config, int step) {
  require(step >= 1, ErrorKind::kInvalidInput, "noise_sigma2: step must be >= 1");
  if (!config.noise) return 0.0;
  const auto& n = *config.noise;
  if (step > n.ramp_end_iter) return 0.0;
  if (n.ramp_end_iter == 1) return n.sigma2_start;
  const double phase = std::numbers::pi * (step - 1) / (n.ramp_end_iter - 1);
  if (step == n.ramp_end_iter) return 0.0;
  return n.sigma2_start * (1.0 + std::cos(phase)) / 2.0;
}

// --- state ------------------------------------------------------------------

namespace {

OptimizationState make_state(LatentFeatures features) {
  OptimizationState state;
  state.adam_m.values = Eigen::MatrixXd::Zero(features.tokens(), features.dim());
  state.adam_v.values = Eigen::MatrixXd::Zero(features.tokens(), features.dim());
  state.ema_features = features;
  state.features = std::move(features);
  return state;
}

}  // namespace

OptimizationState init_from_image(const ImageTensor& image, const TokenizerBackend& backend) {
  return make_state(backend.encode(image));
}

OptimizationState init_random(const TokenizerBackend& backend, double sigma_init,
                              std::uint64_t seed) {
  require(sigma_init > 0 && std::isfinite(sigma_init), ErrorKind::kInvalidInput,
          "init_random: sigma_init must be > 0");
  Rng rng(derive_seed(seed, "init-random"));
  std::normal_distribution<double> normal(0.0, sigma_init);
  LatentFeatures f;
  f.values.resize(backend.num_tokens(), backend.feature_dim());
  for (int k = 0; k < f.tokens(); ++k)
    for (int d = 0; d < f.dim(); ++d) f.values(k, d) = normal(rng);
  return make_state(std::move(f));
}

std::uint64_t objective_seed(const OptimizerConfig& config, int step) {
  return derive_seed(config.seed, "objective", static_cast<std::uint64_t>(step));
}

std::uint64_t noise_seed(const OptimizerConfig& config, int step) {
  return derive_seed(config.seed, "noise", static_cast<std::uint64_t>(step));
}

LatentGradient latent_gradient(const LatentFeatures& features, const Objective& objective,
                               const TokenizerBackend& backend, const OptimizerConfig& config,
                               std::uint64_t objective_seed) {
  const QuantizeResult q = quantize(features, backend.codebook());
  LatentGradient out;
  out.image = backend.decode_unclamped(q.quantized).clamped();
  ObjectiveValue obj = objective.evaluate_with_gradient(out.image, objective_seed);
  if (objective.direction() == Direction::kMinimize) {
    for (double& g : obj.gradient.storage()) g = -g;
  }
  // Clamping is the output boundary only; its gradient passes through.
  out.gradient = quantize_vjp(backend.decode_vjp(q.quantized, obj.gradient));
  if (config.reg_lambda > 0.0) {
    out.gradient.values -= (config.reg_lambda * 2.0 / features.tokens()) * features.values;
  }
  out.value = obj.value;
  return out;
}

double step(OptimizationState& state, const Objective& objective,
            const TokenizerBackend& backend, const OptimizerConfig& config) {
  const int iteration = state.step + 1;

  if (config.noise) {
    const double sigma2 = noise_sigma2(config, iteration);
    if (sigma2 > 0.0) {
      Rng rng(noise_seed(config, iteration));
      std::normal_distribution<double> normal(0.0, std::sqrt(sigma2));
      for (int k = 0; k < state.features.tokens(); ++k)
        for (int d = 0; d < state.features.dim(); ++d) state.features.values(k, d) += normal(rng);
    }
  }

  const LatentGradient lg =
      latent_gradient(state.features, objective, backend, config, objective_seed(config, iteration));
  const Eigen::MatrixXd& grad = lg.gradient.values;
  if (!grad.allFinite()) {
    throw NonFiniteGradient(iteration, lg.image,
                            "non-finite gradient at step " + std::to_string(iteration) +
                                " (objective value " + std::to_string(lg.value) + ")");
  }

  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  auto& m = state.adam_m.values;
  auto& v = state.adam_v.values;
  m = b1 * m + (1.0 - b1) * grad;
  v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
  const double bias1 = 1.0 - std::pow(b1, iteration);
  const double bias2 = 1.0 - std::pow(b2, iteration);
  const double step_size = config.learning_rate / bias1;
  const double bias2_sqrt = std::sqrt(bias2);
  for (Eigen::Index i = 0; i < grad.size(); ++i) {
    const double denom = std::sqrt(v.data()[i]) / bias2_sqrt + config.adam_epsilon;
    state.features.values.data()[i] += step_size * (m.data()[i] / denom);
  }

  if (config.ema_decay) {
    const double d = *config.ema_decay;
    state.ema_features.values = d * state.ema_features.values + (1.0 - d) * state.features.values;
  } else {
    state.ema_features = state.features;
  }
  state.step = iteration;
  return lg.value;
}

void token_reset(OptimizationState& state, const ImageTensor& reference, const SoftMask& mask,
                 const TokenizerBackend& backend) {
  const ImageTensor current =
      backend.decode(quantize(state.features, backend.codebook()).quantized);
  state.features = backend.encode(blend(current, reference, mask));
  // Iterates from before the reset would reintroduce the discarded known region.
  state.ema_features = state.features;
}

nlohmann::json Trajectory::to_json() const {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& p : values) steps.push_back({{"step", p.step}, {"value", p.value}});
  nlohmann::json snaps = nlohmann::json::array();
  for (const auto& s : snapshots) snaps.push_back(s.step);
  return {{"values", steps}, {"snapshot_steps", snaps}};
}

ImageTensor final_image(const OptimizationState& state, const TokenizerBackend& backend,
                        const OptimizerConfig& config, TokenSequence* tokens) {
  const auto& source = config.ema_decay ? state.ema_features : state.features;
  QuantizeResult q = quantize(source, backend.codebook());
  if (tokens) *tokens = q.tokens;
  return backend.decode(q.quantized);
}

RunResult run_from_state(OptimizationState state, const Objective& objective,
                         const TokenizerBackend& backend, const OptimizerConfig& config,
                         const RunOptions& options) {
  config.validate();
  require(options.progress_stride >= 1, ErrorKind::kInvalidInput, "progress_stride must be >= 1");
  RunResult result;
  const int capacity = std::max(1, options.snapshot_capacity);
  while (state.step < config.iterations) {
    if (options.stop.stop_requested()) {
      result.partial = true;
      break;
    }
    const double value = step(state, objective, backend, config);
    if (options.inpaint && config.reset_interval && state.step % *config.reset_interval == 0) {
      token_reset(state, options.inpaint->reference, options.inpaint->mask, backend);
    }
    result.trajectory.values.push_back({state.step, value});
    const bool report =
        state.step % options.progress_stride == 0 || state.step == config.iterations;
    if (report && (options.on_progress || options.snapshots)) {
      std::optional<ImageTensor> snap;
      if (options.snapshots) {
        snap = backend.decode(quantize(state.features, backend.codebook()).quantized);
        result.trajectory.snapshots.push_back({state.step, *snap});
        while (static_cast<int>(result.trajectory.snapshots.size()) > capacity)
          result.trajectory.snapshots.pop_front();
      }
      if (options.on_progress) {
        options.on_progress(Progress{state.step, config.iterations, value, snap ? &*snap : nullptr});
      }
    }
  }
  result.used_ema = config.ema_decay.has_value();
  result.image = final_image(state, backend, config, &result.tokens);
  result.state = std::move(state);
  return result;
}

RunResult run(const std::optional<ImageTensor>& seed_image, const Objective& objective,
              const TokenizerBackend& backend, const OptimizerConfig& config,
              const RunOptions& options) {
  config.validate();
  OptimizationState state =
      (config.init == InitMode::kRandom || !seed_image)
          ? init_random(backend, config.sigma_init, derive_seed(config.seed, "init"))
          : init_from_image(*seed_image, backend);
  return run_from_state(std::move(state), objective, backend, config, options);
}

}  // namespace tokopt
