#pragma once

#include "tokopt/backend.hpp"
#include "tokopt/error.hpp"
#include "tokopt/objectives.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <stop_token>
#include <string>
#include <vector>

namespace tokopt {

struct NoiseSchedule {
  double sigma2_start = 0.3;
  int ramp_end_iter = 200;
};

enum class InitMode { kFromImage, kRandom };

struct OptimizerConfig {
  int iterations = 300;
  double learning_rate = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::optional<double> ema_decay = 0.98;
  std::optional<NoiseSchedule> noise;
  double reg_lambda = 0.0;
  std::optional<int> reset_interval;
  InitMode init = InitMode::kFromImage;
  double sigma_init = 0.3;
  std::uint64_t seed = 0;

  static constexpr double kDefaultRegLambda = 0.02;
  static constexpr int kDefaultResetInterval = 25;
  static constexpr int kFromScratchIterations = 400;

  // Text-guided editing recipe: 300 iterations, lr 0.1, EMA 0.98.
  static OptimizerConfig text_edit();
  // text_edit plus token noise and L2 regularisation.
  static OptimizerConfig with_tweaks();
  // with_tweaks plus token reset every 25 iterations.
  static OptimizerConfig inpainting();
  // with_tweaks, random initialisation, 400 iterations.
  static OptimizerConfig from_scratch();

  // Throws kConfiguration naming the offending field.
  void validate() const;

  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& doc);
  // Flat `key = value` text using the same kebab-case keys as the CLI flags.
  std::string to_key_value() const;
  static OptimizerConfig from_key_value(const std::string& text);

  bool operator==(const OptimizerConfig&) const;
};

bool operator==(const NoiseSchedule& a, const NoiseSchedule& b);

// σ²(step) = σ²_start·(1 + cos(π(step−1)/(ramp_end−1)))/2 for step ≤ ramp_end,
// 0 afterwards. Steps are 1-based. Returns 0 when noise is off.
double noise_sigma2(const OptimizerConfig& config, int step);

struct OptimizationState {
  LatentFeatures features;
  LatentFeatures adam_m;
  LatentFeatures adam_v;
  LatentFeatures ema_features;
  int step = 0;
};

OptimizationState init_from_image(const ImageTensor& image, const TokenizerBackend& backend);
OptimizationState init_random(const TokenizerBackend& backend, double sigma_init,
                              std::uint64_t seed);

// Thrown by step() when the gradient contains NaN/Inf.
class NonFiniteGradient : public Error {
 public:
  NonFiniteGradient(int step, ImageTensor snapshot, const std::string& message)
      : Error(ErrorKind::kNumerical, message), step_(step), snapshot_(std::move(snapshot)) {}
  int step() const { return step_; }
  const ImageTensor& snapshot() const { return snapshot_; }

 private:
  int step_;
  ImageTensor snapshot_;
};

// Seeds handed to the objective and the noise generator at a given 1-based
// iteration; both derive from config.seed.
std::uint64_t objective_seed(const OptimizerConfig& config, int step);
std::uint64_t noise_seed(const OptimizerConfig& config, int step);

struct LatentGradient {
  double value = 0.0;       // objective value in its own sign
  ImageTensor image;        // decode(quantize(features))
  LatentFeatures gradient;  // ascent direction w.r.t. the pre-quantization features
};

// Objective value and straight-through ascent gradient at `features`, with the
// L2 term −λ·mean_k‖ẑ_k‖² included. Minimised objectives are negated.
LatentGradient latent_gradient(const LatentFeatures& features, const Objective& objective,
                               const TokenizerBackend& backend, const OptimizerConfig& config,
                               std::uint64_t objective_seed);

// One iteration: optional noise, decode(quantize(ẑ)), objective plus
// −λ·mean_k‖ẑ_k‖², Adam ascent with straight-through gradients, EMA update.
// Returns the objective value (in the objective's own sign) seen this step.
double step(OptimizationState& state, const Objective& objective,
            const TokenizerBackend& backend, const OptimizerConfig& config);

// ẑ ← encode(blend(decode(quantize(ẑ)), reference, mask)). Adam moments are
// kept; the EMA restarts from the reset features.
void token_reset(OptimizationState& state, const ImageTensor& reference, const SoftMask& mask,
                 const TokenizerBackend& backend);

struct TrajectoryPoint {
  int step;
  double value;
};

struct Snapshot {
  int step;
  ImageTensor image;
};

struct Trajectory {
  std::vector<TrajectoryPoint> values;
  std::deque<Snapshot> snapshots;  // ring buffer, oldest dropped first

  nlohmann::json to_json() const;
};

struct Progress {
  int step;
  int iterations;
  double value;
  const ImageTensor* snapshot;  // null unless snapshots are requested
};

struct InpaintContext {
  ImageTensor reference;
  SoftMask mask;
};

struct RunOptions {
  std::function<void(const Progress&)> on_progress;
  int progress_stride = 10;
  bool snapshots = false;
  int snapshot_capacity = 40;
  std::stop_token stop;
  const InpaintContext* inpaint = nullptr;
};

struct RunResult {
  ImageTensor image;
  TokenSequence tokens;
  Trajectory trajectory;
  OptimizationState state;
  bool partial = false;
  bool used_ema = false;
};

// Full optimisation loop. `seed_image` is ignored when config.init is random;
// without a seed image the features are initialised randomly.
RunResult run(const std::optional<ImageTensor>& seed_image, const Objective& objective,
              const TokenizerBackend& backend, const OptimizerConfig& config,
              const RunOptions& options = {});

RunResult run_from_state(OptimizationState state, const Objective& objective,
                         const TokenizerBackend& backend, const OptimizerConfig& config,
                         const RunOptions& options = {});

// Final output: decode(quantize(EMA)) when EMA is on, else the last iterate.
ImageTensor final_image(const OptimizationState& state, const TokenizerBackend& backend,
                        const OptimizerConfig& config, TokenSequence* tokens = nullptr);

}  // namespace tokopt
