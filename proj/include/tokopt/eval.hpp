#pragma once

#include "tokopt/backend.hpp"
#include "tokopt/metrics.hpp"
#include "tokopt/objectives.hpp"
#include "tokopt/optimizer.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stop_token>
#include <string>
#include <vector>

namespace tokopt {

struct LabeledImage {
  std::string id;
  int label = 0;
  ImageTensor image;
};

struct LabeledImageSet {
  std::string id;
  std::vector<std::string> class_names;
  std::vector<LabeledImage> images;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<int> class_counts() const;
};

// Reads root/<class-dir>/*.png, classes in sorted directory order. The optional
// table has lines "<class-dir>\t<lemma>[, <lemma>...]"; the first lemma names
// the class, otherwise the directory name is used. Images are resized to
// `shape` when it is given and differs.
LabeledImageSet load_image_tree(const std::filesystem::path& root,
                                const std::optional<std::filesystem::path>& class_table = {},
                                std::optional<ImageShape> shape = {});

// Synthetic labelled images on the toy tokenizer. Each class has a prototype
// token sequence; members copy the prototype at the first half of the
// positions and draw the rest uniformly.
struct ToyDataset {
  LabeledImageSet images;
  std::vector<TokenSequence> prototypes;
  std::map<std::string, Eigen::VectorXd> prompt_vectors;  // class name -> scorer direction
};

ToyDataset make_toy_dataset(const TokenizerBackend& tokenizer, const ScorerBackend& scorer,
                            int num_classes, int per_class, std::uint64_t seed);

struct SeedEntry {
  std::string image_id;
  int label = 0;
  ImageTensor image;
  TokenSequence tokens;
};

struct SeedManifest {
  std::string dataset_id;
  int per_class = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> image_ids;

  nlohmann::json to_json() const;
  bool operator==(const SeedManifest&) const = default;
};

struct SeedSet {
  std::vector<SeedEntry> entries;
  SeedManifest manifest;

  std::size_t size() const { return entries.size(); }
};

// Balanced sampling without replacement: n_total / classes images per class,
// drawn by a seeded Fisher-Yates shuffle of each class's members.
SeedSet sample_seed_set(const LabeledImageSet& dataset, int n_total, std::uint64_t seed,
                        const TokenizerBackend& tokenizer);

struct Prompt {
  std::string text;
  int label = 0;
};

struct PromptSet {
  static constexpr int kDefaultCount = 50000;
  std::vector<Prompt> prompts;
  int target = kDefaultCount;

  std::vector<int> per_class_counts(int num_classes) const;
  std::vector<std::string> texts() const;
};

// Splits `total` proportionally to `weights` with largest-remainder rounding
// (ties -> lowest index). All-zero weights split uniformly.
std::vector<int> largest_remainder(std::span<const int> weights, int total);

// "a photo of a {name}" prompts, class-major order, counts by largest
// remainder over `class_stats`.
PromptSet build_prompts(std::span<const int> class_stats, std::span<const std::string> class_names,
                        int n_prompts = PromptSet::kDefaultCount);

struct AssociationMode {
  enum class Kind { kRandom, kTop1, kTopKPercent };
  Kind kind = Kind::kTopKPercent;
  double fraction = 0.01;  // for kTopKPercent, in (0, 1]

  // "random", "top1" or "topk:<p>%" (also "topk:<p>" with p in percent).
  static AssociationMode parse(const std::string& text);
  std::string str() const;
  // ⌈fraction·n⌉ clamped to [1, n].
  int top_k(int n) const;
};

struct Association {
  AssociationMode mode;
  std::vector<int> mapping;  // prompt index -> seed index
  std::string similarity_source;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

// Core of `associate` on an explicit prompts × seeds similarity matrix. Ties
// in the ranking go to the lower seed index.
Association associate_from_similarity(const Eigen::MatrixXd& similarity, AssociationMode mode,
                                      std::uint64_t seed, std::string similarity_source = {});

// Cosine similarity between prompt text embeddings and seed image embeddings.
Eigen::MatrixXd prompt_seed_similarity(const PromptSet& prompts, const SeedSet& seeds,
                                       const ScorerBackend& scorer);

// `scorer` may be null for random mode only.
Association associate(const PromptSet& prompts, const SeedSet& seeds, AssociationMode mode,
                      const ScorerBackend* scorer, std::uint64_t seed);

using ObjectiveFactory = std::function<std::unique_ptr<Objective>(const Prompt&)>;

struct SampleRecord {
  int prompt_index = 0;
  std::string id;      // content address of the sample directory
  std::string status;  // "ok" or "failed"
  std::string error;
  double final_value = 0.0;
  bool resumed = false;
};

struct SampleStore {
  std::filesystem::path dir;
  std::vector<SampleRecord> records;

  int completed() const;
  int failed() const;
  // Final image of a prompt, read back from its PNG; empty if it failed.
  std::optional<ImageTensor> load_image(int prompt_index) const;
  std::optional<TokenSequence> load_tokens(int prompt_index) const;
  nlohmann::json manifest() const;
};

struct BatchOptions {
  std::filesystem::path store_dir;
  int workers = 1;
  std::function<void(const std::string&)> log;
  std::stop_token stop;
};

// Runs one optimisation per prompt, initialised from its associated seed
// (random init when the config asks for it). Every sample is written to
// samples/<id>/ with image.png, tokens.json and summary.json; summary.json is
// written last, and a prompt whose summary exists is not recomputed.
// manifest.json lists every record. Per-sample failures are logged and kept
// in the manifest.
SampleStore generate_batch(const Association& association, const PromptSet& prompts,
                           const SeedSet& seeds, const ObjectiveFactory& objective_factory,
                           const OptimizerConfig& config, const TokenizerBackend& tokenizer,
                           const BatchOptions& options);

// Adam directly on pixels, clamped to [0,1] after every step. Uses the
// optimiser's learning rate, betas, epsilon and per-step objective seeds.
ImageTensor pixel_adversarial_baseline(const ImageTensor& seed_image, const Objective& objective,
                                       int iterations, const OptimizerConfig& config = {});

// Features and class posteriors for FID/IS.
class FeatureBackend {
 public:
  virtual ~FeatureBackend() = default;
  virtual std::string variant() const = 0;
  virtual Eigen::VectorXd features(const ImageTensor& image) const = 0;
  virtual Eigen::VectorXd class_posteriors(const ImageTensor& image) const = 0;
};

// Scorer image embeddings as features; posteriors are
// softmax(temperature · cos(embedding, class prompt)).
class ScorerFeatureBackend final : public FeatureBackend {
 public:
  static constexpr double kDefaultTemperature = 20.0;

  ScorerFeatureBackend(std::shared_ptr<const ScorerBackend> scorer,
                       std::vector<Eigen::VectorXd> class_embeddings,
                       double temperature = kDefaultTemperature);

  std::string variant() const override;
  Eigen::VectorXd features(const ImageTensor& image) const override;
  Eigen::VectorXd class_posteriors(const ImageTensor& image) const override;

 private:
  std::shared_ptr<const ScorerBackend> scorer_;
  std::vector<Eigen::VectorXd> classes_;
  double temperature_;
};

struct EvalConfig {
  BackendConfig tokenizer = BackendConfig::of_kind("toy-tokenizer");
  BackendConfig scorer = BackendConfig::of_kind("toy-scorer");
  BackendConfig siglip = BackendConfig::of_kind("toy-siglip");
  // "toy" or a directory-per-class image tree.
  std::string dataset = "toy";
  std::string class_table;
  int toy_classes = 4;
  int toy_per_class = 8;
  int n_seeds = 16;
  int n_prompts = 64;
  AssociationMode association;
  OptimizerConfig optimizer = desk_optimizer();
  CropSmoothing crops;
  double posterior_temperature = ScorerFeatureBackend::kDefaultTemperature;
  int is_splits = 10;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string store_dir = "eval-store";

  static OptimizerConfig desk_optimizer();
  void validate() const;
  nlohmann::json to_json() const;
  static EvalConfig from_json(const nlohmann::json& doc);
  // FNV-1a over the canonical JSON, excluding the worker count and store path.
  std::string hash() const;
};

struct MetricsReport {
  double fid = 0.0;
  double is_mean = 0.0;
  double is_std = 0.0;
  double clip_score = 0.0;
  double siglip_score = 0.0;
  int sample_count = 0;
  int failed_count = 0;
  bool partial = false;
  std::string feature_variant;
  std::string clip_variant;
  std::string siglip_variant;
  std::string siglip_convention;
  std::string config_hash;
  double seconds = 0.0;  // wall clock; excluded from hash()

  nlohmann::json to_json() const;
  std::string hash() const;
};

struct EvalArtifacts {
  SeedSet seeds;
  PromptSet prompts;
  Association association;
  SampleStore store;
  MetricsReport report;
};

// Dataset -> seeds -> prompts -> association -> generation -> metrics.
EvalArtifacts run_evaluation(const EvalConfig& config,
                             std::function<void(const std::string&)> log = {});

struct SweepRow {
  int iterations = 0;
  double fid = 0.0;
  double is_mean = 0.0;
  double is_std = 0.0;
  double seconds = 0.0;  // this cell
  double elapsed = 0.0;  // since the sweep started
};

// One evaluation per iteration count, each in its own store subdirectory.
std::vector<SweepRow> iteration_sweep(const EvalConfig& base, std::span<const int> iterations,
                                      std::function<void(const std::string&)> log = {});
// Columns: iterations,fid,is,is_std,seconds,elapsed.
std::string sweep_to_csv(std::span<const SweepRow> rows);

}  // namespace tokopt
