#pragma once

#include "tokopt/backend.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace tokopt {

struct ClassPartition {
  std::string id;
  std::vector<std::string> prompts;
  std::vector<int> assignment;  // per image, in [0, prompts.size())

  int num_classes() const { return static_cast<int>(prompts.size()); }
  nlohmann::json to_json() const;
  static ClassPartition from_json(const nlohmann::json& doc);
};

// Labels each image with the prompt of highest cosine similarity (ties ->
// lowest prompt index). Images are resized to the scorer input.
ClassPartition assign_classes(std::span<const ImageTensor> images,
                              const std::vector<std::string>& prompts, const ScorerBackend& scorer,
                              std::string id = {});

struct TokenClassStats {
  int num_tokens = 0;
  int dim = 0;
  std::vector<Eigen::MatrixXd> means;                     // [class] K×D
  std::vector<std::vector<Eigen::MatrixXd>> covariances;  // [class][position] D×D
  std::vector<int> counts;

  int num_classes() const { return static_cast<int>(counts.size()); }
};

// Per class and position: sample mean and unbiased covariance of the codebook
// embeddings. Every class needs at least two members (kDegenerateClass).
TokenClassStats fit_token_stats(std::span<const LatentFeatures> token_features,
                                const ClassPartition& partition);

struct ImportanceProfile {
  Eigen::VectorXd raw;
  Eigen::VectorXd normalized;
  bool all_zero = false;  // raw ≡ 0; normalized is then all zeros

  int argmax() const;
  nlohmann::json to_json() const;
  // CSV with header position,value,normalized and one row per position.
  std::string to_csv() const;
};

// g(k) = spectral norm of the unbiased covariance of the class-mean vectors at
// position k; normalized = g / max g.
ImportanceProfile importance_profile(const TokenClassStats& stats);

using ImageCriterion = std::function<double(const ImageTensor& decoded, const ImageTensor& original)>;

struct TokenSearchResult {
  int best_index = 0;
  double score = 0.0;
  ImageTensor edited_image;
  TokenSequence edited_tokens;
};

// Exhaustive search over all codebook replacements at `position`, maximising
// criterion(decode(Replace_k(Tok(image), v)), image). Ties -> lowest index.
TokenSearchResult single_token_search(const ImageTensor& image, int position,
                                      const TokenizerBackend& backend,
                                      const ImageCriterion& criterion = mean_abs_difference,
                                      int workers = 1);

struct LabeledTokens {
  std::vector<TokenSequence> tokens;
  std::vector<int> labels;
};

// Count table of (token value at position) -> class, Laplace-smoothed and
// backed off to the training class prior for unseen values; predicts the
// argmax class (ties -> lowest class). Returns validation accuracy.
double per_token_probe(const LabeledTokens& train, const LabeledTokens& val, int position,
                       int num_classes, double smoothing = 1.0);

struct ProbeData {
  // Exactly one of the two is populated.
  std::vector<LatentFeatures> features;
  std::vector<TokenSequence> tokens;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  bool discrete() const { return !tokens.empty(); }
};

struct MaskingProbeConfig {
  int num_classes = 2;
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 0.1;
  double position_dropout = 0.25;
  double weight_decay = 1e-4;
  int embed_dim = 8;  // learned table width for discrete tokens
  std::uint64_t seed = 0;
};

struct MaskingProbeResult {
  std::vector<int> removal_order;       // least -> most important
  std::vector<double> accuracy_trace;  // unmasked accuracy before each removal

  std::string to_csv() const;
};

// Linear probing with iterative removal of the least useful position: train a
// softmax head with position dropout, evaluate, mask each remaining position
// in turn, permanently drop the one whose masking costs least, retrain.
MaskingProbeResult iterative_masking_probe(const ProbeData& train, const ProbeData& val,
                                           const MaskingProbeConfig& config);

}  // namespace tokopt
