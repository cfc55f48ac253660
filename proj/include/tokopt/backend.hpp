#pragma once

#include "tokopt/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <variant>

namespace tokopt {

// A 1D tokenizer: K tokens of dimension D over a fixed codebook.
//
// decode_unclamped/decode_vjp form the differentiable decoder. Implementations
// are immutable after construction and safe for concurrent const use.
class TokenizerBackend {
 public:
  virtual ~TokenizerBackend() = default;

  virtual std::string variant() const = 0;
  virtual int num_tokens() const = 0;
  virtual int feature_dim() const = 0;
  virtual const Codebook& codebook() const = 0;
  virtual ImageShape image_shape() const = 0;

  // Image -> K×D pre-quantization features.
  virtual LatentFeatures encode(const ImageTensor& image) const = 0;
  // K×D quantized features -> image before the final [0,1] clamp.
  virtual ImageTensor decode_unclamped(const LatentFeatures& quantized) const = 0;
  // Vector-Jacobian product of decode_unclamped at `quantized`.
  virtual LatentFeatures decode_vjp(const LatentFeatures& quantized,
                                    const ImageTensor& grad_image) const = 0;

  ImageTensor decode(const LatentFeatures& quantized) const;
  TokenSequence tokenize(const ImageTensor& image) const;
  ImageTensor decode_tokens(const TokenSequence& tokens) const;
  // decode(quantize(encode(image))).
  ImageTensor reconstruct(const ImageTensor& image) const;

 protected:
  void check_features(const LatentFeatures& features, const char* what) const;
};

// Text-image scorer (a CLIP-style dual encoder).
class ScorerBackend {
 public:
  virtual ~ScorerBackend() = default;

  virtual std::string variant() const = 0;
  virtual int embed_dim() const = 0;
  // Images passed to embed_image must have this shape; objectives resize.
  virtual ImageShape input_shape() const = 0;
  virtual Eigen::VectorXd embed_text(std::string_view text) const = 0;
  virtual Eigen::VectorXd embed_image(const ImageTensor& image) const = 0;
  virtual ImageTensor embed_image_vjp(const ImageTensor& image,
                                      const Eigen::VectorXd& grad_embedding) const = 0;

  // Prompt alignment score used for reporting. CLIP-style scorers use cosine
  // similarity; logit-scaled scorers override and name their convention.
  virtual double alignment_score(const Eigen::VectorXd& image_embedding,
                                 const Eigen::VectorXd& text_embedding) const;
  virtual std::string score_convention() const { return "cosine"; }
};

struct QuantizeResult {
  TokenSequence tokens;
  LatentFeatures quantized;
};

// Nearest codebook row per feature row (Euclidean, ties -> lowest index).
QuantizeResult quantize(const LatentFeatures& features, const Codebook& codebook);

// Straight-through backward rule: d quantized / d features = identity.
inline LatentFeatures quantize_vjp(const LatentFeatures& grad_quantized) { return grad_quantized; }

LatentFeatures lookup(const TokenSequence& tokens, const Codebook& codebook);

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
// Gradient of cosine_similarity(a, b) with respect to a.
Eigen::VectorXd cosine_similarity_grad(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

// Backend registry. Kinds: toy-tokenizer, toy-scorer, toy-siglip, titok, clip,
// siglip.
struct BackendConfig {
  std::string kind;
  std::uint64_t seed = 0;
  std::string variant;
  std::string path;
  std::optional<int> codebook_size;
  // Extra named prompt vectors for the toy scorer, name -> embedding.
  nlohmann::json prompts = nlohmann::json::object();

  static BackendConfig of_kind(std::string kind, std::uint64_t seed = 0) {
    BackendConfig c;
    c.kind = std::move(kind);
    c.seed = seed;
    return c;
  }
  static BackendConfig from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
};

using AnyBackend =
    std::variant<std::shared_ptr<const TokenizerBackend>, std::shared_ptr<const ScorerBackend>>;

AnyBackend load_backend(const BackendConfig& config);
std::shared_ptr<const TokenizerBackend> load_tokenizer(const BackendConfig& config);
std::shared_ptr<const ScorerBackend> load_scorer(const BackendConfig& config);

// Published shape metadata of the pretrained 1D tokenizer variants.
struct TokenizerVariantInfo {
  std::string name;
  int num_tokens;
  int codebook_size;
  bool vector_quantized;
};
std::optional<TokenizerVariantInfo> find_tokenizer_variant(std::string_view name);

}  // namespace tokopt
