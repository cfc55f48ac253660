#pragma once

#include "tokopt/backend.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <string>

namespace tokopt {

// Deterministic tokenizer for CPU-only testing.
//
// A 3×32×32 image is cut into K=8 patches (2 rows × 4 columns of 16×8 pixels).
// Every patch shares one affine decoder u = A z + b followed by a logistic
// squashing, so each token position owns one patch. The encoder is the affine
// least-squares inverse of the decoder linearised at u = 0; codebook vectors
// are drawn small enough that the linearisation error stays far below the
// codebook spacing, which makes decode∘lookup images re-encode to the same
// tokens.
class ToyTokenizer final : public TokenizerBackend {
 public:
  static constexpr int kTokens = 8;
  static constexpr int kDim = 4;
  static constexpr int kDefaultCodebookSize = 64;
  static constexpr ImageShape kImageShape{3, 32, 32};
  static constexpr int kPatchRows = 2;
  static constexpr int kPatchCols = 4;
  static constexpr int kPatchHeight = 16;
  static constexpr int kPatchWidth = 8;
  // On images produced by decode_tokens, reconstruct() stays within this mean
  // absolute pixel error of the input.
  static constexpr double kReconstructionBound = 1e-9;

  explicit ToyTokenizer(std::uint64_t seed, int codebook_size = kDefaultCodebookSize);

  std::string variant() const override { return "toy-tokenizer"; }
  int num_tokens() const override { return kTokens; }
  int feature_dim() const override { return kDim; }
  const Codebook& codebook() const override { return codebook_; }
  ImageShape image_shape() const override { return kImageShape; }

  LatentFeatures encode(const ImageTensor& image) const override;
  ImageTensor decode_unclamped(const LatentFeatures& quantized) const override;
  LatentFeatures decode_vjp(const LatentFeatures& quantized,
                            const ImageTensor& grad_image) const override;

  std::uint64_t seed() const { return seed_; }
  // Encoder bias row: encode() of an all-zero image repeats it K times.
  const Eigen::RowVectorXd& encoder_bias() const { return enc_bias_; }
  // Decoder applied per patch to a zero feature row gives this patch.
  Eigen::VectorXd decoder_bias_patch() const;

 private:
  static constexpr int kPatchSize = 3 * kPatchHeight * kPatchWidth;

  template <typename Fn>
  static void for_patch_pixels(int position, Fn&& fn);

  std::uint64_t seed_;
  Codebook codebook_;
  Eigen::MatrixXd dec_weight_;      // kPatchSize × D
  Eigen::VectorXd dec_bias_;        // kPatchSize
  Eigen::MatrixXd enc_weight_;      // D × kPatchSize
  Eigen::RowVectorXd enc_bias_;     // D
};

// Deterministic CLIP stand-in.
//
// Image embedding: 4×4 average pooling of the 3×32×32 input down to 3×8×8,
// centred at 0.5, then a fixed seeded 16×192 linear map. Prompts are named
// unit vectors: "axis-0".."axis-15" are the standard basis, extra names come
// from the constructor, and any other text embeds to a unit vector seeded by
// a hash of the text. If the text contains a registered name, the longest such
// name wins, so "a photo of a class-2" resolves to "class-2".
class ToyScorer final : public ScorerBackend {
 public:
  static constexpr int kEmbedDim = 16;
  static constexpr ImageShape kInputShape{3, 32, 32};
  static constexpr int kPool = 4;

  explicit ToyScorer(std::uint64_t seed,
                     std::map<std::string, Eigen::VectorXd> prompts = {},
                     std::string variant = "toy-scorer");

  std::string variant() const override { return variant_; }
  int embed_dim() const override { return kEmbedDim; }
  ImageShape input_shape() const override { return kInputShape; }
  Eigen::VectorXd embed_text(std::string_view text) const override;
  Eigen::VectorXd embed_image(const ImageTensor& image) const override;
  ImageTensor embed_image_vjp(const ImageTensor& image,
                              const Eigen::VectorXd& grad_embedding) const override;

  // Image whose embedding is exactly scale·direction/|direction| (minimum-norm
  // solution, piecewise constant over pooling cells). Throws kInvalidInput if
  // the result leaves [0,1].
  ImageTensor image_for_embedding(const Eigen::VectorXd& direction, double scale = 1.0) const;

  // Copy of this scorer with additional registered prompts.
  std::shared_ptr<const ToyScorer> with_prompts(
      const std::map<std::string, Eigen::VectorXd>& prompts) const;

  const std::map<std::string, Eigen::VectorXd>& prompts() const { return prompts_; }
  std::uint64_t seed() const { return seed_; }

 private:
  static constexpr int kPooledSize = 3 * (32 / kPool) * (32 / kPool);

  std::uint64_t seed_;
  std::string variant_;
  Eigen::MatrixXd weight_;  // kEmbedDim × kPooledSize
  std::map<std::string, Eigen::VectorXd> prompts_;
};

// Logit-scaled variant of the toy scorer standing in for SigLIP in reports:
// score = scale·cos + bias with scale 10, bias −5.
class ToyLogitScorer final : public ScorerBackend {
 public:
  static constexpr double kLogitScale = 10.0;
  static constexpr double kLogitBias = -5.0;

  explicit ToyLogitScorer(std::shared_ptr<const ToyScorer> base) : base_(std::move(base)) {}

  std::string variant() const override { return "toy-siglip"; }
  int embed_dim() const override { return base_->embed_dim(); }
  ImageShape input_shape() const override { return base_->input_shape(); }
  Eigen::VectorXd embed_text(std::string_view text) const override {
    return base_->embed_text(text);
  }
  Eigen::VectorXd embed_image(const ImageTensor& image) const override {
    return base_->embed_image(image);
  }
  ImageTensor embed_image_vjp(const ImageTensor& image,
                              const Eigen::VectorXd& grad_embedding) const override {
    return base_->embed_image_vjp(image, grad_embedding);
  }
  double alignment_score(const Eigen::VectorXd& image_embedding,
                         const Eigen::VectorXd& text_embedding) const override;
  std::string score_convention() const override { return "logit: 10*cos - 5"; }

  std::shared_ptr<const ToyLogitScorer> with_prompts(
      const std::map<std::string, Eigen::VectorXd>& prompts) const {
    return std::make_shared<ToyLogitScorer>(base_->with_prompts(prompts));
  }

 private:
  std::shared_ptr<const ToyScorer> base_;
};

}  // namespace tokopt
