#pragma once

#include "tokopt/backend.hpp"
#include "tokopt/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <memory>
#include <vector>

namespace tokopt {

// Separable antialiased bilinear resize (triangle filter whose support widens
// with the downscale factor). Linear in the input, so the adjoint is exact.
class Resizer {
 public:
  Resizer(int in_height, int in_width, int out_height, int out_width);

  ImageTensor apply(const ImageTensor& image) const;
  ImageTensor adjoint(const ImageTensor& grad_output, int channels) const;

 private:
  Eigen::MatrixXd rows_;  // out_h × in_h
  Eigen::MatrixXd cols_;  // out_w × in_w
};

struct CropWindow {
  int y = 0;
  int x = 0;
  int side = 0;
};

// Square crops with side round(√frac · min(H, W)) at uniform offsets drawn
// from a stream derived from `seed`.
std::vector<CropWindow> sample_crops(int height, int width, int n_crops, double crop_area_frac,
                                     std::uint64_t seed);
ImageTensor crop(const ImageTensor& image, const CropWindow& window);

// Scorer embedding of the whole image, resized to the scorer input.
Eigen::VectorXd embed_whole_image(const ScorerBackend& scorer, const ImageTensor& image);

enum class Direction { kMaximize, kMinimize };

struct ObjectiveValue {
  double value = 0.0;
  ImageTensor gradient;  // d value / d image
};

// Differentiable image objective. Randomness comes only from the explicit
// seed argument.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual Direction direction() const = 0;
  virtual double evaluate(const ImageTensor& image, std::uint64_t seed) const = 0;
  virtual ObjectiveValue evaluate_with_gradient(const ImageTensor& image,
                                                std::uint64_t seed) const = 0;
  virtual nlohmann::json describe() const = 0;
};

struct CropSmoothing {
  static constexpr int kDefaultCrops = 8;
  static constexpr double kDefaultAreaFrac = 0.75;
  int n_crops = kDefaultCrops;  // 0 = whole image
  double area_frac = kDefaultAreaFrac;
};

// Mean cosine similarity between crop embeddings and the prompt embedding.
double scorer_similarity(const ImageTensor& image, const Eigen::VectorXd& prompt_embedding,
                         const ScorerBackend& scorer, CropSmoothing crops, std::uint64_t seed);
ObjectiveValue scorer_similarity_with_gradient(const ImageTensor& image,
                                               const Eigen::VectorXd& prompt_embedding,
                                               const ScorerBackend& scorer, CropSmoothing crops,
                                               std::uint64_t seed);

class ScorerSimilarityObjective final : public Objective {
 public:
  ScorerSimilarityObjective(std::shared_ptr<const ScorerBackend> scorer,
                            Eigen::VectorXd prompt_embedding, CropSmoothing crops = {},
                            std::string prompt_text = {});

  Direction direction() const override { return Direction::kMaximize; }
  double evaluate(const ImageTensor& image, std::uint64_t seed) const override;
  ObjectiveValue evaluate_with_gradient(const ImageTensor& image,
                                        std::uint64_t seed) const override;
  nlohmann::json describe() const override;

 private:
  std::shared_ptr<const ScorerBackend> scorer_;
  Eigen::VectorXd prompt_;
  CropSmoothing crops_;
  std::string prompt_text_;
};

// H×W weights in [0,1]; 1 marks given pixels, 0 pixels to inpaint.
class SoftMask {
 public:
  SoftMask() = default;
  explicit SoftMask(Eigen::MatrixXd weights);

  int height() const { return static_cast<int>(weights_.rows()); }
  int width() const { return static_cast<int>(weights_.cols()); }
  double operator()(int y, int x) const { return weights_(y, x); }
  const Eigen::MatrixXd& weights() const { return weights_; }
  double mass() const { return weights_.sum(); }

  static SoftMask from_image(const ImageTensor& gray);
  ImageTensor to_image() const;

 private:
  Eigen::MatrixXd weights_;
};

// Weighted mean absolute difference: Σ m|a−b| / Σ m with the mask broadcast
// over channels. Throws kDegenerateMask for an all-zero mask.
double masked_l1(const ImageTensor& image, const ImageTensor& reference, const SoftMask& mask);
ObjectiveValue masked_l1_with_gradient(const ImageTensor& image, const ImageTensor& reference,
                                       const SoftMask& mask);

class MaskedL1Objective final : public Objective {
 public:
  MaskedL1Objective(ImageTensor reference, SoftMask mask);

  Direction direction() const override { return Direction::kMinimize; }
  double evaluate(const ImageTensor& image, std::uint64_t seed) const override;
  ObjectiveValue evaluate_with_gradient(const ImageTensor& image,
                                        std::uint64_t seed) const override;
  nlohmann::json describe() const override;

  const ImageTensor& reference() const { return reference_; }
  const SoftMask& mask() const { return mask_; }

 private:
  ImageTensor reference_;
  SoftMask mask_;
};

// Gaussian blur with standard deviation `blur_radius` (kernel truncated at
// ⌈3σ⌉, edge pixels replicated), clamped to [0,1]. Inputs are thresholded at
// 0.5 first. Radius 0 returns the binary mask unchanged.
SoftMask soft_mask_from_binary(const Eigen::MatrixXd& binary_mask, double blur_radius);

// mask ⊙ reference + (1 − mask) ⊙ image.
ImageTensor blend(const ImageTensor& image, const ImageTensor& reference, const SoftMask& mask);

}  // namespace tokopt
