#pragma once

#include "tokopt/backend.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tokopt {

// Gaussian fit of a feature set: mean and unbiased covariance.
struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  int count = 0;

  // One sample per row; needs at least two rows.
  static FeatureStats from_rows(const Eigen::MatrixXd& rows);
};

// Fréchet distance between two Gaussians. The matrix square root is taken as
// sqrt(√Σ₁ Σ₂ √Σ₁) through symmetric eigendecompositions with negative
// eigenvalues clamped to 0. Throws kNumerical if either covariance has an
// eigenvalue below −psd_tolerance·max(1, λ_max).
double fid(const FeatureStats& a, const FeatureStats& b, double psd_tolerance = 1e-6);

struct InceptionScore {
  double mean = 0.0;
  double std = 0.0;
  int splits = 0;
};

// exp(mean_x KL(p(y|x) ‖ p(y))) per split over min(splits, N) contiguous
// splits; std is the population standard deviation across splits. Rows must
// be non-negative and sum to 1 within 1e−6.
InceptionScore inception_score(const Eigen::MatrixXd& posteriors, int splits = 10);

struct AlignmentScore {
  double mean = 0.0;
  int scored = 0;
  int missing = 0;
  bool partial = false;
  std::string variant;
  std::string convention;
};

// Mean scorer alignment between each available sample and its prompt. Absent
// samples are counted and flag the result as partial.
AlignmentScore prompt_alignment_scores(std::span<const std::optional<ImageTensor>> samples,
                                       std::span<const std::string> prompts,
                                       const ScorerBackend& scorer);

}  // namespace tokopt
