#include "tokopt/toy_backends.hpp"

#include "tokopt/error.hpp"
#include "tokopt/random.hpp"

#include <cmath>

namespace tokopt {

namespace {

Eigen::MatrixXd gaussian_matrix(Rng& rng, int rows, int cols, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = normal(rng);
  return m;
}

double logistic(double u) { return 1.0 / (1.0 + std::exp(-u)); }

// Decoder weight scale: pre-activations stay within roughly ±1, where the
// logistic is close enough to linear for the encoder's inverse.
constexpr double kDecoderWeightStd = 0.08;
constexpr double kDecoderBiasStd = 0.1;
constexpr double kCodebookStd = 1.0;

}  // namespace

template <typename Fn>
void ToyTokenizer::for_patch_pixels(int position, Fn&& fn) {
  const int y0 = (position / kPatchCols) * kPatchHeight;
  const int x0 = (position % kPatchCols) * kPatchWidth;
  int i = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < kPatchHeight; ++y)
      for (int x = 0; x < kPatchWidth; ++x) fn(i++, c, y0 + y, x0 + x);
}

ToyTokenizer::ToyTokenizer(std::uint64_t seed, int codebook_size) : seed_(seed) {
  require(codebook_size >= 1, ErrorKind::kInvalidInput, "toy tokenizer: codebook_size must be >= 1");
  Rng rng(derive_seed(seed, "toy-tokenizer"));
  codebook_ = Codebook(gaussian_matrix(rng, codebook_size, kDim, kCodebookStd));
  dec_weight_ = gaussian_matrix(rng, kPatchSize, kDim, kDecoderWeightStd);
  dec_bias_ = gaussian_matrix(rng, kPatchSize, 1, kDecoderBiasStd).col(0);
  // logistic(u) ≈ 0.5 + u/4  =>  u ≈ 4x − 2  =>  z ≈ A⁺(4x − 2 − b).
  const Eigen::MatrixXd pinv =
      (dec_weight_.transpose() * dec_weight_).ldlt().solve(dec_weight_.transpose());
  enc_weight_ = 4.0 * pinv;
  enc_bias_ = (-pinv * (Eigen::VectorXd::Constant(kPatchSize, 2.0) + dec_bias_)).transpose();
}

Eigen::VectorXd ToyTokenizer::decoder_bias_patch() const {
  Eigen::VectorXd patch(kPatchSize);
  for (int i = 0; i < kPatchSize; ++i) patch[i] = logistic(dec_bias_[i]);
  return patch;
}

LatentFeatures ToyTokenizer::encode(const ImageTensor& image) const {
  check_shape(image, kImageShape, "toy tokenizer encode");
  LatentFeatures out;
  out.values.resize(kTokens, kDim);
  Eigen::VectorXd patch(kPatchSize);
  for (int k = 0; k < kTokens; ++k) {
    for_patch_pixels(k, [&](int i, int c, int y, int x) { patch[i] = image.at(c, y, x); });
    out.values.row(k) = (enc_weight_ * patch).transpose() + enc_bias_;
  }
  return out;
}

ImageTensor ToyTokenizer::decode_unclamped(const LatentFeatures& quantized) const {
  check_features(quantized, "toy tokenizer decode");
  ImageTensor image(kImageShape);
  for (int k = 0; k < kTokens; ++k) {
    const Eigen::VectorXd u = dec_weight_ * quantized.values.row(k).transpose() + dec_bias_;
    for_patch_pixels(k, [&](int i, int c, int y, int x) { image.at(c, y, x) = logistic(u[i]); });
  }
  return image;
}

LatentFeatures ToyTokenizer::decode_vjp(const LatentFeatures& quantized,
                                        const ImageTensor& grad_image) const {
  check_features(quantized, "toy tokenizer decode_vjp");
  check_shape(grad_image, kImageShape, "toy tokenizer decode_vjp gradient");
  LatentFeatures grad;
  grad.values.resize(kTokens, kDim);
  Eigen::VectorXd grad_u(kPatchSize);
  for (int k = 0; k < kTokens; ++k) {
    const Eigen::VectorXd u = dec_weight_ * quantized.values.row(k).transpose() + dec_bias_;
    for_patch_pixels(k, [&](int i, int c, int y, int x) {
      const double s = logistic(u[i]);
      grad_u[i] = grad_image.at(c, y, x) * s * (1.0 - s);
    });
    grad.values.row(k) = (dec_weight_.transpose() * grad_u).transpose();
  }
  return grad;
}

// --- scorer ---------------------------------------------------------------

namespace {

constexpr int kPooledSide = 32 / ToyScorer::kPool;

Eigen::VectorXd pool(const ImageTensor& image) {
  Eigen::VectorXd pooled = Eigen::VectorXd::Zero(3 * kPooledSide * kPooledSide);
  const double norm = 1.0 / (ToyScorer::kPool * ToyScorer::kPool);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const int cell = (c * kPooledSide + y / ToyScorer::kPool) * kPooledSide + x / ToyScorer::kPool;
        pooled[cell] += image.at(c, y, x) * norm;
      }
  return pooled;
}

Eigen::VectorXd hashed_unit_vector(std::string_view text, std::uint64_t seed, int dim) {
  Rng rng(derive_seed(seed, "toy-scorer-text", fnv1a64(text)));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = normal(rng);
  return v.normalized();
}

}  // namespace

ToyScorer::ToyScorer(std::uint64_t seed, std::map<std::string, Eigen::VectorXd> prompts,
                     std::string variant)
    : seed_(seed), variant_(std::move(variant)) {
  Rng rng(derive_seed(seed, "toy-scorer"));
  weight_ = gaussian_matrix(rng, kEmbedDim, kPooledSize, 1.0 / std::sqrt(double(kPooledSize)));
  for (int i = 0; i < kEmbedDim; ++i) {
    prompts_.emplace("axis-" + std::to_string(i), Eigen::VectorXd::Unit(kEmbedDim, i));
  }
  for (auto& [name, v] : prompts) {
    require(v.size() == kEmbedDim && v.allFinite() && v.norm() > 0, ErrorKind::kInvalidInput,
            "toy scorer: prompt '" + name + "' must be a finite nonzero " +
                std::to_string(kEmbedDim) + "-vector");
    prompts_[name] = v.normalized();
  }
}

Eigen::VectorXd ToyScorer::embed_text(std::string_view text) const {
  if (auto it = prompts_.find(std::string(text)); it != prompts_.end()) return it->second;
  const Eigen::VectorXd* best = nullptr;
  std::size_t best_length = 0;
  for (const auto& [name, v] : prompts_) {
    if (name.size() > best_length && text.find(name) != std::string_view::npos) {
      best = &v;
      best_length = name.size();
    }
  }
  if (best) return *best;
  return hashed_unit_vector(text, seed_, kEmbedDim);
}

Eigen::VectorXd ToyScorer::embed_image(const ImageTensor& image) const {
  check_shape(image, kInputShape, "toy scorer embed_image");
  return weight_ * (pool(image).array() - 0.5).matrix();
}

ImageTensor ToyScorer::embed_image_vjp(const ImageTensor& image,
                                       const Eigen::VectorXd& grad_embedding) const {
  check_shape(image, kInputShape, "toy scorer embed_image_vjp");
  require(grad_embedding.size() == kEmbedDim, ErrorKind::kInvalidInput,
          "toy scorer embed_image_vjp: gradient dimension mismatch");
  const Eigen::VectorXd grad_pooled = weight_.transpose() * grad_embedding;
  ImageTensor grad(kInputShape);
  const double norm = 1.0 / (kPool * kPool);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const int cell = (c * kPooledSide + y / kPool) * kPooledSide + x / kPool;
        grad.at(c, y, x) = grad_pooled[cell] * norm;
      }
  return grad;
}

ImageTensor ToyScorer::image_for_embedding(const Eigen::VectorXd& direction, double scale) const {
  require(direction.size() == kEmbedDim && direction.norm() > 0, ErrorKind::kInvalidInput,
          "image_for_embedding: direction must be a nonzero " + std::to_string(kEmbedDim) +
              "-vector");
  const Eigen::VectorXd target = scale * direction.normalized();
  const Eigen::VectorXd offset =
      weight_.transpose() * (weight_ * weight_.transpose()).ldlt().solve(target);
  ImageTensor image(kInputShape);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const int cell = (c * kPooledSide + y / kPool) * kPooledSide + x / kPool;
        image.at(c, y, x) = 0.5 + offset[cell];
      }
  check_unit_range(image, "image_for_embedding (reduce scale)");
  return image;
}

std::shared_ptr<const ToyScorer> ToyScorer::with_prompts(
    const std::map<std::string, Eigen::VectorXd>& prompts) const {
  auto copy = std::make_shared<ToyScorer>(*this);
  for (const auto& [name, v] : prompts) {
    require(v.size() == kEmbedDim && v.allFinite() && v.norm() > 0, ErrorKind::kInvalidInput,
            "toy scorer: prompt '" + name + "' must be a finite nonzero vector");
    copy->prompts_[name] = v.normalized();
  }
  return copy;
}

double ToyLogitScorer::alignment_score(const Eigen::VectorXd& image_embedding,
                                       const Eigen::VectorXd& text_embedding) const {
  return kLogitScale * cosine_similarity(image_embedding, text_embedding) + kLogitBias;
}

}  // namespace tokopt
