#include "tokopt/objectives.hpp"

#include "tokopt/error.hpp"
#include "tokopt/random.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace tokopt {

namespace {

Eigen::MatrixXd triangle_weights(int in_size, int out_size) {
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(out_size, in_size);
  const double scale = static_cast<double>(in_size) / out_size;
  const double support = std::max(scale, 1.0);
  for (int i = 0; i < out_size; ++i) {
    const double center = (i + 0.5) * scale;
    const int lo = std::max(0, static_cast<int>(std::floor(center - support)));
    const int hi = std::min(in_size - 1, static_cast<int>(std::ceil(center + support)));
    double total = 0.0;
    for (int j = lo; j <= hi; ++j) {
      const double t = std::abs((j + 0.5 - center) / support);
      const double v = std::max(0.0, 1.0 - t);
      w(i, j) = v;
      total += v;
    }
    if (total > 0) {
      w.row(i) /= total;
    } else {
      w(i, std::clamp(static_cast<int>(center), 0, in_size - 1)) = 1.0;
    }
  }
  return w;
}

}  // namespace

Resizer::Resizer(int in_height, int in_width, int out_height, int out_width)
    : rows_(triangle_weights(in_height, out_height)), cols_(triangle_weights(in_width, out_width)) {}

ImageTensor Resizer::apply(const ImageTensor& image) const {
  require(image.height() == rows_.cols() && image.width() == cols_.cols(), ErrorKind::kInvalidInput,
          "resize: input shape mismatch");
  const int oh = static_cast<int>(rows_.rows());
  const int ow = static_cast<int>(cols_.rows());
  ImageTensor out(ImageShape{image.channels(), oh, ow});
  for (int c = 0; c < image.channels(); ++c) {
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> in(
        image.data().data() + static_cast<std::size_t>(c) * image.height() * image.width(),
        image.height(), image.width());
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> dst(
        out.data().data() + static_cast<std::size_t>(c) * oh * ow, oh, ow);
    dst = rows_ * in * cols_.transpose();
  }
  return out;
}

ImageTensor Resizer::adjoint(const ImageTensor& grad_output, int channels) const {
  const int ih = static_cast<int>(rows_.cols());
  const int iw = static_cast<int>(cols_.cols());
  const int oh = static_cast<int>(rows_.rows());
  const int ow = static_cast<int>(cols_.rows());
  ImageTensor grad(ImageShape{channels, ih, iw});
  for (int c = 0; c < channels; ++c) {
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> g(
        grad_output.data().data() + static_cast<std::size_t>(c) * oh * ow, oh, ow);
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> dst(
        grad.data().data() + static_cast<std::size_t>(c) * ih * iw, ih, iw);
    dst = rows_.transpose() * g * cols_;
  }
  return grad;
}

std::vector<CropWindow> sample_crops(int height, int width, int n_crops, double crop_area_frac,
                                     std::uint64_t seed) {
  require(n_crops >= 0, ErrorKind::kInvalidInput, "n_crops must be >= 0");
  require(crop_area_frac > 0.0 && crop_area_frac <= 1.0, ErrorKind::kInvalidInput,
          "crop_area_frac must lie in (0, 1]");
  const int side = std::max(
      1, static_cast<int>(std::lround(std::sqrt(crop_area_frac) * std::min(height, width))));
  Rng rng(derive_seed(seed, "crops"));
  std::vector<CropWindow> windows(n_crops);
  for (auto& w : windows) {
    w.side = side;
    w.y = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(height - side + 1)));
    w.x = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(width - side + 1)));
  }
  return windows;
}

ImageTensor crop(const ImageTensor& image, const CropWindow& window) {
  require(window.y >= 0 && window.x >= 0 && window.y + window.side <= image.height() &&
              window.x + window.side <= image.width(),
          ErrorKind::kInvalidInput, "crop window outside image");
  ImageTensor out(ImageShape{image.channels(), window.side, window.side});
  for (int c = 0; c < image.channels(); ++c)
    for (int y = 0; y < window.side; ++y)
      for (int x = 0; x < window.side; ++x) out.at(c, y, x) = image.at(c, window.y + y, window.x + x);
  return out;
}

namespace {

// One view: crop (or whole image), resize to the scorer input, embed, cosine.
struct View {
  CropWindow window;
  bool whole = false;
};

std::vector<View> views_for(const ImageTensor& image, CropSmoothing crops, std::uint64_t seed) {
  std::vector<View> views;
  if (crops.n_crops == 0) {
    require(crops.area_frac > 0.0 && crops.area_frac <= 1.0, ErrorKind::kInvalidInput,
            "crop_area_frac must lie in (0, 1]");
    views.push_back({{0, 0, 0}, true});
    return views;
  }
  for (const auto& w : sample_crops(image.height(), image.width(), crops.n_crops, crops.area_frac,
                                    seed)) {
    views.push_back({w, false});
  }
  return views;
}

ImageTensor view_input(const ImageTensor& image, const View& view, const ImageShape& target) {
  ImageTensor region = view.whole ? image : crop(image, view.window);
  if (region.height() == target.height && region.width() == target.width) return region;
  return Resizer(region.height(), region.width(), target.height, target.width).apply(region);
}

void check_prompt(const Eigen::VectorXd& prompt, const ScorerBackend& scorer) {
  require(prompt.size() == scorer.embed_dim(), ErrorKind::kInvalidInput,
          "prompt embedding has dim " + std::to_string(prompt.size()) + ", scorer expects " +
              std::to_string(scorer.embed_dim()));
}

}  // namespace

Eigen::VectorXd embed_whole_image(const ScorerBackend& scorer, const ImageTensor& image) {
  require(image.channels() == scorer.input_shape().channels, ErrorKind::kInvalidInput,
          "embed_whole_image: channel count mismatch");
  return scorer.embed_image(view_input(image, View{{0, 0, 0}, true}, scorer.input_shape()));
}

double scorer_similarity(const ImageTensor& image, const Eigen::VectorXd& prompt_embedding,
                         const ScorerBackend& scorer, CropSmoothing crops, std::uint64_t seed) {
  check_prompt(prompt_embedding, scorer);
  require(image.channels() == scorer.input_shape().channels, ErrorKind::kInvalidInput,
          "scorer_similarity: channel count mismatch");
  const auto views = views_for(image, crops, seed);
  double total = 0.0;
  for (const auto& view : views) {
    const ImageTensor input = view_input(image, view, scorer.input_shape());
    total += cosine_similarity(scorer.embed_image(input), prompt_embedding);
  }
  return total / static_cast<double>(views.size());
}

ObjectiveValue scorer_similarity_with_gradient(const ImageTensor& image,
                                               const Eigen::VectorXd& prompt_embedding,
                                               const ScorerBackend& scorer, CropSmoothing crops,
                                               std::uint64_t seed) {
  check_prompt(prompt_embedding, scorer);
  require(image.channels() == scorer.input_shape().channels, ErrorKind::kInvalidInput,
          "scorer_similarity: channel count mismatch");
  const auto views = views_for(image, crops, seed);
  const double inv = 1.0 / static_cast<double>(views.size());
  ObjectiveValue result;
  result.gradient = ImageTensor(image.shape());
  double total = 0.0;
  const ImageShape target = scorer.input_shape();
  for (const auto& view : views) {
    ImageTensor region = view.whole ? image : crop(image, view.window);
    const bool same = region.height() == target.height && region.width() == target.width;
    std::optional<Resizer> resizer;
    if (!same) resizer.emplace(region.height(), region.width(), target.height, target.width);
    const ImageTensor input = same ? region : resizer->apply(region);
    const Eigen::VectorXd emb = scorer.embed_image(input);
    total += cosine_similarity(emb, prompt_embedding);
    const Eigen::VectorXd grad_emb = cosine_similarity_grad(emb, prompt_embedding) * inv;
    ImageTensor grad_input = scorer.embed_image_vjp(input, grad_emb);
    ImageTensor grad_region = same ? grad_input : resizer->adjoint(grad_input, image.channels());
    const int y0 = view.whole ? 0 : view.window.y;
    const int x0 = view.whole ? 0 : view.window.x;
    for (int c = 0; c < image.channels(); ++c)
      for (int y = 0; y < grad_region.height(); ++y)
        for (int x = 0; x < grad_region.width(); ++x)
          result.gradient.at(c, y0 + y, x0 + x) += grad_region.at(c, y, x);
  }
  result.value = total / static_cast<double>(views.size());
  return result;
}

ScorerSimilarityObjective::ScorerSimilarityObjective(std::shared_ptr<const ScorerBackend> scorer,
                                                     Eigen::VectorXd prompt_embedding,
                                                     CropSmoothing crops, std::string prompt_text)
    : scorer_(std::move(scorer)),
      prompt_(std::move(prompt_embedding)),
      crops_(crops),
      prompt_text_(std::move(prompt_text)) {
  require(scorer_ != nullptr, ErrorKind::kInvalidInput, "scorer objective needs a scorer");
  check_prompt(prompt_, *scorer_);
}

double ScorerSimilarityObjective::evaluate(const ImageTensor& image, std::uint64_t seed) const {
  return scorer_similarity(image, prompt_, *scorer_, crops_, seed);
}

ObjectiveValue ScorerSimilarityObjective::evaluate_with_gradient(const ImageTensor& image,
                                                                 std::uint64_t seed) const {
  return scorer_similarity_with_gradient(image, prompt_, *scorer_, crops_, seed);
}

nlohmann::json ScorerSimilarityObjective::describe() const {
  return {{"type", "scorer-similarity"}, {"scorer", scorer_->variant()},
          {"prompt", prompt_text_},      {"n_crops", crops_.n_crops},
          {"crop_area_frac", crops_.area_frac}};
}

// --- masks ------------------------------------------------------------------

SoftMask::SoftMask(Eigen::MatrixXd weights) : weights_(std::move(weights)) {
  require(weights_.size() > 0, ErrorKind::kInvalidInput, "mask must be non-empty");
  require(weights_.allFinite() && weights_.minCoeff() >= 0.0 && weights_.maxCoeff() <= 1.0,
          ErrorKind::kInvalidInput, "mask weights must lie in [0,1]");
}

SoftMask SoftMask::from_image(const ImageTensor& gray) {
  require(gray.channels() == 1, ErrorKind::kInvalidInput, "mask image must be single-channel");
  Eigen::MatrixXd w(gray.height(), gray.width());
  for (int y = 0; y < gray.height(); ++y)
    for (int x = 0; x < gray.width(); ++x) w(y, x) = gray.at(0, y, x);
  return SoftMask(std::move(w));
}

ImageTensor SoftMask::to_image() const {
  ImageTensor img(ImageShape{1, height(), width()});
  for (int y = 0; y < height(); ++y)
    for (int x = 0; x < width(); ++x) img.at(0, y, x) = weights_(y, x);
  return img;
}

namespace {

void check_mask_shapes(const ImageTensor& image, const ImageTensor& reference,
                       const SoftMask& mask) {
  check_shape(reference, image.shape(), "masked objective reference");
  require(mask.height() == image.height() && mask.width() == image.width(),
          ErrorKind::kInvalidInput,
          "mask is " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()) +
              ", image is " + std::to_string(image.height()) + "x" + std::to_string(image.width()));
}

}  // namespace

double masked_l1(const ImageTensor& image, const ImageTensor& reference, const SoftMask& mask) {
  check_mask_shapes(image, reference, mask);
  const double mass = mask.mass() * image.channels();
  require(mass > 0.0, ErrorKind::kDegenerateMask, "masked_l1: mask has zero mass");
  double total = 0.0;
  for (int c = 0; c < image.channels(); ++c)
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x)
        total += mask(y, x) * std::abs(image.at(c, y, x) - reference.at(c, y, x));
  return total / mass;
}

ObjectiveValue masked_l1_with_gradient(const ImageTensor& image, const ImageTensor& reference,
                                       const SoftMask& mask) {
  check_mask_shapes(image, reference, mask);
  const double mass = mask.mass() * image.channels();
  require(mass > 0.0, ErrorKind::kDegenerateMask, "masked_l1: mask has zero mass");
  ObjectiveValue result;
  result.gradient = ImageTensor(image.shape());
  double total = 0.0;
  for (int c = 0; c < image.channels(); ++c)
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x) {
        const double d = image.at(c, y, x) - reference.at(c, y, x);
        total += mask(y, x) * std::abs(d);
        const double sign = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        result.gradient.at(c, y, x) = mask(y, x) * sign / mass;
      }
  result.value = total / mass;
  return result;
}

MaskedL1Objective::MaskedL1Objective(ImageTensor reference, SoftMask mask)
    : reference_(std::move(reference)), mask_(std::move(mask)) {
  require(mask_.height() == reference_.height() && mask_.width() == reference_.width(),
          ErrorKind::kInvalidInput, "mask and reference sizes differ");
  require(mask_.mass() > 0.0, ErrorKind::kDegenerateMask, "inpainting mask has no given pixels");
}

double MaskedL1Objective::evaluate(const ImageTensor& image, std::uint64_t) const {
  return masked_l1(image, reference_, mask_);
}

ObjectiveValue MaskedL1Objective::evaluate_with_gradient(const ImageTensor& image,
                                                         std::uint64_t) const {
  return masked_l1_with_gradient(image, reference_, mask_);
}

nlohmann::json MaskedL1Objective::describe() const {
  return {{"type", "masked-l1"}, {"mask_mass", mask_.mass()}};
}

SoftMask soft_mask_from_binary(const Eigen::MatrixXd& binary_mask, double blur_radius) {
  require(blur_radius >= 0.0 && std::isfinite(blur_radius), ErrorKind::kInvalidInput,
          "blur_radius must be >= 0");
  const Eigen::MatrixXd binary =
      (binary_mask.array() >= 0.5).select(Eigen::MatrixXd::Ones(binary_mask.rows(), binary_mask.cols()), 0.0);
  if (blur_radius == 0.0) return SoftMask(binary);

  const int half = static_cast<int>(std::ceil(3.0 * blur_radius));
  std::vector<double> kernel(2 * half + 1);
  double total = 0.0;
  for (int i = -half; i <= half; ++i) {
    kernel[i + half] = std::exp(-0.5 * (i * i) / (blur_radius * blur_radius));
    total += kernel[i + half];
  }
  for (double& k : kernel) k /= total;

  const int h = static_cast<int>(binary.rows());
  const int w = static_cast<int>(binary.cols());
  Eigen::MatrixXd tmp(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -half; i <= half; ++i) acc += kernel[i + half] * binary(y, std::clamp(x + i, 0, w - 1));
      tmp(y, x) = acc;
    }
  Eigen::MatrixXd out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -half; i <= half; ++i) acc += kernel[i + half] * tmp(std::clamp(y + i, 0, h - 1), x);
      // Rounding in the normalised kernel sum must not turn fully given
      // pixels into 1 − ε.
      acc = std::abs(acc - 1.0) < 1e-12 ? 1.0 : (std::abs(acc) < 1e-12 ? 0.0 : acc);
      out(y, x) = std::clamp(acc, 0.0, 1.0);
    }
  return SoftMask(std::move(out));
}

ImageTensor blend(const ImageTensor& image, const ImageTensor& reference, const SoftMask& mask) {
  check_mask_shapes(image, reference, mask);
  ImageTensor out(image.shape());
  for (int c = 0; c < image.channels(); ++c)
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x) {
        const double m = mask(y, x);
        out.at(c, y, x) = m * reference.at(c, y, x) + (1.0 - m) * image.at(c, y, x);
      }
  return out;
}

}  // namespace tokopt
