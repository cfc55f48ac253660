#include "tokopt/tensor.hpp"

#include "tokopt/error.hpp"

#include <algorithm>
#include <cmath>

namespace tokopt {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidInput: return "invalid-input";
    case ErrorKind::kInvalidState: return "invalid-state";
    case ErrorKind::kConfiguration: return "configuration";
    case ErrorKind::kDegenerateClass: return "degenerate-class";
    case ErrorKind::kDegenerateMask: return "degenerate-mask";
    case ErrorKind::kNumerical: return "numerical";
    case ErrorKind::kBackendUnavailable: return "backend-unavailable";
    case ErrorKind::kNotFound: return "not-found";
    case ErrorKind::kCancelled: return "cancelled";
  }
  return "unknown";
}

std::string ImageShape::str() const {
  return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
}

ImageTensor::ImageTensor(ImageShape shape, double fill)
    : shape_(shape), data_(shape.size(), fill) {
  require(shape.channels > 0 && shape.height > 0 && shape.width > 0, ErrorKind::kInvalidInput,
          "image dimensions must be positive, got " + shape.str());
}

ImageTensor::ImageTensor(ImageShape shape, std::vector<double> data)
    : shape_(shape), data_(std::move(data)) {
  require(shape.channels > 0 && shape.height > 0 && shape.width > 0, ErrorKind::kInvalidInput,
          "image dimensions must be positive, got " + shape.str());
  require(data_.size() == shape.size(), ErrorKind::kInvalidInput,
          "image buffer holds " + std::to_string(data_.size()) + " values, shape " + shape.str() +
              " needs " + std::to_string(shape.size()));
}

bool ImageTensor::in_unit_range() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return v >= 0.0 && v <= 1.0; });
}

ImageTensor ImageTensor::clamped() const {
  ImageTensor out = *this;
  for (double& v : out.data_) v = std::clamp(v, 0.0, 1.0);
  return out;
}

void check_shape(const ImageTensor& image, const ImageShape& expected, const char* what) {
  if (image.shape() != expected) {
    fail(ErrorKind::kInvalidInput, std::string(what) + ": expected shape " + expected.str() +
                                       ", got " + image.shape().str());
  }
}

void check_unit_range(const ImageTensor& image, const char* what) {
  require(image.in_unit_range(), ErrorKind::kInvalidInput,
          std::string(what) + ": intensities must lie in [0,1]");
}

double mean_abs_difference(const ImageTensor& a, const ImageTensor& b) {
  check_shape(b, a.shape(), "mean_abs_difference");
  double total = 0.0;
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) total += std::abs(x[i] - y[i]);
  return total / static_cast<double>(x.size());
}

void validate_tokens(const TokenSequence& tokens) {
  require(tokens.codebook_size > 0, ErrorKind::kInvalidInput, "codebook_size must be positive");
  for (std::size_t k = 0; k < tokens.indices.size(); ++k) {
    const int v = tokens.indices[k];
    if (v < 0 || v >= tokens.codebook_size) {
      fail(ErrorKind::kInvalidInput, "token " + std::to_string(v) + " at position " +
                                         std::to_string(k) + " outside [0, " +
                                         std::to_string(tokens.codebook_size - 1) + "]");
    }
  }
}

Codebook::Codebook(Eigen::MatrixXd entries) : entries_(std::move(entries)) {
  require(entries_.allFinite(), ErrorKind::kInvalidInput, "codebook entries must be finite");
}

}  // namespace tokopt
