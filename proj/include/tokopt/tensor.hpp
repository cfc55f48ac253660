#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace tokopt {

struct ImageShape {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  bool operator==(const ImageShape&) const = default;
  std::string str() const;
};

// Planar C×H×W tensor of doubles. Images carry intensities in [0,1]; the same
// type is used for image-space gradients, which are unconstrained.
class ImageTensor {
 public:
  ImageTensor() = default;
  explicit ImageTensor(ImageShape shape, double fill = 0.0);
  ImageTensor(ImageShape shape, std::vector<double> data);

  const ImageShape& shape() const { return shape_; }
  int channels() const { return shape_.channels; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  std::size_t size() const { return data_.size(); }

  double& at(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * shape_.height + y) * shape_.width + x];
  }
  double at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * shape_.height + y) * shape_.width + x];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }

  bool in_unit_range() const;
  ImageTensor clamped() const;

  bool operator==(const ImageTensor&) const = default;

 private:
  ImageShape shape_;
  std::vector<double> data_;
};

// Throws kInvalidInput unless `image` has `expected` shape.
void check_shape(const ImageTensor& image, const ImageShape& expected, const char* what);
void check_unit_range(const ImageTensor& image, const char* what);

double mean_abs_difference(const ImageTensor& a, const ImageTensor& b);

struct TokenSequence {
  std::vector<int> indices;
  int codebook_size = 0;

  int length() const { return static_cast<int>(indices.size()); }
  bool operator==(const TokenSequence&) const = default;
};

// Throws kInvalidInput if any index is outside [0, codebook_size).
void validate_tokens(const TokenSequence& tokens);

// K×D pre- or post-quantization features, one row per token position.
struct LatentFeatures {
  Eigen::MatrixXd values;

  int tokens() const { return static_cast<int>(values.rows()); }
  int dim() const { return static_cast<int>(values.cols()); }
  bool operator==(const LatentFeatures& other) const {
    return values.rows() == other.values.rows() && values.cols() == other.values.cols() &&
           values == other.values;
  }
};

class Codebook {
 public:
  Codebook() = default;
  explicit Codebook(Eigen::MatrixXd entries);

  int size() const { return static_cast<int>(entries_.rows()); }
  int dim() const { return static_cast<int>(entries_.cols()); }
  const Eigen::MatrixXd& entries() const { return entries_; }
  auto row(int index) const { return entries_.row(index); }

 private:
  Eigen::MatrixXd entries_;
};

}  // namespace tokopt
