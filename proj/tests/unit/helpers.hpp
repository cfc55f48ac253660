#pragma once

#include "tokopt/backend.hpp"
#include "tokopt/random.hpp"
#include "tokopt/toy_backends.hpp"

#include <doctest.h>

#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>

namespace tokopt::test {

inline std::shared_ptr<const ToyTokenizer> toy_tokenizer(std::uint64_t seed = 0, int codebook = 64) {
  return std::make_shared<ToyTokenizer>(seed, codebook);
}

inline std::shared_ptr<const ToyScorer> toy_scorer(std::uint64_t seed = 0) {
  return std::make_shared<ToyScorer>(seed);
}

inline ImageTensor random_image(std::uint64_t seed, ImageShape shape = ToyTokenizer::kImageShape) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageTensor image(shape);
  for (double& v : image.storage()) v = u(rng);
  return image;
}

inline TokenSequence random_tokens(std::uint64_t seed, int k, int codebook) {
  Rng rng(seed);
  TokenSequence t;
  t.codebook_size = codebook;
  for (int i = 0; i < k; ++i) t.indices.push_back(static_cast<int>(uniform_index(rng, codebook)));
  return t;
}

// Image the toy tokenizer represents exactly.
inline ImageTensor toy_image(const TokenizerBackend& tok, std::uint64_t seed) {
  return tok.decode_tokens(random_tokens(seed, tok.num_tokens(), tok.codebook().size()));
}

inline double central_difference(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline bool close_rel(double a, double b, double rtol, double atol = 1e-12) {
  return std::abs(a - b) <= atol + rtol * std::max(std::abs(a), std::abs(b));
}

// Fresh empty directory under the working directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::current_path() / "scratch" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace tokopt::test
