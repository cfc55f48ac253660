#include "tokopt/edit.hpp"

#include "tokopt/error.hpp"

#include <array>

namespace tokopt {

TokenSequence replace_tokens(const TokenSequence& target, const TokenSequence& ref,
                             std::span<const int> positions) {
  require(target.length() == ref.length(), ErrorKind::kInvalidInput,
          "replace_tokens: target has " + std::to_string(target.length()) + " tokens, reference " +
              std::to_string(ref.length()));
  require(target.codebook_size == ref.codebook_size, ErrorKind::kInvalidInput,
          "replace_tokens: codebook sizes differ (" + std::to_string(target.codebook_size) +
              " vs " + std::to_string(ref.codebook_size) + ")");
  TokenSequence out = target;
  for (int p : positions) {
    require(p >= 0 && p < target.length(), ErrorKind::kInvalidInput,
            "replace_tokens: position " + std::to_string(p) + " outside [0, " +
                std::to_string(target.length() - 1) + "]");
    out.indices[p] = ref.indices[p];
  }
  return out;
}

ImageTensor copy_paste_edit(const ImageTensor& target_image, const ImageTensor& ref_image,
                            std::span<const int> positions, const TokenizerBackend& backend) {
  return backend.decode_tokens(
      replace_tokens(backend.tokenize(target_image), backend.tokenize(ref_image), positions));
}

TokenSequence apply_recipes(const TokenSequence& target, std::span<const EditRecipe> recipes) {
  TokenSequence out = target;
  for (const auto& recipe : recipes) out = replace_tokens(out, recipe.source, recipe.positions);
  return out;
}

namespace {

const std::array<EditPreset, 5>& registry() {
  static const std::array<EditPreset, 5> presets{{
      {"background-blur", "VQ-LL-32", {18}, true},
      {"scene-lighting", "VQ-LL-32", {31}, true},
      {"sharpening", "VQ-LL-32", {12}, true},
      {"colorization", "VQ-LL-32", {12, 24, 27}, true},
      // Transfers pose only some of the time.
      {"pose", "VQ-LL-32", {21}, false},
  }};
  return presets;
}

}  // namespace

std::span<const EditPreset> all_presets() { return registry(); }

const EditPreset& preset(const std::string& name) {
  for (const auto& p : registry())
    if (p.name == name) return p;
  std::string valid;
  for (const auto& p : registry()) valid += (valid.empty() ? "" : ", ") + p.name;
  fail(ErrorKind::kInvalidInput, "unknown preset '" + name + "' (valid: " + valid + ")");
}

std::vector<int> preset_positions(const std::string& name) { return preset(name).positions; }

}  // namespace tokopt
