#pragma once

#include "tokopt/backend.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tokopt {

// output[p] = ref[p] for p in positions, target[p] elsewhere.
TokenSequence replace_tokens(const TokenSequence& target, const TokenSequence& ref,
                             std::span<const int> positions);

// Tokenize both images, swap the given positions in, decode.
ImageTensor copy_paste_edit(const ImageTensor& target_image, const ImageTensor& ref_image,
                            std::span<const int> positions, const TokenizerBackend& backend);

struct EditRecipe {
  std::vector<int> positions;
  TokenSequence source;
  std::optional<std::string> name;
};

// Applies each recipe in order to `target`.
TokenSequence apply_recipes(const TokenSequence& target, std::span<const EditRecipe> recipes);

struct EditPreset {
  std::string name;
  std::string variant;  // tokenizer checkpoint the positions were found on
  std::vector<int> positions;
  bool reliable = true;
};

// Known attribute positions. Unknown names throw kInvalidInput listing the
// valid ones.
const EditPreset& preset(const std::string& name);
std::vector<int> preset_positions(const std::string& name);
std::span<const EditPreset> all_presets();

}  // namespace tokopt
