#pragma once

#include "tokopt/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tokopt {

// 8-bit PNG codec. RGB images round to the nearest 1/255 step on write.
std::vector<std::uint8_t> encode_png(const ImageTensor& image);
// Decodes any 8/16-bit PNG; gray/palette/alpha inputs are converted to
// `channels` (3 = RGB, 1 = gray). Throws kInvalidInput with the libpng
// diagnostic on malformed data.
ImageTensor decode_png(const std::vector<std::uint8_t>& bytes, int channels = 3);

ImageTensor read_png(const std::filesystem::path& path, int channels = 3);
void write_png(const std::filesystem::path& path, const ImageTensor& image);

// Quantises to the 8-bit grid that a PNG round trip would produce.
ImageTensor quantize_to_8bit(const ImageTensor& image);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

// TokenSequence document: {"k": K, "codebook_size": |D|, "indices": [...]}.
nlohmann::json tokens_to_json(const TokenSequence& tokens);
TokenSequence tokens_from_json(const nlohmann::json& doc);

// Writes via a temporary file and rename so readers never see partial files.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::string read_file_text(const std::filesystem::path& path);

}  // namespace tokopt
