#include "tokopt/io.hpp"

#include "tokopt/error.hpp"
#include "tokopt/random.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>
#include <sstream>

namespace tokopt {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

std::vector<std::uint8_t> encode_png(const ImageTensor& image) {
  require(image.channels() == 1 || image.channels() == 3, ErrorKind::kInvalidInput,
          "encode_png: only 1- or 3-channel images can be written");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width());
  png.height = static_cast<png_uint_32>(image.height());
  png.format = image.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;

  const int c = image.channels();
  std::vector<std::uint8_t> pixels(image.size());
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int ch = 0; ch < c; ++ch)
        pixels[(static_cast<std::size_t>(y) * image.width() + x) * c + ch] =
            to_byte(image.at(ch, y, x));

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    fail(ErrorKind::kInvalidState, std::string("encode_png: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    fail(ErrorKind::kInvalidState, std::string("encode_png: ") + png.message);
  }
  out.resize(size);
  return out;
}

ImageTensor decode_png(const std::vector<std::uint8_t>& bytes, int channels) {
  require(channels == 1 || channels == 3, ErrorKind::kInvalidInput,
          "decode_png: channels must be 1 or 3");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    fail(ErrorKind::kInvalidInput, std::string("PNG parse error: ") + png.message);
  }
  png.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, pixels.data(), 0, nullptr)) {
    std::string message = png.message;
    png_image_free(&png);
    fail(ErrorKind::kInvalidInput, "PNG parse error: " + message);
  }
  ImageTensor image(ImageShape{channels, static_cast<int>(png.height), static_cast<int>(png.width)});
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int ch = 0; ch < channels; ++ch)
        image.at(ch, y, x) =
            pixels[(static_cast<std::size_t>(y) * image.width() + x) * channels + ch] / 255.0;
  return image;
}

ImageTensor read_png(const std::filesystem::path& path, int channels) {
  try {
    return decode_png(read_file_bytes(path), channels);
  } catch (const Error& e) {
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

void write_png(const std::filesystem::path& path, const ImageTensor& image) {
  write_file_atomic(path, encode_png(image));
}

ImageTensor quantize_to_8bit(const ImageTensor& image) {
  ImageTensor out = image;
  for (double& v : out.storage()) v = to_byte(v) / 255.0;
  return out;
}

namespace {
constexpr char kBase64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t n = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kBase64Alphabet[(n >> 18) & 63];
    out += kBase64Alphabet[(n >> 12) & 63];
    out += kBase64Alphabet[(n >> 6) & 63];
    out += kBase64Alphabet[n & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t n = bytes[i] << 16;
    if (i + 1 < bytes.size()) n |= bytes[i + 1] << 8;
    out += kBase64Alphabet[(n >> 18) & 63];
    out += kBase64Alphabet[(n >> 12) & 63];
    out += i + 1 < bytes.size() ? kBase64Alphabet[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::array<int, 256> table;
  table.fill(-1);
  for (int i = 0; i < 64; ++i) table[static_cast<unsigned char>(kBase64Alphabet[i])] = i;
  std::vector<std::uint8_t> out;
  std::uint32_t buffer = 0;
  int bits = 0;
  for (char ch : text) {
    if (ch == '=') break;
    if (ch == '\n' || ch == '\r' || ch == ' ') continue;
    const int v = table[static_cast<unsigned char>(ch)];
    require(v >= 0, ErrorKind::kInvalidInput, "base64: invalid character");
    buffer = (buffer << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((buffer >> bits) & 0xFF));
    }
  }
  return out;
}

nlohmann::json tokens_to_json(const TokenSequence& tokens) {
  return {{"k", tokens.length()}, {"codebook_size", tokens.codebook_size},
          {"indices", tokens.indices}};
}

TokenSequence tokens_from_json(const nlohmann::json& doc) {
  TokenSequence tokens;
  try {
    const int k = doc.at("k").get<int>();
    tokens.codebook_size = doc.at("codebook_size").get<int>();
    tokens.indices = doc.at("indices").get<std::vector<int>>();
    require(tokens.length() == k, ErrorKind::kInvalidInput,
            "token document: header k=" + std::to_string(k) + " but " +
                std::to_string(tokens.length()) + " indices");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidInput, std::string("token document: ") + e.what());
  }
  validate_tokens(tokens);
  return tokens;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp-" + to_hex(fnv1a64(path.string()) ^ reinterpret_cast<std::uintptr_t>(&contents) ^
                          std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::kInvalidState, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    require(static_cast<bool>(out), ErrorKind::kInvalidState, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kNotFound, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_file_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kNotFound, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string to_hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace tokopt
