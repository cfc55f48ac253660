#include "tokopt/backend.hpp"

#include "tokopt/error.hpp"
#include "tokopt/toy_backends.hpp"

#include <array>
#include <filesystem>
#include <fstream>
#include <limits>

namespace tokopt {

ImageTensor TokenizerBackend::decode(const LatentFeatures& quantized) const {
  return decode_unclamped(quantized).clamped();
}

TokenSequence TokenizerBackend::tokenize(const ImageTensor& image) const {
  return quantize(encode(image), codebook()).tokens;
}

ImageTensor TokenizerBackend::decode_tokens(const TokenSequence& tokens) const {
  require(tokens.length() == num_tokens(), ErrorKind::kInvalidInput,
          "token sequence has length " + std::to_string(tokens.length()) + ", backend expects " +
              std::to_string(num_tokens()));
  return decode(lookup(tokens, codebook()));
}

ImageTensor TokenizerBackend::reconstruct(const ImageTensor& image) const {
  return decode(quantize(encode(image), codebook()).quantized);
}

void TokenizerBackend::check_features(const LatentFeatures& features, const char* what) const {
  if (features.tokens() != num_tokens() || features.dim() != feature_dim()) {
    fail(ErrorKind::kInvalidInput,
         std::string(what) + ": expected features of shape (" + std::to_string(num_tokens()) +
             ", " + std::to_string(feature_dim()) + "), got (" +
             std::to_string(features.tokens()) + ", " + std::to_string(features.dim()) + ")");
  }
}

double ScorerBackend::alignment_score(const Eigen::VectorXd& image_embedding,
                                      const Eigen::VectorXd& text_embedding) const {
  return cosine_similarity(image_embedding, text_embedding);
}

QuantizeResult quantize(const LatentFeatures& features, const Codebook& codebook) {
  require(codebook.size() >= 1, ErrorKind::kInvalidState, "quantize: codebook is empty");
  require(features.dim() == codebook.dim(), ErrorKind::kInvalidInput,
          "quantize: feature dim " + std::to_string(features.dim()) + " != codebook dim " +
              std::to_string(codebook.dim()));
  const auto& entries = codebook.entries();
  QuantizeResult result;
  result.tokens.codebook_size = codebook.size();
  result.tokens.indices.resize(features.tokens());
  result.quantized.values.resize(features.tokens(), features.dim());
  for (int k = 0; k < features.tokens(); ++k) {
    int best = 0;
    double best_distance = std::numeric_limits<double>::infinity();
    for (int i = 0; i < codebook.size(); ++i) {
      const double d = (entries.row(i) - features.values.row(k)).squaredNorm();
      if (d < best_distance) {
        best_distance = d;
        best = i;
      }
    }
    result.tokens.indices[k] = best;
    result.quantized.values.row(k) = entries.row(best);
  }
  return result;
}

LatentFeatures lookup(const TokenSequence& tokens, const Codebook& codebook) {
  require(tokens.codebook_size == codebook.size(), ErrorKind::kInvalidInput,
          "lookup: token codebook_size " + std::to_string(tokens.codebook_size) +
              " != codebook size " + std::to_string(codebook.size()));
  validate_tokens(tokens);
  LatentFeatures out;
  out.values.resize(tokens.length(), codebook.dim());
  for (int k = 0; k < tokens.length(); ++k) out.values.row(k) = codebook.row(tokens.indices[k]);
  return out;
}

namespace {
constexpr double kNormFloor = 1e-12;
}

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  require(a.size() == b.size(), ErrorKind::kInvalidInput,
          "cosine_similarity: dimension mismatch " + std::to_string(a.size()) + " vs " +
              std::to_string(b.size()));
  const double na = std::max(a.norm(), kNormFloor);
  const double nb = std::max(b.norm(), kNormFloor);
  return a.dot(b) / (na * nb);
}

Eigen::VectorXd cosine_similarity_grad(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = std::max(a.norm(), kNormFloor);
  const double nb = std::max(b.norm(), kNormFloor);
  const double cos = a.dot(b) / (na * nb);
  return b / (na * nb) - cos * a / (na * na);
}

// --- registry -------------------------------------------------------------

BackendConfig BackendConfig::from_json(const nlohmann::json& doc) {
  require(doc.is_object(), ErrorKind::kConfiguration, "backend config must be an object");
  static const std::array<const char*, 6> kKnown = {"kind",          "seed",   "variant",
                                                    "path",          "prompts", "codebook_size"};
  for (const auto& [key, _] : doc.items()) {
    bool known = false;
    for (const char* k : kKnown) known = known || key == k;
    require(known, ErrorKind::kConfiguration, "backend config: unknown field '" + key + "'");
  }
  BackendConfig config;
  try {
    require(doc.contains("kind"), ErrorKind::kConfiguration,
            "backend config: missing field 'kind'");
    config.kind = doc.at("kind").get<std::string>();
    if (doc.contains("seed")) config.seed = doc.at("seed").get<std::uint64_t>();
    if (doc.contains("variant")) config.variant = doc.at("variant").get<std::string>();
    if (doc.contains("path")) config.path = doc.at("path").get<std::string>();
    if (doc.contains("codebook_size")) config.codebook_size = doc.at("codebook_size").get<int>();
    if (doc.contains("prompts")) config.prompts = doc.at("prompts");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfiguration, std::string("backend config: ") + e.what());
  }
  return config;
}

nlohmann::json BackendConfig::to_json() const {
  nlohmann::json doc = {{"kind", kind}, {"seed", seed}};
  if (!variant.empty()) doc["variant"] = variant;
  if (!path.empty()) doc["path"] = path;
  if (codebook_size) doc["codebook_size"] = *codebook_size;
  if (!prompts.empty()) doc["prompts"] = prompts;
  return doc;
}

std::optional<TokenizerVariantInfo> find_tokenizer_variant(std::string_view name) {
  static const std::array<TokenizerVariantInfo, 5> kVariants = {{
      {"VQ-LL-32", 32, 4096, true},
      {"VQ-BB-64", 64, 4096, true},
      {"VQ-BL-64", 64, 8192, true},
      {"VQ-BL-128", 128, 8192, true},
      {"VAE-LL-32", 32, 0, false},
  }};
  for (const auto& v : kVariants) {
    if (v.name == name) return v;
  }
  return std::nullopt;
}

namespace {

std::map<std::string, Eigen::VectorXd> parse_prompt_vectors(const nlohmann::json& prompts) {
  std::map<std::string, Eigen::VectorXd> out;
  require(prompts.is_object(), ErrorKind::kConfiguration,
          "backend config: field 'prompts' must map names to vectors");
  for (const auto& [name, values] : prompts.items()) {
    require(values.is_array() && values.size() == ToyScorer::kEmbedDim, ErrorKind::kConfiguration,
            "backend config: field 'prompts." + name + "' must be an array of " +
                std::to_string(ToyScorer::kEmbedDim) + " numbers");
    Eigen::VectorXd v(ToyScorer::kEmbedDim);
    for (int i = 0; i < ToyScorer::kEmbedDim; ++i) v[i] = values[i].get<double>();
    out.emplace(name, v);
  }
  return out;
}

// Pretrained networks need a neural runtime that is not linked into this
// build. The checkpoint is still validated so that configuration mistakes are
// reported as such before the availability error.
[[noreturn]] void fail_pretrained(const BackendConfig& config) {
  require(!config.path.empty(), ErrorKind::kConfiguration,
          "backend config: field 'path' is required for kind '" + config.kind + "'");
  std::ifstream in(config.path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kConfiguration,
          "backend config: field 'path' does not name a readable checkpoint: " + config.path);
  in.seekg(0, std::ios::end);
  require(in.tellg() > 0, ErrorKind::kConfiguration,
          "backend config: field 'path' names an empty (corrupt) checkpoint: " + config.path);
  fail(ErrorKind::kBackendUnavailable,
       "backend kind '" + config.kind + "' (" + config.variant +
           ") requires a neural network runtime that this build does not include");
}

}  // namespace

std::shared_ptr<const TokenizerBackend> load_tokenizer(const BackendConfig& config) {
  if (config.kind == "toy-tokenizer") {
    const int size = config.codebook_size.value_or(ToyTokenizer::kDefaultCodebookSize);
    require(size >= 1, ErrorKind::kConfiguration,
            "backend config: field 'codebook_size' must be >= 1");
    return std::make_shared<ToyTokenizer>(config.seed, size);
  }
  if (config.kind == "titok") {
    require(find_tokenizer_variant(config.variant).has_value(), ErrorKind::kConfiguration,
            "backend config: field 'variant' names unknown tokenizer variant '" + config.variant +
                "'");
    fail_pretrained(config);
  }
  fail(ErrorKind::kConfiguration,
       "backend config: field 'kind' = '" + config.kind + "' is not a tokenizer backend");
}

std::shared_ptr<const ScorerBackend> load_scorer(const BackendConfig& config) {
  if (config.kind == "toy-scorer") {
    return std::make_shared<ToyScorer>(config.seed, parse_prompt_vectors(config.prompts));
  }
  if (config.kind == "toy-siglip") {
    return std::make_shared<ToyLogitScorer>(
        std::make_shared<ToyScorer>(config.seed, parse_prompt_vectors(config.prompts)));
  }
  if (config.kind == "clip" || config.kind == "siglip") fail_pretrained(config);
  fail(ErrorKind::kConfiguration,
       "backend config: field 'kind' = '" + config.kind + "' is not a scorer backend");
}

AnyBackend load_backend(const BackendConfig& config) {
  if (config.kind == "toy-tokenizer" || config.kind == "titok") return load_tokenizer(config);
  if (config.kind == "toy-scorer" || config.kind == "toy-siglip" || config.kind == "clip" ||
      config.kind == "siglip") {
    return load_scorer(config);
  }
  fail(ErrorKind::kConfiguration,
       "backend config: field 'kind' has unknown value '" + config.kind +
           "' (expected toy-tokenizer, toy-scorer, toy-siglip, titok, clip, siglip)");
}

}  // namespace tokopt
