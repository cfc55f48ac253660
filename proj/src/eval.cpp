#include "tokopt/eval.hpp"

#include "tokopt/error.hpp"
#include "tokopt/io.hpp"
#include "tokopt/parallel.hpp"
#include "tokopt/random.hpp"
#include "tokopt/toy_backends.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>

namespace tokopt {

namespace fs = std::filesystem;

std::vector<int> LabeledImageSet::class_counts() const {
  std::vector<int> counts(class_names.size(), 0);
  for (const auto& img : images) ++counts.at(img.label);
  return counts;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::map<std::string, std::string> read_class_table(const fs::path& path) {
  std::map<std::string, std::string> table;
  std::istringstream in(read_file_text(path));
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty() || trim(line)[0] == '#') continue;
    const auto tab = line.find('\t');
    require(tab != std::string::npos, ErrorKind::kInvalidInput,
            "class table " + path.string() + ":" + std::to_string(line_no) +
                ": expected '<directory>\\t<lemma>[, ...]'");
    const std::string lemmas = line.substr(tab + 1);
    table[trim(line.substr(0, tab))] = trim(lemmas.substr(0, lemmas.find(',')));
  }
  return table;
}

// Seeded Fisher-Yates built on uniform_index so the permutation does not depend
// on the standard library's shuffle.
template <typename T>
void seeded_shuffle(std::vector<T>& items, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    std::swap(items[i - 1], items[uniform_index(rng, i)]);
  }
}

}  // namespace

LabeledImageSet load_image_tree(const fs::path& root, const std::optional<fs::path>& class_table,
                                std::optional<ImageShape> shape) {
  require(fs::is_directory(root), ErrorKind::kNotFound,
          "dataset directory not found: " + root.string());
  std::map<std::string, std::string> names;
  if (class_table) names = read_class_table(*class_table);

  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  require(!class_dirs.empty(), ErrorKind::kInvalidInput,
          "dataset directory has no class subdirectories: " + root.string());

  LabeledImageSet set;
  set.id = root.filename().string();
  const int channels = shape ? shape->channels : 3;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    const std::string dir_name = class_dirs[label].filename().string();
    const auto named = names.find(dir_name);
    set.class_names.push_back(named != names.end() ? named->second : dir_name);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[label]))
      if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      ImageTensor image = read_png(file, channels);
      if (shape && image.shape() != *shape) {
        image = Resizer(image.height(), image.width(), shape->height, shape->width).apply(image).clamped();
      }
      set.images.push_back({dir_name + "/" + file.filename().string(), static_cast<int>(label),
                            std::move(image)});
    }
  }
  return set;
}

ToyDataset make_toy_dataset(const TokenizerBackend& tokenizer, const ScorerBackend& scorer,
                            int num_classes, int per_class, std::uint64_t seed) {
  require(num_classes >= 1 && per_class >= 1, ErrorKind::kInvalidInput,
          "toy dataset needs at least one class and one image per class");
  const int K = tokenizer.num_tokens();
  const int vocab = tokenizer.codebook().size();
  ToyDataset data;
  data.images.id = "toy-" + to_hex(seed);
  for (int j = 0; j < num_classes; ++j) {
    Rng rng(derive_seed(seed, "toy-dataset-class", j));
    TokenSequence proto{std::vector<int>(K), vocab};
    for (int& t : proto.indices) t = static_cast<int>(uniform_index(rng, vocab));
    const std::string name = "class-" + std::to_string(j);
    data.images.class_names.push_back(name);
    data.prompt_vectors[name] = embed_whole_image(scorer, tokenizer.decode_tokens(proto)).normalized();
    for (int i = 0; i < per_class; ++i) {
      Rng member_rng(derive_seed(seed, "toy-dataset-member", static_cast<std::uint64_t>(j) * per_class + i));
      TokenSequence t = proto;
      for (int k = K / 2; k < K; ++k) t.indices[k] = static_cast<int>(uniform_index(member_rng, vocab));
      data.images.images.push_back(
          {name + "/" + std::to_string(i), j, tokenizer.decode_tokens(t)});
    }
    data.prototypes.push_back(std::move(proto));
  }
  return data;
}

nlohmann::json SeedManifest::to_json() const {
  return {{"dataset_id", dataset_id}, {"per_class", per_class}, {"seed", seed}, {"image_ids", image_ids}};
}

SeedSet sample_seed_set(const LabeledImageSet& dataset, int n_total, std::uint64_t seed,
                        const TokenizerBackend& tokenizer) {
  const int n_classes = dataset.num_classes();
  require(n_classes >= 1, ErrorKind::kInvalidInput, "sample_seed_set: dataset has no classes");
  require(n_total >= 0 && n_total % n_classes == 0, ErrorKind::kInvalidInput,
          "sample_seed_set: n_total " + std::to_string(n_total) + " is not divisible by " +
              std::to_string(n_classes) + " classes");
  const int per_class = n_total / n_classes;
  std::vector<std::vector<std::size_t>> members(n_classes);
  for (std::size_t i = 0; i < dataset.images.size(); ++i) members[dataset.images[i].label].push_back(i);

  SeedSet set;
  set.manifest = {dataset.id, per_class, seed, {}};
  for (int j = 0; j < n_classes; ++j) {
    require(static_cast<int>(members[j].size()) >= per_class, ErrorKind::kInvalidInput,
            "sample_seed_set: class " + std::to_string(j) + " ('" + dataset.class_names[j] +
                "') has " + std::to_string(members[j].size()) + " images, " +
                std::to_string(per_class) + " needed");
    seeded_shuffle(members[j], derive_seed(seed, "seed-set", j));
    for (int i = 0; i < per_class; ++i) {
      const LabeledImage& img = dataset.images[members[j][i]];
      set.entries.push_back({img.id, img.label, img.image, TokenSequence{}});
      set.manifest.image_ids.push_back(img.id);
    }
  }
  for (auto& entry : set.entries) entry.tokens = tokenizer.tokenize(entry.image);
  return set;
}

std::vector<int> PromptSet::per_class_counts(int num_classes) const {
  std::vector<int> counts(num_classes, 0);
  for (const auto& p : prompts) ++counts.at(p.label);
  return counts;
}

std::vector<std::string> PromptSet::texts() const {
  std::vector<std::string> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts) out.push_back(p.text);
  return out;
}

std::vector<int> largest_remainder(std::span<const int> weights, int total) {
  require(!weights.empty(), ErrorKind::kInvalidInput, "largest_remainder: no classes");
  require(total >= 0, ErrorKind::kInvalidInput, "largest_remainder: total must be >= 0");
  std::int64_t sum = 0;
  for (int w : weights) {
    require(w >= 0, ErrorKind::kInvalidInput, "largest_remainder: negative class count");
    sum += w;
  }
  const std::size_t n = weights.size();
  std::vector<std::int64_t> w(weights.begin(), weights.end());
  if (sum == 0) {
    std::fill(w.begin(), w.end(), 1);
    sum = static_cast<std::int64_t>(n);
  }
  // Integer arithmetic: quota_i = total·w_i / sum, remainder compared exactly.
  std::vector<int> counts(n);
  std::vector<std::int64_t> remainder(n);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t scaled = static_cast<std::int64_t>(total) * w[i];
    counts[i] = static_cast<int>(scaled / sum);
    remainder[i] = scaled % sum;
    assigned += counts[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::int64_t left = total - assigned, i = 0; left > 0; --left, ++i) ++counts[order[i]];
  return counts;
}

PromptSet build_prompts(std::span<const int> class_stats, std::span<const std::string> class_names,
                        int n_prompts) {
  require(class_stats.size() == class_names.size(), ErrorKind::kInvalidInput,
          "build_prompts: class statistics and names differ in length");
  const std::vector<int> counts = largest_remainder(class_stats, n_prompts);
  PromptSet set;
  set.target = n_prompts;
  set.prompts.reserve(n_prompts);
  for (std::size_t j = 0; j < counts.size(); ++j)
    for (int i = 0; i < counts[j]; ++i)
      set.prompts.push_back({"a photo of a " + class_names[j], static_cast<int>(j)});
  return set;
}

AssociationMode AssociationMode::parse(const std::string& text) {
  if (text == "random") return {Kind::kRandom, 0.0};
  if (text == "top1") return {Kind::kTop1, 0.0};
  if (text.rfind("topk:", 0) == 0) {
    std::string value = text.substr(5);
    if (!value.empty() && value.back() == '%') value.pop_back();
    double percent = 0.0;
    try {
      std::size_t used = 0;
      percent = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      fail(ErrorKind::kInvalidInput, "association mode '" + text + "': bad percentage");
    }
    require(percent > 0.0 && percent <= 100.0, ErrorKind::kInvalidInput,
            "association mode '" + text + "': percentage must lie in (0, 100]");
    return {Kind::kTopKPercent, percent / 100.0};
  }
  fail(ErrorKind::kInvalidInput,
       "unknown association mode '" + text + "' (expected random, top1 or topk:<p>%)");
}

std::string AssociationMode::str() const {
  switch (kind) {
    case Kind::kRandom:
      return "random";
    case Kind::kTop1:
      return "top1";
    case Kind::kTopKPercent: {
      std::ostringstream out;
      out << "topk:" << fraction * 100.0 << "%";
      return out.str();
    }
  }
  return {};
}

int AssociationMode::top_k(int n) const {
  const int k = static_cast<int>(std::ceil(fraction * n - 1e-9));
  return std::clamp(k, 1, std::max(1, n));
}

nlohmann::json Association::to_json() const {
  return {{"mode", mode.str()},
          {"mapping", mapping},
          {"similarity_source", similarity_source},
          {"seed", seed}};
}

Association associate_from_similarity(const Eigen::MatrixXd& similarity, AssociationMode mode,
                                      std::uint64_t seed, std::string similarity_source) {
  const int n_seeds = static_cast<int>(similarity.cols());
  require(n_seeds > 0, ErrorKind::kInvalidInput, "associate: empty seed set");
  Association a{mode, std::vector<int>(similarity.rows()), std::move(similarity_source), seed};
  const int k = mode.top_k(n_seeds);
  std::vector<int> ranking(n_seeds);
  for (Eigen::Index p = 0; p < similarity.rows(); ++p) {
    Rng rng(derive_seed(seed, "associate", static_cast<std::uint64_t>(p)));
    switch (mode.kind) {
      case AssociationMode::Kind::kRandom:
        a.mapping[p] = static_cast<int>(uniform_index(rng, n_seeds));
        break;
      case AssociationMode::Kind::kTop1: {
        int best = 0;
        for (int s = 1; s < n_seeds; ++s)
          if (similarity(p, s) > similarity(p, best)) best = s;
        a.mapping[p] = best;
        break;
      }
      case AssociationMode::Kind::kTopKPercent: {
        std::iota(ranking.begin(), ranking.end(), 0);
        std::stable_sort(ranking.begin(), ranking.end(),
                         [&](int x, int y) { return similarity(p, x) > similarity(p, y); });
        a.mapping[p] = ranking[uniform_index(rng, k)];
        break;
      }
    }
  }
  return a;
}

Eigen::MatrixXd prompt_seed_similarity(const PromptSet& prompts, const SeedSet& seeds,
                                       const ScorerBackend& scorer) {
  std::vector<Eigen::VectorXd> seed_emb;
  seed_emb.reserve(seeds.size());
  for (const auto& s : seeds.entries) seed_emb.push_back(embed_whole_image(scorer, s.image));
  Eigen::MatrixXd sim(prompts.prompts.size(), seeds.size());
  std::map<std::string, Eigen::VectorXd> text_cache;
  for (std::size_t p = 0; p < prompts.prompts.size(); ++p) {
    const std::string& text = prompts.prompts[p].text;
    auto it = text_cache.find(text);
    if (it == text_cache.end()) it = text_cache.emplace(text, scorer.embed_text(text)).first;
    for (std::size_t s = 0; s < seeds.size(); ++s) sim(p, s) = cosine_similarity(seed_emb[s], it->second);
  }
  return sim;
}

Association associate(const PromptSet& prompts, const SeedSet& seeds, AssociationMode mode,
                      const ScorerBackend* scorer, std::uint64_t seed) {
  require(seeds.size() > 0, ErrorKind::kInvalidInput, "associate: empty seed set");
  if (mode.kind == AssociationMode::Kind::kRandom) {
    return associate_from_similarity(Eigen::MatrixXd::Zero(prompts.prompts.size(), seeds.size()),
                                     mode, seed, "none");
  }
  require(scorer != nullptr, ErrorKind::kInvalidState,
          "associate: mode " + mode.str() + " needs a loaded scorer");
  return associate_from_similarity(prompt_seed_similarity(prompts, seeds, *scorer), mode, seed,
                                   scorer->variant() + " cosine");
}

// --- sample store -------------------------------------------------------------

int SampleStore::completed() const {
  return static_cast<int>(std::count_if(records.begin(), records.end(),
                                        [](const SampleRecord& r) { return r.status == "ok"; }));
}

int SampleStore::failed() const {
  return static_cast<int>(std::count_if(records.begin(), records.end(),
                                        [](const SampleRecord& r) { return r.status == "failed"; }));
}

std::optional<ImageTensor> SampleStore::load_image(int prompt_index) const {
  const SampleRecord& r = records.at(prompt_index);
  if (r.status != "ok") return std::nullopt;
  return read_png(dir / "samples" / r.id / "image.png");
}

std::optional<TokenSequence> SampleStore::load_tokens(int prompt_index) const {
  const SampleRecord& r = records.at(prompt_index);
  if (r.status != "ok") return std::nullopt;
  return tokens_from_json(
      nlohmann::json::parse(read_file_text(dir / "samples" / r.id / "tokens.json")));
}

nlohmann::json SampleStore::manifest() const {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json entry = {{"prompt_index", r.prompt_index}, {"id", r.id}, {"status", r.status}};
    if (r.status == "ok") entry["final_value"] = r.final_value;
    if (!r.error.empty()) entry["error"] = r.error;
    samples.push_back(std::move(entry));
  }
  return {{"samples", samples}, {"completed", completed()}, {"failed", failed()}};
}

SampleStore generate_batch(const Association& association, const PromptSet& prompts,
                           const SeedSet& seeds, const ObjectiveFactory& objective_factory,
                           const OptimizerConfig& config, const TokenizerBackend& tokenizer,
                           const BatchOptions& options) {
  require(association.mapping.size() == prompts.prompts.size(), ErrorKind::kInvalidInput,
          "generate_batch: association covers " + std::to_string(association.mapping.size()) +
              " prompts, prompt set has " + std::to_string(prompts.prompts.size()));
  config.validate();
  const bool from_seed = config.init == InitMode::kFromImage;
  for (int s : association.mapping) {
    require(s >= 0 && static_cast<std::size_t>(s) < seeds.size(), ErrorKind::kInvalidInput,
            "generate_batch: association refers to missing seed " + std::to_string(s));
  }
  fs::create_directories(options.store_dir / "samples");

  std::mutex log_mutex;
  auto log = [&](const std::string& msg) {
    if (!options.log) return;
    std::lock_guard lock(log_mutex);
    options.log(msg);
  };

  SampleStore store{options.store_dir, std::vector<SampleRecord>(prompts.prompts.size())};
  parallel_for(prompts.prompts.size(), options.workers, [&](std::size_t i) {
    const Prompt& prompt = prompts.prompts[i];
    SampleRecord& record = store.records[i];
    record.prompt_index = static_cast<int>(i);

    OptimizerConfig sample_config = config;
    sample_config.seed = derive_seed(config.seed, "sample", i);
    const std::string seed_id = from_seed ? seeds.entries[association.mapping[i]].image_id : "random";
    const nlohmann::json address = {{"prompt_index", i},
                                    {"prompt", prompt.text},
                                    {"seed_image", seed_id},
                                    {"config", sample_config.to_json()},
                                    {"tokenizer", tokenizer.variant()}};
    record.id = to_hex(fnv1a64(address.dump()));
    const fs::path dir = options.store_dir / "samples" / record.id;
    const fs::path summary_path = dir / "summary.json";

    if (fs::exists(summary_path)) {
      const auto summary = nlohmann::json::parse(read_file_text(summary_path));
      record.status = "ok";
      record.final_value = summary.at("final_value").get<double>();
      record.resumed = true;
      return;
    }
    if (options.stop.stop_requested()) {
      record.status = "skipped";
      return;
    }
    try {
      const auto objective = objective_factory(prompt);
      std::optional<ImageTensor> seed_image;
      if (from_seed) seed_image = seeds.entries[association.mapping[i]].image;
      RunOptions run_options;
      run_options.stop = options.stop;
      RunResult result = run(seed_image, *objective, tokenizer, sample_config, run_options);
      if (result.partial) {
        record.status = "skipped";
        return;
      }
      fs::create_directories(dir);
      write_file_atomic(dir / "image.png", encode_png(result.image));
      write_file_atomic(dir / "tokens.json", tokens_to_json(result.tokens).dump());
      const double final_value =
          result.trajectory.values.empty() ? 0.0 : result.trajectory.values.back().value;
      nlohmann::json summary = address;
      summary["final_value"] = final_value;
      summary["used_ema"] = result.used_ema;
      summary["trajectory"] = result.trajectory.to_json();
      write_file_atomic(summary_path, summary.dump(2));
      record.status = "ok";
      record.final_value = final_value;
    } catch (const std::exception& e) {
      record.status = "failed";
      record.error = e.what();
      log("sample " + std::to_string(i) + " failed: " + e.what());
    }
  });
  write_file_atomic(options.store_dir / "manifest.json", store.manifest().dump(2));
  return store;
}

ImageTensor pixel_adversarial_baseline(const ImageTensor& seed_image, const Objective& objective,
                                       int iterations, const OptimizerConfig& config) {
  require(iterations >= 0, ErrorKind::kInvalidInput, "pixel baseline: iterations must be >= 0");
  ImageTensor image = seed_image;
  std::vector<double> m(image.size(), 0.0);
  std::vector<double> v(image.size(), 0.0);
  const double sign = objective.direction() == Direction::kMaximize ? 1.0 : -1.0;
  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  for (int t = 1; t <= iterations; ++t) {
    const ObjectiveValue obj = objective.evaluate_with_gradient(image, objective_seed(config, t));
    const double step_size = config.learning_rate / (1.0 - std::pow(b1, t));
    const double bias2_sqrt = std::sqrt(1.0 - std::pow(b2, t));
    auto pixels = image.data();
    const auto grad = obj.gradient.data();
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      const double g = sign * grad[i];
      require(std::isfinite(g), ErrorKind::kNumerical,
              "pixel baseline: non-finite gradient at step " + std::to_string(t));
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double denom = std::sqrt(v[i]) / bias2_sqrt + config.adam_epsilon;
      pixels[i] = std::clamp(pixels[i] + step_size * (m[i] / denom), 0.0, 1.0);
    }
  }
  return image;
}

ScorerFeatureBackend::ScorerFeatureBackend(std::shared_ptr<const ScorerBackend> scorer,
                                           std::vector<Eigen::VectorXd> class_embeddings,
                                           double temperature)
    : scorer_(std::move(scorer)), classes_(std::move(class_embeddings)), temperature_(temperature) {
  require(scorer_ != nullptr, ErrorKind::kInvalidState, "feature backend: scorer not loaded");
  require(!classes_.empty(), ErrorKind::kInvalidInput, "feature backend: no class embeddings");
  require(std::isfinite(temperature_) && temperature_ > 0.0, ErrorKind::kInvalidInput,
          "feature backend: temperature must be > 0");
}

std::string ScorerFeatureBackend::variant() const { return scorer_->variant() + "-embedding"; }

Eigen::VectorXd ScorerFeatureBackend::features(const ImageTensor& image) const {
  return embed_whole_image(*scorer_, image);
}

Eigen::VectorXd ScorerFeatureBackend::class_posteriors(const ImageTensor& image) const {
  const Eigen::VectorXd emb = features(image);
  Eigen::VectorXd logits(classes_.size());
  for (std::size_t c = 0; c < classes_.size(); ++c)
    logits[c] = temperature_ * cosine_similarity(emb, classes_[c]);
  logits.array() -= logits.maxCoeff();
  Eigen::VectorXd p = logits.array().exp();
  return p / p.sum();
}

// --- end-to-end evaluation ------------------------------------------------------

OptimizerConfig EvalConfig::desk_optimizer() {
  OptimizerConfig c = OptimizerConfig::text_edit();
  c.iterations = 50;
  return c;
}

void EvalConfig::validate() const {
  auto check = [](bool ok, const char* field, const std::string& why) {
    if (!ok) fail(ErrorKind::kConfiguration, std::string("eval config: field '") + field + "' " + why);
  };
  check(!dataset.empty(), "dataset", "must be 'toy' or a directory");
  check(toy_classes >= 2, "toy-classes", "must be >= 2");
  check(toy_per_class >= 1, "toy-per-class", "must be >= 1");
  check(n_seeds >= 1, "seeds", "must be >= 1");
  check(n_prompts >= 0, "prompts", "must be >= 0");
  check(crops.n_crops >= 0, "crops", "must be >= 0");
  check(crops.area_frac > 0.0 && crops.area_frac <= 1.0, "crop-area-frac", "must lie in (0, 1]");
  check(std::isfinite(posterior_temperature) && posterior_temperature > 0.0, "posterior-temperature",
        "must be > 0");
  check(is_splits >= 1, "is-splits", "must be >= 1");
  check(workers >= 1, "workers", "must be >= 1");
  optimizer.validate();
}

nlohmann::json EvalConfig::to_json() const {
  return {{"tokenizer", tokenizer.to_json()},
          {"scorer", scorer.to_json()},
          {"siglip", siglip.to_json()},
          {"dataset", dataset},
          {"class-table", class_table},
          {"toy-classes", toy_classes},
          {"toy-per-class", toy_per_class},
          {"seeds", n_seeds},
          {"prompts", n_prompts},
          {"association", association.str()},
          {"optimizer", optimizer.to_json()},
          {"crops", crops.n_crops},
          {"crop-area-frac", crops.area_frac},
          {"posterior-temperature", posterior_temperature},
          {"is-splits", is_splits},
          {"seed", seed},
          {"workers", workers},
          {"store", store_dir}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& doc) {
  require(doc.is_object(), ErrorKind::kConfiguration, "eval config must be an object");
  static const std::vector<std::string> kKeys = {
      "tokenizer", "scorer",      "siglip",         "dataset",  "class-table",
      "toy-classes", "toy-per-class", "seeds",      "prompts",  "association",
      "optimizer", "crops",       "crop-area-frac", "posterior-temperature",
      "is-splits", "seed",        "workers",        "store"};
  for (const auto& [key, value] : doc.items()) {
    require(std::find(kKeys.begin(), kKeys.end(), key) != kKeys.end(), ErrorKind::kConfiguration,
            "eval config: unknown field '" + key + "'");
  }
  EvalConfig c;
  auto field = [&](const char* key, auto& out) {
    if (!doc.contains(key)) return;
    try {
      out = doc.at(key).get<std::decay_t<decltype(out)>>();
    } catch (const nlohmann::json::exception&) {
      fail(ErrorKind::kConfiguration, std::string("eval config: field '") + key + "' has the wrong type");
    }
  };
  if (doc.contains("tokenizer")) c.tokenizer = BackendConfig::from_json(doc["tokenizer"]);
  if (doc.contains("scorer")) c.scorer = BackendConfig::from_json(doc["scorer"]);
  if (doc.contains("siglip")) c.siglip = BackendConfig::from_json(doc["siglip"]);
  field("dataset", c.dataset);
  field("class-table", c.class_table);
  field("toy-classes", c.toy_classes);
  field("toy-per-class", c.toy_per_class);
  field("seeds", c.n_seeds);
  field("prompts", c.n_prompts);
  if (doc.contains("association")) {
    std::string mode;
    field("association", mode);
    try {
      c.association = AssociationMode::parse(mode);
    } catch (const Error& e) {
      fail(ErrorKind::kConfiguration, std::string("eval config: field 'association': ") + e.what());
    }
  }
  if (doc.contains("optimizer")) {
    // Unspecified optimizer keys keep the desk defaults.
    nlohmann::json merged = desk_optimizer().to_json();
    require(doc["optimizer"].is_object(), ErrorKind::kConfiguration,
            "eval config: field 'optimizer' must be an object");
    for (const auto& [k, v] : doc["optimizer"].items()) merged[k] = v;
    c.optimizer = OptimizerConfig::from_json(merged);
  }
  field("crops", c.crops.n_crops);
  field("crop-area-frac", c.crops.area_frac);
  field("posterior-temperature", c.posterior_temperature);
  field("is-splits", c.is_splits);
  field("seed", c.seed);
  field("workers", c.workers);
  field("store", c.store_dir);
  c.validate();
  return c;
}

std::string EvalConfig::hash() const {
  nlohmann::json doc = to_json();
  doc.erase("workers");
  doc.erase("store");
  return to_hex(fnv1a64(doc.dump()));
}

nlohmann::json MetricsReport::to_json() const {
  return {{"fid", fid},
          {"is_mean", is_mean},
          {"is_std", is_std},
          {"clip_score", clip_score},
          {"siglip_score", siglip_score},
          {"sample_count", sample_count},
          {"failed_count", failed_count},
          {"partial", partial},
          {"feature_variant", feature_variant},
          {"clip_variant", clip_variant},
          {"siglip_variant", siglip_variant},
          {"siglip_convention", siglip_convention},
          {"config_hash", config_hash},
          {"seconds", seconds}};
}

std::string MetricsReport::hash() const {
  nlohmann::json doc = to_json();
  doc.erase("seconds");
  return to_hex(fnv1a64(doc.dump()));
}

EvalArtifacts run_evaluation(const EvalConfig& config, std::function<void(const std::string&)> log) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  auto say = [&](const std::string& msg) {
    if (log) log(msg);
  };

  const auto tokenizer = load_tokenizer(config.tokenizer);
  std::shared_ptr<const ScorerBackend> scorer = load_scorer(config.scorer);
  std::shared_ptr<const ScorerBackend> siglip = load_scorer(config.siglip);

  LabeledImageSet dataset;
  if (config.dataset == "toy") {
    ToyDataset toy = make_toy_dataset(*tokenizer, *scorer, config.toy_classes, config.toy_per_class,
                                      derive_seed(config.seed, "dataset"));
    // Toy scorers learn the class names from the synthetic prototypes.
    if (auto s = std::dynamic_pointer_cast<const ToyScorer>(scorer)) scorer = s->with_prompts(toy.prompt_vectors);
    if (auto s = std::dynamic_pointer_cast<const ToyScorer>(siglip)) siglip = s->with_prompts(toy.prompt_vectors);
    if (auto s = std::dynamic_pointer_cast<const ToyLogitScorer>(siglip)) siglip = s->with_prompts(toy.prompt_vectors);
    dataset = std::move(toy.images);
  } else {
    std::optional<fs::path> table;
    if (!config.class_table.empty()) table = config.class_table;
    dataset = load_image_tree(config.dataset, table, tokenizer->image_shape());
  }
  say("dataset " + dataset.id + ": " + std::to_string(dataset.images.size()) + " images, " +
      std::to_string(dataset.num_classes()) + " classes");

  EvalArtifacts out;
  out.seeds = sample_seed_set(dataset, config.n_seeds, derive_seed(config.seed, "seed-set"), *tokenizer);
  out.prompts = build_prompts(dataset.class_counts(), dataset.class_names, config.n_prompts);
  out.association = associate(out.prompts, out.seeds, config.association, scorer.get(),
                              derive_seed(config.seed, "association"));

  OptimizerConfig optimizer = config.optimizer;
  optimizer.seed = derive_seed(config.seed, "generation", config.optimizer.seed);
  const fs::path store_dir = config.store_dir;
  fs::create_directories(store_dir);
  write_file_atomic(store_dir / "config.json", config.to_json().dump(2));
  write_file_atomic(store_dir / "seeds.json", out.seeds.manifest.to_json().dump(2));
  write_file_atomic(store_dir / "association.json", out.association.to_json().dump(2));

  const CropSmoothing crops = config.crops;
  ObjectiveFactory factory = [&](const Prompt& prompt) -> std::unique_ptr<Objective> {
    return std::make_unique<ScorerSimilarityObjective>(scorer, scorer->embed_text(prompt.text), crops,
                                                       prompt.text);
  };
  BatchOptions batch{store_dir, config.workers, log, {}};
  out.store = generate_batch(out.association, out.prompts, out.seeds, factory, optimizer, *tokenizer, batch);
  say("generated " + std::to_string(out.store.completed()) + " samples, " +
      std::to_string(out.store.failed()) + " failed");

  std::vector<Eigen::VectorXd> class_embeddings;
  for (const auto& name : dataset.class_names) class_embeddings.push_back(scorer->embed_text("a photo of a " + name));
  const ScorerFeatureBackend features(scorer, class_embeddings, config.posterior_temperature);

  std::vector<std::optional<ImageTensor>> samples(out.prompts.prompts.size());
  std::vector<std::size_t> available;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i] = out.store.load_image(static_cast<int>(i));
    if (samples[i]) available.push_back(i);
  }

  MetricsReport& report = out.report;
  report.sample_count = static_cast<int>(available.size());
  report.failed_count = static_cast<int>(samples.size() - available.size());
  report.partial = report.failed_count > 0;
  report.feature_variant = features.variant();
  report.config_hash = config.hash();

  if (available.size() >= 2) {
    const int dim = static_cast<int>(features.features(*samples[available[0]]).size());
    Eigen::MatrixXd real(dataset.images.size(), dim);
    for (std::size_t i = 0; i < dataset.images.size(); ++i)
      real.row(i) = features.features(dataset.images[i].image).transpose();
    Eigen::MatrixXd gen(available.size(), dim);
    Eigen::MatrixXd posteriors(available.size(), dataset.num_classes());
    // Prompts are class-major, so contiguous IS splits would each see a single
    // class; the rows are put in a seeded random order first.
    std::vector<std::size_t> order = available;
    seeded_shuffle(order, derive_seed(config.seed, "is-order"));
    for (std::size_t r = 0; r < order.size(); ++r) {
      gen.row(r) = features.features(*samples[order[r]]).transpose();
      posteriors.row(r) = features.class_posteriors(*samples[order[r]]).transpose();
    }
    report.fid = fid(FeatureStats::from_rows(real), FeatureStats::from_rows(gen));
    const InceptionScore is = inception_score(posteriors, config.is_splits);
    report.is_mean = is.mean;
    report.is_std = is.std;
  } else {
    report.partial = true;
    report.fid = std::numeric_limits<double>::quiet_NaN();
    report.is_mean = std::numeric_limits<double>::quiet_NaN();
    report.is_std = std::numeric_limits<double>::quiet_NaN();
  }
  const auto texts = out.prompts.texts();
  const AlignmentScore clip = prompt_alignment_scores(samples, texts, *scorer);
  const AlignmentScore sig = prompt_alignment_scores(samples, texts, *siglip);
  report.clip_score = clip.mean;
  report.clip_variant = clip.variant;
  report.siglip_score = sig.mean;
  report.siglip_variant = sig.variant;
  report.siglip_convention = sig.convention;
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  write_file_atomic(store_dir / "report.json", report.to_json().dump(2));
  return out;
}

std::vector<SweepRow> iteration_sweep(const EvalConfig& base, std::span<const int> iterations,
                                      std::function<void(const std::string&)> log) {
  require(!iterations.empty(), ErrorKind::kInvalidInput, "iteration sweep: no iteration counts");
  const auto started = std::chrono::steady_clock::now();
  std::vector<SweepRow> rows;
  for (int n : iterations) {
    EvalConfig cell = base;
    cell.optimizer.iterations = n;
    cell.store_dir = (fs::path(base.store_dir) / ("iters-" + std::to_string(n))).string();
    const auto cell_start = std::chrono::steady_clock::now();
    const EvalArtifacts result = run_evaluation(cell, log);
    const auto now = std::chrono::steady_clock::now();
    rows.push_back({n, result.report.fid, result.report.is_mean, result.report.is_std,
                    std::chrono::duration<double>(now - cell_start).count(),
                    std::chrono::duration<double>(now - started).count()});
  }
  return rows;
}

std::string sweep_to_csv(std::span<const SweepRow> rows) {
  std::ostringstream out;
  out.precision(17);
  out << "iterations,fid,is,is_std,seconds,elapsed\n";
  for (const auto& r : rows)
    out << r.iterations << "," << r.fid << "," << r.is_mean << "," << r.is_std << "," << r.seconds << ","
        << r.elapsed << "\n";
  return out.str();
}

}  // namespace tokopt
