#include "tokopt/cli.hpp"

#include "tokopt/analysis.hpp"
#include "tokopt/edit.hpp"
#include "tokopt/error.hpp"
#include "tokopt/eval.hpp"
#include "tokopt/io.hpp"
#include "tokopt/objectives.hpp"
#include "tokopt/optimizer.hpp"
#include "tokopt/random.hpp"
#include "tokopt/service.hpp"
#include "tokopt/toy_backends.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <functional>
#include <cstdlib>
#include <map>
#include <set>
#include <ostream>
#include <sstream>

namespace tokopt {

namespace {

namespace fs = std::filesystem;

// Raised for failures while constructing backends; mapped to exit code 3.
struct BackendLoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string env_name(const std::string& flag) {
  std::string name = "TOKOPT_";
  for (char c : flag) name += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return name;
}

template <typename T>
CLI::Option* flag(CLI::App* app, const std::string& name, T& target, const std::string& help) {
  return app->add_option("--" + name, target, help)->envname(env_name(name))->capture_default_str();
}

struct BackendFlags {
  std::string tokenizer = "toy-tokenizer";
  std::uint64_t tokenizer_seed = 0;
  std::string tokenizer_variant;
  std::string tokenizer_path;
  int codebook_size = ToyTokenizer::kDefaultCodebookSize;
  std::string scorer = "toy-scorer";
  std::uint64_t scorer_seed = 0;
  std::string scorer_path;
  std::string prompts_file;

  void add(CLI::App* app) {
    flag(app, "tokenizer", tokenizer, "Tokenizer backend: toy-tokenizer or titok");
    flag(app, "tokenizer-seed", tokenizer_seed, "Seed of the toy tokenizer");
    flag(app, "tokenizer-variant", tokenizer_variant, "Pretrained tokenizer variant, e.g. VQ-LL-32");
    flag(app, "tokenizer-path", tokenizer_path, "Pretrained tokenizer checkpoint");
    flag(app, "codebook-size", codebook_size, "Codebook size of the toy tokenizer");
    flag(app, "scorer", scorer, "Scorer backend: toy-scorer, toy-siglip, clip or siglip");
    flag(app, "scorer-seed", scorer_seed, "Seed of the toy scorer");
    flag(app, "scorer-path", scorer_path, "Pretrained scorer checkpoint");
    flag(app, "prompts-file", prompts_file, "JSON map of named prompt vectors for the toy scorer");
  }

  BackendConfig tokenizer_config() const {
    BackendConfig c = BackendConfig::of_kind(tokenizer, tokenizer_seed);
    c.variant = tokenizer_variant;
    c.path = tokenizer_path;
    if (tokenizer == "toy-tokenizer") c.codebook_size = codebook_size;
    return c;
  }

  BackendConfig scorer_config() const {
    BackendConfig c = BackendConfig::of_kind(scorer, scorer_seed);
    c.path = scorer_path;
    if (!prompts_file.empty()) c.prompts = nlohmann::json::parse(read_file_text(prompts_file));
    return c;
  }

  std::shared_ptr<const TokenizerBackend> load_tok() const {
    try {
      return load_tokenizer(tokenizer_config());
    } catch (const std::exception& e) {
      throw BackendLoadError(std::string("cannot load tokenizer: ") + e.what());
    }
  }

  std::shared_ptr<const ScorerBackend> load_score() const {
    try {
      return load_scorer(scorer_config());
    } catch (const std::exception& e) {
      throw BackendLoadError(std::string("cannot load scorer: ") + e.what());
    }
  }
};

// One flag per OptimizerConfig field, same kebab-case names as the config
// documents. Flags that are not given keep the preset's value.
struct OptimizerFlags {
  std::string preset;
  bool from_scratch = false;
  OptimizerConfig defaults;
  int iterations = 0;
  double learning_rate = 0;
  double adam_beta1 = 0;
  double adam_beta2 = 0;
  double adam_epsilon = 0;
  std::string ema_decay;
  std::string noise;
  double noise_sigma2_start = 0;
  int noise_ramp_end_iter = 0;
  double reg_lambda = 0;
  std::string reset_interval;
  std::string init;
  double sigma_init = 0;
  std::uint64_t seed = 0;
  std::map<std::string, CLI::Option*> given;

  void add(CLI::App* app, const std::string& default_preset) {
    preset = default_preset;
    defaults = preset_config(preset);
    const nlohmann::json d = defaults.to_json();
    iterations = defaults.iterations;
    learning_rate = defaults.learning_rate;
    adam_beta1 = defaults.adam_beta1;
    adam_beta2 = defaults.adam_beta2;
    adam_epsilon = defaults.adam_epsilon;
    ema_decay = d["ema-decay"].is_string() ? "off" : d["ema-decay"].dump();
    noise = d["noise"].get<std::string>();
    noise_sigma2_start = defaults.noise.value_or(NoiseSchedule{}).sigma2_start;
    noise_ramp_end_iter = defaults.noise.value_or(NoiseSchedule{}).ramp_end_iter;
    reg_lambda = defaults.reg_lambda;
    reset_interval = defaults.reset_interval ? std::to_string(*defaults.reset_interval) : "off";
    init = d["init"].get<std::string>();
    sigma_init = defaults.sigma_init;
    seed = defaults.seed;

    flag(app, "preset", preset, "Recipe: text-edit, with-tweaks, inpainting, from-scratch")
        ->check(CLI::IsMember({"text-edit", "with-tweaks", "inpainting", "from-scratch"}));
    app->add_flag("--from-scratch", from_scratch, "Shorthand for --preset from-scratch")
        ->envname(env_name("from-scratch"));
    given["iterations"] = app->add_option("--iterations,--iters", iterations, "Optimisation steps")
                              ->envname(env_name("iterations"))
                              ->capture_default_str();
    given["learning-rate"] = flag(app, "learning-rate", learning_rate, "Adam learning rate");
    given["adam-beta1"] = flag(app, "adam-beta1", adam_beta1, "Adam first-moment decay");
    given["adam-beta2"] = flag(app, "adam-beta2", adam_beta2, "Adam second-moment decay");
    given["adam-epsilon"] = flag(app, "adam-epsilon", adam_epsilon, "Adam epsilon");
    given["ema-decay"] = flag(app, "ema-decay", ema_decay, "EMA decay of the iterates, or 'off'");
    given["noise"] = flag(app, "noise", noise, "Token noise schedule: off or cosine")
                         ->check(CLI::IsMember({"off", "cosine"}));
    given["noise-sigma2-start"] = flag(app, "noise-sigma2-start", noise_sigma2_start, "Noise variance at step 1");
    given["noise-ramp-end-iter"] =
        flag(app, "noise-ramp-end-iter", noise_ramp_end_iter, "Step at which the noise reaches 0");
    given["reg-lambda"] = flag(app, "reg-lambda", reg_lambda, "L2 regularisation weight");
    given["reset-interval"] = flag(app, "reset-interval", reset_interval, "Token reset period, or 'off'");
    given["init"] = flag(app, "init", init, "Initialisation: from-image or random")
                        ->check(CLI::IsMember({"from-image", "random"}));
    given["sigma-init"] = flag(app, "sigma-init", sigma_init, "Std of random initial features");
    given["seed"] = flag(app, "seed", seed, "Root seed of every random stream");
  }

  // Rewrites the displayed defaults of unset flags to the resolved config, so
  // that --show-config prints what will actually run.
  void resolve_defaults() const {
    const nlohmann::json doc = build().to_json();
    for (const auto& [key, opt] : given) {
      if (opt->count() > 0 || !doc.contains(key)) continue;
      const nlohmann::json& v = doc.at(key);
      opt->default_str(v.is_string() ? v.get<std::string>() : v.dump());
    }
  }

  static OptimizerConfig preset_config(const std::string& name) {
    if (name == "with-tweaks") return OptimizerConfig::with_tweaks();
    if (name == "inpainting") return OptimizerConfig::inpainting();
    if (name == "from-scratch") return OptimizerConfig::from_scratch();
    return OptimizerConfig::text_edit();
  }

  OptimizerConfig build() const {
    const OptimizerConfig base = preset_config(from_scratch ? "from-scratch" : preset);
    nlohmann::json doc = base.to_json();
    auto set = [&](const char* key, const nlohmann::json& value) {
      if (given.at(key)->count() > 0) doc[key] = value;
    };
    auto number_or_off = [](const std::string& key, const std::string& text, bool integer) -> nlohmann::json {
      if (text == "off") return "off";
      try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        if (integer) return static_cast<int>(v);
        return v;
      } catch (const std::exception&) {
        fail(ErrorKind::kConfiguration, "--" + key + " expects a number or 'off', got '" + text + "'");
      }
    };
    set("iterations", iterations);
    set("learning-rate", learning_rate);
    set("adam-beta1", adam_beta1);
    set("adam-beta2", adam_beta2);
    set("adam-epsilon", adam_epsilon);
    if (given.at("ema-decay")->count() > 0) doc["ema-decay"] = number_or_off("ema-decay", ema_decay, false);
    set("noise", noise);
    if (given.at("noise-sigma2-start")->count() > 0 || given.at("noise-ramp-end-iter")->count() > 0) {
      if (doc["noise"] == "off" && given.at("noise")->count() == 0) doc["noise"] = "cosine";
    }
    set("noise-sigma2-start", noise_sigma2_start);
    set("noise-ramp-end-iter", noise_ramp_end_iter);
    set("reg-lambda", reg_lambda);
    if (given.at("reset-interval")->count() > 0)
      doc["reset-interval"] = number_or_off("reset-interval", reset_interval, true);
    set("init", init);
    set("sigma-init", sigma_init);
    set("seed", seed);
    if (doc["noise"] == "off") {
      doc.erase("noise-sigma2-start");
      doc.erase("noise-ramp-end-iter");
    }
    return OptimizerConfig::from_json(doc);
  }
};

ImageTensor load_image_for(const std::string& path, const TokenizerBackend& tok, bool resize, int channels = 3) {
  ImageTensor image = read_png(path, channels);
  const ImageShape want{channels, tok.image_shape().height, tok.image_shape().width};
  if (image.shape() == want) return image;
  require(resize, ErrorKind::kInvalidInput,
          path + " is " + image.shape().str() + ", backend expects " + want.str() + " (pass --resize)");
  return Resizer(image.height(), image.width(), want.height, want.width).apply(image).clamped();
}

LabeledImageSet load_dataset(const std::string& dir, const std::string& class_table, const TokenizerBackend& tok) {
  std::optional<fs::path> table;
  if (!class_table.empty()) table = class_table;
  return load_image_tree(dir, table, tok.image_shape());
}

std::vector<std::size_t> split_indices(std::size_t n, double val_fraction, std::uint64_t seed,
                                       std::vector<std::size_t>& val) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "probe-split"));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(n)));
  val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(n_val, n)));
  return {order.begin() + static_cast<std::ptrdiff_t>(std::min(n_val, n)), order.end()};
}

void write_text(const std::string& path, const std::string& text) { write_file_atomic(path, text); }

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidInput:
    case ErrorKind::kConfiguration:
    case ErrorKind::kDegenerateMask:
    case ErrorKind::kNotFound:
      return kExitUsage;
    case ErrorKind::kBackendUnavailable:
      return kExitBackend;
    case ErrorKind::kDegenerateClass:
    case ErrorKind::kNumerical:
    case ErrorKind::kInvalidState:
    case ErrorKind::kCancelled:
      return kExitRuntime;
  }
  return kExitRuntime;
}

struct EvalFlags {
  std::string config_file;
  std::string dataset;
  std::string class_table;
  int seeds = 0;
  int prompts = -1;
  std::string association;
  int iterations = -1;
  int workers = 0;
  std::string store;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  void add(CLI::App* app) {
    app->add_option("--config", config_file, "Evaluation config (JSON)")->check(CLI::ExistingFile);
    flag(app, "dataset", dataset, "'toy' or a directory-per-class image tree");
    flag(app, "class-table", class_table, "Class-name table: <dir>\\t<lemma>, ...");
    flag(app, "seeds", seeds, "Number of seed images (0 = config value)");
    flag(app, "prompts", prompts, "Number of prompts (-1 = config value)");
    flag(app, "association", association, "Seed association: random, top1 or topk:<p>%");
    flag(app, "iterations", iterations, "Optimisation steps per sample (-1 = config value)");
    flag(app, "workers", workers, "Parallel generation workers (0 = config value)");
    flag(app, "store", store, "Sample store directory");
    seed_opt = flag(app, "seed", seed, "Root seed of the evaluation");
  }

  EvalConfig build() const {
    EvalConfig c;
    if (!config_file.empty()) c = EvalConfig::from_json(nlohmann::json::parse(read_file_text(config_file)));
    if (!dataset.empty()) c.dataset = dataset;
    if (!class_table.empty()) c.class_table = class_table;
    if (seeds > 0) c.n_seeds = seeds;
    if (prompts >= 0) c.n_prompts = prompts;
    if (!association.empty()) c.association = AssociationMode::parse(association);
    if (iterations >= 0) c.optimizer.iterations = iterations;
    if (workers > 0) c.workers = workers;
    if (!store.empty()) c.store_dir = store;
    if (seed_opt->count() > 0) c.seed = seed;
    c.validate();
    return c;
  }
};

// CLI11 lets config-file values shadow environment variables; the required
// order is flags > environment > config file, so environment values are
// re-applied to every option that was not spelled out on the command line.
void apply_environment(CLI::App& sub, int argc, const char* const* argv) {
  std::set<std::string> on_command_line;
  for (int i = 1; i < argc; ++i) {
    std::string token = argv[i];
    if (token.rfind("--", 0) != 0) continue;
    on_command_line.insert(token.substr(2, token.find('=') - 2));
  }
  for (CLI::Option* opt : sub.get_options()) {
    const std::string& env = opt->get_envname();
    if (env.empty()) continue;
    const char* value = std::getenv(env.c_str());
    if (value == nullptr) continue;
    const auto& names = opt->get_lnames();
    if (std::any_of(names.begin(), names.end(), [&](const std::string& n) { return on_command_line.count(n) > 0; }))
      continue;
    opt->clear();
    opt->add_result(std::string(value));
    opt->run_callback();
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Test-time optimisation and editing in the token space of 1D image tokenizers", "tokopt"};
  app.set_config("--config", "", "CLI config file (TOML/INI); flags and TOKOPT_* variables take precedence");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  app.fallthrough();
  bool show_config = false;
  app.add_flag("--show-config", show_config, "Print the effective configuration and exit");

  BackendFlags backends;
  std::function<int()> action;

  // analyze-importance
  auto* analyze = app.add_subcommand("analyze-importance", "Per-position token importance over a class partition");
  std::string an_dataset, an_table, an_out;
  std::vector<std::string> an_prompts;
  analyze->add_option("--dataset", an_dataset, "Directory-per-class image tree")->required()->check(CLI::ExistingDirectory);
  analyze->add_option("--class-table", an_table, "Class-name table")->check(CLI::ExistingFile);
  analyze->add_option("--prompts", an_prompts, "Class prompts (>= 2); default: directory classes");
  analyze->add_option("--out", an_out, "Output prefix: writes <out>.csv and <out>.json")->required();
  backends.add(analyze);
  analyze->callback([&] {
    action = [&] {
      const auto tok = backends.load_tok();
      const LabeledImageSet data = load_dataset(an_dataset, an_table, *tok);
      std::vector<ImageTensor> images;
      for (const auto& img : data.images) images.push_back(img.image);
      ClassPartition partition;
      if (!an_prompts.empty()) {
        require(an_prompts.size() >= 2, ErrorKind::kInvalidInput, "--prompts needs at least 2 prompts");
        partition = assign_classes(images, an_prompts, *backends.load_score(), data.id);
      } else {
        partition.id = data.id;
        partition.prompts = data.class_names;
        for (const auto& img : data.images) partition.assignment.push_back(img.label);
      }
      std::vector<LatentFeatures> features;
      for (const auto& img : images) features.push_back(lookup(tok->tokenize(img), tok->codebook()));
      const ImportanceProfile profile = importance_profile(fit_token_stats(features, partition));
      write_text(an_out + ".csv", profile.to_csv());
      write_text(an_out + ".json",
                 nlohmann::json{{"profile", profile.to_json()}, {"partition", partition.to_json()}}.dump(2));
      if (profile.all_zero) err << "warning: importance profile is identically zero\n";
      out << "most important position: " << profile.argmax() << "\n";
      return 0;
    };
  });

  // probe
  auto* probe = app.add_subcommand("probe", "Token probing: per-token tables or iterative masking");
  std::string pr_dataset, pr_table, pr_out, pr_method = "per-token";
  double pr_val = 0.25;
  bool pr_continuous = false;
  MaskingProbeConfig pr_config;
  probe->add_option("--dataset", pr_dataset, "Directory-per-class image tree")->required()->check(CLI::ExistingDirectory);
  probe->add_option("--class-table", pr_table, "Class-name table")->check(CLI::ExistingFile);
  probe->add_option("--method", pr_method, "per-token or masking")->check(CLI::IsMember({"per-token", "masking"}))->capture_default_str();
  probe->add_option("--val-fraction", pr_val, "Held-out fraction")->check(CLI::Range(0.01, 0.99))->capture_default_str();
  probe->add_flag("--continuous", pr_continuous, "Masking probe on codebook embeddings instead of token ids");
  probe->add_option("--epochs", pr_config.epochs, "Masking probe epochs per round")->capture_default_str();
  probe->add_option("--position-dropout", pr_config.position_dropout, "Masking probe position dropout")->capture_default_str();
  probe->add_option("--seed", pr_config.seed, "Seed of the split and the probe")->envname(env_name("seed"));
  probe->add_option("--out", pr_out, "Output CSV")->required();
  backends.add(probe);
  probe->callback([&] {
    action = [&] {
      const auto tok = backends.load_tok();
      const LabeledImageSet data = load_dataset(pr_dataset, pr_table, *tok);
      std::vector<std::size_t> val_idx;
      const std::vector<std::size_t> train_idx = split_indices(data.images.size(), pr_val, pr_config.seed, val_idx);
      require(!train_idx.empty() && !val_idx.empty(), ErrorKind::kInvalidInput, "probe: split leaves an empty side");
      std::vector<TokenSequence> tokens;
      for (const auto& img : data.images) tokens.push_back(tok->tokenize(img.image));
      if (pr_method == "per-token") {
        LabeledTokens train, val;
        for (auto i : train_idx) train.tokens.push_back(tokens[i]), train.labels.push_back(data.images[i].label);
        for (auto i : val_idx) val.tokens.push_back(tokens[i]), val.labels.push_back(data.images[i].label);
        std::string csv = "position,value\n";
        for (int k = 0; k < tok->num_tokens(); ++k) {
          const double acc = per_token_probe(train, val, k, data.num_classes());
          csv += std::to_string(k) + "," + std::to_string(acc) + "\n";
        }
        write_text(pr_out, csv);
      } else {
        ProbeData train, val;
        auto fill = [&](ProbeData& d, const std::vector<std::size_t>& idx) {
          for (auto i : idx) {
            if (pr_continuous) d.features.push_back(lookup(tokens[i], tok->codebook()));
            else d.tokens.push_back(tokens[i]);
            d.labels.push_back(data.images[i].label);
          }
        };
        fill(train, train_idx);
        fill(val, val_idx);
        pr_config.num_classes = data.num_classes();
        const MaskingProbeResult r = iterative_masking_probe(train, val, pr_config);
        write_text(pr_out, r.to_csv());
        out << "most important position: " << r.removal_order.back() << "\n";
      }
      return 0;
    };
  });

  // edit
  auto* edit = app.add_subcommand("edit", "Copy tokens at chosen positions from a reference image");
  std::string ed_target, ed_ref, ed_out, ed_preset, ed_tokens_out;
  std::vector<int> ed_positions;
  bool ed_resize = false;
  edit->add_option("--target", ed_target, "Target image")->required()->check(CLI::ExistingFile);
  edit->add_option("--ref", ed_ref, "Reference image")->required()->check(CLI::ExistingFile);
  auto* pos_opt = edit->add_option("--positions", ed_positions, "Token positions, comma separated")->delimiter(',');
  auto* preset_opt = edit->add_option("--preset", ed_preset, "Named position preset");
  pos_opt->excludes(preset_opt);
  edit->add_option("--out", ed_out, "Output image")->required();
  edit->add_option("--tokens-out", ed_tokens_out, "Write the edited token sequence (JSON)");
  edit->add_flag("--resize", ed_resize, "Resize inputs to the backend image size");
  backends.add(edit);
  edit->callback([&] {
    action = [&] {
      const auto tok = backends.load_tok();
      std::vector<int> positions = ed_positions;
      if (!ed_preset.empty()) {
        const EditPreset& p = preset(ed_preset);
        if (p.variant != tok->variant())
          err << "warning: preset '" << p.name << "' was found on " << p.variant << ", backend is " << tok->variant() << "\n";
        if (!p.reliable) err << "warning: preset '" << p.name << "' transfers only some of the time\n";
        positions = p.positions;
      }
      const TokenSequence edited = replace_tokens(tok->tokenize(load_image_for(ed_target, *tok, ed_resize)),
                                                  tok->tokenize(load_image_for(ed_ref, *tok, ed_resize)), positions);
      write_png(ed_out, tok->decode_tokens(edited));
      if (!ed_tokens_out.empty()) write_text(ed_tokens_out, tokens_to_json(edited).dump());
      out << "wrote " << ed_out << "\n";
      return 0;
    };
  });

  // search-token
  auto* search = app.add_subcommand("search-token", "Exhaustive single-token replacement search");
  std::string st_image, st_out;
  int st_position = 0, st_workers = 1;
  bool st_resize = false;
  search->add_option("--image", st_image, "Input image")->required()->check(CLI::ExistingFile);
  search->add_option("--position", st_position, "Token position")->required();
  search->add_option("--out", st_out, "Output image")->required();
  search->add_option("--workers", st_workers, "Decode threads")->capture_default_str();
  search->add_flag("--resize", st_resize, "Resize the input to the backend image size");
  backends.add(search);
  search->callback([&] {
    action = [&] {
      const auto tok = backends.load_tok();
      const TokenSearchResult r =
          single_token_search(load_image_for(st_image, *tok, st_resize), st_position, *tok, mean_abs_difference, st_workers);
      write_png(st_out, r.edited_image);
      out << nlohmann::json{{"best_index", r.best_index}, {"score", r.score}}.dump() << "\n";
      return 0;
    };
  });

  // optimize
  auto* optimize = app.add_subcommand("optimize", "Text-guided token optimisation");
  std::string op_image, op_prompt, op_out, op_traj;
  CropSmoothing op_crops;
  bool op_resize = false;
  OptimizerFlags op_flags;
  optimize->add_option("--image", op_image, "Seed image (omit for random initialisation)")->check(CLI::ExistingFile);
  optimize->add_option("--prompt", op_prompt, "Text prompt")->required();
  optimize->add_option("--out", op_out, "Output image")->required();
  optimize->add_option("--trajectory", op_traj, "Write the objective trajectory (JSON)");
  flag(optimize, "crops", op_crops.n_crops, "Random crops per objective evaluation (0 = whole image)");
  flag(optimize, "crop-area-frac", op_crops.area_frac, "Crop area as a fraction of the image");
  optimize->add_flag("--resize", op_resize, "Resize the seed image to the backend size");
  backends.add(optimize);
  op_flags.add(optimize, "text-edit");
  optimize->callback([&] {
    action = [&] {
      const OptimizerConfig config = op_flags.build();
      const auto tok = backends.load_tok();
      const auto scorer = backends.load_score();
      std::optional<ImageTensor> seed;
      if (!op_image.empty()) seed = load_image_for(op_image, *tok, op_resize);
      const ScorerSimilarityObjective objective(scorer, scorer->embed_text(op_prompt), op_crops, op_prompt);
      const RunResult r = run(seed, objective, *tok, config);
      write_png(op_out, r.image);
      if (!op_traj.empty()) write_text(op_traj, r.trajectory.to_json().dump(2));
      const double last = r.trajectory.values.empty() ? 0.0 : r.trajectory.values.back().value;
      out << "wrote " << op_out << " (" << r.state.step << " steps, objective " << last << ")\n";
      return 0;
    };
  });

  // inpaint
  auto* inpaint = app.add_subcommand("inpaint", "Inpaint the masked-out region by token optimisation");
  std::string in_image, in_mask, in_out, in_traj;
  double in_blur = 2.0;
  bool in_resize = false;
  OptimizerFlags in_flags;
  inpaint->add_option("--image", in_image, "Input image")->required()->check(CLI::ExistingFile);
  inpaint->add_option("--mask", in_mask, "Mask image: white = given, black = inpaint")->required()->check(CLI::ExistingFile);
  inpaint->add_option("--out", in_out, "Output image")->required();
  inpaint->add_option("--trajectory", in_traj, "Write the objective trajectory (JSON)");
  flag(inpaint, "blur-radius", in_blur, "Gaussian sigma of the soft mask transition, in pixels");
  inpaint->add_flag("--resize", in_resize, "Resize inputs to the backend size");
  backends.add(inpaint);
  in_flags.add(inpaint, "inpainting");
  inpaint->callback([&] {
    action = [&] {
      const OptimizerConfig config = in_flags.build();
      require(in_blur >= 0.0, ErrorKind::kInvalidInput, "--blur-radius must be >= 0");
      const auto tok = backends.load_tok();
      const ImageTensor image = load_image_for(in_image, *tok, in_resize);
      const ImageTensor mask_image = load_image_for(in_mask, *tok, in_resize, 1);
      const SoftMask mask = soft_mask_from_binary(SoftMask::from_image(mask_image).weights(), in_blur);
      require(mask.mass() > 0.0, ErrorKind::kDegenerateMask, "mask marks no given pixels");
      const InpaintContext context{image, mask};
      const MaskedL1Objective objective(image, mask);
      RunOptions options;
      options.inpaint = &context;
      const RunResult r = run(image, objective, *tok, config, options);
      write_png(in_out, blend(r.image, image, mask));
      if (!in_traj.empty()) write_text(in_traj, r.trajectory.to_json().dump(2));
      out << "wrote " << in_out << "\n";
      return 0;
    };
  });

  // generate
  auto* generate = app.add_subcommand("generate", "Batch generation from prompts, optionally seeded");
  std::vector<std::string> gen_prompts;
  std::string gen_prompt_file, gen_seed_dir, gen_store, gen_assoc = "top1";
  int gen_workers = 1;
  CropSmoothing gen_crops;
  OptimizerFlags gen_flags;
  generate->add_option("--prompt", gen_prompts, "Prompt (repeatable)");
  generate->add_option("--prompt-file", gen_prompt_file, "File with one prompt per line")->check(CLI::ExistingFile);
  generate->add_option("--seed-dir", gen_seed_dir, "Directory of seed PNGs (omit for random initialisation)")->check(CLI::ExistingDirectory);
  flag(generate, "association", gen_assoc, "Seed association: random, top1 or topk:<p>%");
  generate->add_option("--store", gen_store, "Sample store directory")->required();
  flag(generate, "workers", gen_workers, "Parallel workers");
  flag(generate, "crops", gen_crops.n_crops, "Random crops per objective evaluation");
  flag(generate, "crop-area-frac", gen_crops.area_frac, "Crop area fraction");
  backends.add(generate);
  gen_flags.add(generate, "text-edit");
  generate->callback([&] {
    action = [&] {
      PromptSet prompts;
      prompts.prompts.clear();
      for (const auto& p : gen_prompts) prompts.prompts.push_back({p, 0});
      if (!gen_prompt_file.empty()) {
        std::istringstream in(read_file_text(gen_prompt_file));
        for (std::string line; std::getline(in, line);)
          if (!line.empty()) prompts.prompts.push_back({line, 0});
      }
      prompts.target = static_cast<int>(prompts.prompts.size());
      OptimizerConfig config = gen_flags.build();
      const auto tok = backends.load_tok();
      const auto scorer = backends.load_score();
      SeedSet seeds;
      if (!gen_seed_dir.empty()) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(gen_seed_dir))
          if (e.path().extension() == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
          ImageTensor image = load_image_for(f.string(), *tok, true);
          seeds.entries.push_back({f.filename().string(), 0, image, tok->tokenize(image)});
          seeds.manifest.image_ids.push_back(f.filename().string());
        }
        require(!seeds.entries.empty(), ErrorKind::kInvalidInput, "--seed-dir has no PNG files");
      } else {
        // A placeholder seed keeps the association well-formed; random init ignores it.
        seeds.entries.push_back({"random", 0, ImageTensor(tok->image_shape(), 0.5), TokenSequence{}});
        config.init = InitMode::kRandom;
        gen_assoc = "random";
      }
      require(!prompts.prompts.empty(), ErrorKind::kInvalidInput, "generate needs --prompt or --prompt-file");
      const Association assoc = associate(prompts, seeds, AssociationMode::parse(gen_assoc), scorer.get(),
                                          derive_seed(config.seed, "association"));
      ObjectiveFactory factory = [&](const Prompt& prompt) -> std::unique_ptr<Objective> {
        return std::make_unique<ScorerSimilarityObjective>(scorer, scorer->embed_text(prompt.text), gen_crops, prompt.text);
      };
      BatchOptions options{gen_store, gen_workers, [&](const std::string& m) { err << m << "\n"; }, {}};
      const SampleStore store = generate_batch(assoc, prompts, seeds, factory, config, *tok, options);
      write_text((fs::path(gen_store) / "association.json").string(), assoc.to_json().dump(2));
      out << store.completed() << " samples written to " << gen_store << ", " << store.failed() << " failed\n";
      return store.failed() > 0 ? static_cast<int>(kExitRuntime) : 0;
    };
  });

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "End-to-end generation and FID/IS/CLIP/SigLIP evaluation");
  EvalFlags ev_flags;
  std::string ev_report;
  ev_flags.add(evaluate);
  evaluate->add_option("--report", ev_report, "Also write the metrics report here");
  evaluate->callback([&] {
    action = [&] {
      const EvalConfig config = ev_flags.build();
      EvalArtifacts result;
      try {
        result = run_evaluation(config, [&](const std::string& m) { err << m << "\n"; });
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::kBackendUnavailable || e.kind() == ErrorKind::kConfiguration) throw BackendLoadError(e.what());
        throw;
      }
      const nlohmann::json report = result.report.to_json();
      if (!ev_report.empty()) write_text(ev_report, report.dump(2));
      out << report.dump(2) << "\nreport hash: " << result.report.hash() << "\n";
      if (result.report.partial) {
        err << "partial evaluation: " << result.report.failed_count << " of "
            << result.report.failed_count + result.report.sample_count << " samples missing\n";
        return static_cast<int>(kExitRuntime);
      }
      return 0;
    };
  });

  // sweep-iterations
  auto* sweep = app.add_subcommand("sweep-iterations", "FID and IS over a sweep of iteration counts");
  EvalFlags sw_flags;
  std::vector<int> sw_counts;
  std::string sw_out;
  sw_flags.add(sweep);
  sweep->add_option("--counts", sw_counts, "Iteration counts, comma separated")->required()->delimiter(',');
  sweep->add_option("--out", sw_out, "Output CSV")->required();
  sweep->callback([&] {
    action = [&] {
      const std::vector<SweepRow> rows = iteration_sweep(sw_flags.build(), sw_counts, [&](const std::string& m) { err << m << "\n"; });
      write_text(sw_out, sweep_to_csv(rows));
      out << "wrote " << sw_out << "\n";
      return 0;
    };
  });

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  std::string sv_config, sv_data_dir, sv_backend, sv_host;
  int sv_port = -1, sv_workers = 0;
  serve->add_option("--service-config", sv_config, "Service config file (key = value)")->check(CLI::ExistingFile);
  serve->add_option("--port", sv_port, "Port (0 = any free port)");
  serve->add_option("--host", sv_host, "Bind address");
  serve->add_option("--data-dir", sv_data_dir, "Session and artifact root");
  serve->add_option("--backend", sv_backend, "Tokenizer backend kind");
  serve->add_option("--job-workers", sv_workers, "Parallel optimisation jobs");
  serve->callback([&] {
    action = [&] {
      ServiceConfig config = sv_config.empty() ? ServiceConfig{} : ServiceConfig::from_key_value(read_file_text(sv_config));
      config.apply_environment();
      if (sv_port >= 0) config.port = sv_port;
      if (!sv_host.empty()) config.host = sv_host;
      if (!sv_data_dir.empty()) config.data_dir = sv_data_dir;
      if (!sv_backend.empty()) config.tokenizer.kind = sv_backend;
      if (sv_workers > 0) config.job_workers = sv_workers;
      config.validate();
      Service service(config);
      out << "serving on " << config.host << ":" << config.port << " (data in " << config.data_dir.string() << ")\n";
      out.flush();
      service.listen();
      return 0;
    };
  });

  // make-toy-dataset
  auto* toy = app.add_subcommand("make-toy-dataset", "Write a synthetic labelled dataset for the toy backends");
  std::string toy_out;
  int toy_classes = 4, toy_per_class = 8;
  std::uint64_t toy_seed = 0;
  toy->add_option("--out", toy_out, "Output directory")->required();
  toy->add_option("--classes", toy_classes, "Number of classes")->capture_default_str();
  toy->add_option("--per-class", toy_per_class, "Images per class")->capture_default_str();
  toy->add_option("--seed", toy_seed, "Dataset seed")->capture_default_str();
  backends.add(toy);
  toy->callback([&] {
    action = [&] {
      const auto tok = backends.load_tok();
      const auto scorer = backends.load_score();
      const ToyDataset data = make_toy_dataset(*tok, *scorer, toy_classes, toy_per_class, toy_seed);
      std::string table;
      for (const auto& img : data.images.images) {
        const std::string cls = data.images.class_names[img.label];
        fs::create_directories(fs::path(toy_out) / cls);
        write_png(fs::path(toy_out) / cls / (img.id.substr(img.id.find('/') + 1) + ".png"), img.image);
      }
      for (const auto& name : data.images.class_names) table += name + "\t" + name + "\n";
      write_text((fs::path(toy_out) / "classes.tsv").string(), table);
      nlohmann::json prompts = nlohmann::json::object();
      for (const auto& [name, v] : data.prompt_vectors) prompts[name] = std::vector<double>(v.data(), v.data() + v.size());
      write_text((fs::path(toy_out) / "prompts.json").string(), prompts.dump(2));
      out << "wrote " << data.images.images.size() << " images to " << toy_out << "\n";
      return 0;
    };
  });

  const std::map<std::string, const OptimizerFlags*> optimizer_flags = {
      {"optimize", &op_flags}, {"inpaint", &in_flags}, {"generate", &gen_flags}};
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    const int code = app.exit(e, o, er);
    out << o.str();
    err << er.str();
    if (code != 0) err << "run 'tokopt --help' for usage\n";
    return code == 0 ? 0 : static_cast<int>(kExitUsage);
  }
  CLI::App* selected = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front();
  if (selected != nullptr) {
    try {
      apply_environment(*selected, argc, argv);
    } catch (const CLI::ParseError& e) {
      err << "error: environment: " << e.what() << "\n";
      return kExitUsage;
    }
  }
  if (show_config) {
    if (selected == nullptr) return 0;
    try {
      if (auto it = optimizer_flags.find(selected->get_name()); it != optimizer_flags.end()) it->second->resolve_defaults();
    } catch (const Error& e) {
      err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
      return exit_code_for(e.kind());
    }
    // Unset string options are left out so the output loads back via --config.
    std::istringstream lines(selected->config_to_str(true, false));
    out << "[" << selected->get_name() << "]\n";
    for (std::string line; std::getline(lines, line);)
      if (line.size() < 3 || line.compare(line.size() - 3, 3, "=\"\"") != 0) out << line << "\n";
    return 0;
  }
  try {
    return action ? action() : static_cast<int>(kExitUsage);
  } catch (const BackendLoadError& e) {
    err << "error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed JSON: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace tokopt
