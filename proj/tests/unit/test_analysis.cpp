#include "helpers.hpp"

#include "tokopt/analysis.hpp"
#include "tokopt/edit.hpp"
#include "tokopt/error.hpp"
#include "tokopt/eval.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

using namespace tokopt;
using namespace tokopt::test;

namespace {

struct Planted {
  std::vector<TokenSequence> tokens;
  ClassPartition partition;
};

// `classes` × `per_class` sequences; position `informative` carries a class
// token with probability `signal`, everything else is uniform.
Planted planted_tokens(std::uint64_t seed, int classes, int per_class, int k, int codebook, int informative,
                       double signal) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Planted p;
  for (int c = 0; c < classes; ++c) p.partition.prompts.push_back("class-" + std::to_string(c));
  for (int c = 0; c < classes; ++c)
    for (int i = 0; i < per_class; ++i) {
      TokenSequence t{std::vector<int>(k), codebook};
      for (int j = 0; j < k; ++j) t.indices[j] = static_cast<int>(uniform_index(rng, codebook));
      if (u(rng) < signal) t.indices[informative] = (c * 7) % codebook;
      p.tokens.push_back(t);
      p.partition.assignment.push_back(c);
    }
  return p;
}

// Largest eigenvalue of a symmetric PSD matrix by power iteration.
double power_iteration(const Eigen::MatrixXd& m) {
  Eigen::VectorXd v = Eigen::VectorXd::LinSpaced(m.rows(), 1.0, 2.0).normalized();
  double lambda = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const Eigen::VectorXd w = m * v;
    const double n = w.norm();
    if (n == 0.0) return 0.0;
    lambda = v.dot(w);
    v = w / n;
  }
  return lambda;
}

// Ranks with ties averaged, 1-based.
std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = (i + j) / 2.0 + 1.0;
    i = j + 1;
  }
  return ranks;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("token stats are sample means and unbiased covariances") {
  const auto tok = toy_tokenizer(1);
  const Planted p = planted_tokens(3, 2, 5, 8, 64, 2, 1.0);
  std::vector<LatentFeatures> f;
  for (const auto& t : p.tokens) f.push_back(lookup(t, tok->codebook()));
  const TokenClassStats stats = fit_token_stats(f, p.partition);
  REQUIRE(stats.num_classes() == 2);
  CHECK(stats.counts == std::vector<int>{5, 5});
  // Class 1, position 4, written out directly.
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(4);
  for (int i = 5; i < 10; ++i) mean += f[i].values.row(4).transpose();
  mean /= 5.0;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(4, 4);
  for (int i = 5; i < 10; ++i) {
    const Eigen::VectorXd d = f[i].values.row(4).transpose() - mean;
    cov += d * d.transpose();
  }
  cov /= 4.0;
  CHECK(stats.means[1].row(4).transpose().isApprox(mean, 1e-12));
  CHECK(stats.covariances[1][4].isApprox(cov, 1e-12));
}

TEST_CASE("a class with one member is degenerate") {
  const auto tok = toy_tokenizer(1);
  Planted p = planted_tokens(3, 2, 3, 8, 64, 2, 1.0);
  p.partition.assignment = {0, 0, 0, 0, 0, 1};
  std::vector<LatentFeatures> f;
  for (const auto& t : p.tokens) f.push_back(lookup(t, tok->codebook()));
  try {
    fit_token_stats(f, p.partition);
    FAIL("expected degenerate class");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDegenerateClass);
    CHECK(std::string(e.what()).find("class-1") != std::string::npos);
  }
  p.partition.assignment = {0, 0, 0, 0, 0, 2};
  CHECK_THROWS_AS(fit_token_stats(f, p.partition), Error);
}

TEST_CASE("importance equals the spectral norm of the class-mean covariance") {
  const auto tok = toy_tokenizer(2);
  const Planted p = planted_tokens(8, 4, 6, 8, 64, 5, 0.9);
  std::vector<LatentFeatures> f;
  for (const auto& t : p.tokens) f.push_back(lookup(t, tok->codebook()));
  const TokenClassStats stats = fit_token_stats(f, p.partition);
  const ImportanceProfile profile = importance_profile(stats);
  for (int k = 0; k < 8; ++k) {
    Eigen::MatrixXd means(4, 4);
    for (int c = 0; c < 4; ++c) means.row(c) = stats.means[c].row(k);
    const Eigen::MatrixXd centred = means.rowwise() - means.colwise().mean();
    const Eigen::MatrixXd cov = centred.transpose() * centred / 3.0;
    CHECK(profile.raw(k) == doctest::Approx(power_iteration(cov)).epsilon(1e-8));
  }
  CHECK(profile.argmax() == 5);
  CHECK(profile.normalized.maxCoeff() == doctest::Approx(1.0));
  CHECK_FALSE(profile.all_zero);
  const std::string csv = profile.to_csv();
  CHECK(csv.rfind("position,value,normalized\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
}

TEST_CASE("identical class means give an all-zero profile") {
  const auto tok = toy_tokenizer(2);
  ClassPartition partition{"same", {"a", "b"}, {0, 0, 1, 1}};
  const TokenSequence t1 = random_tokens(1, 8, 64), t2 = random_tokens(2, 8, 64);
  std::vector<LatentFeatures> f{lookup(t1, tok->codebook()), lookup(t2, tok->codebook()),
                                lookup(t1, tok->codebook()), lookup(t2, tok->codebook())};
  const ImportanceProfile profile = importance_profile(fit_token_stats(f, partition));
  CHECK(profile.all_zero);
  CHECK(profile.normalized.isZero());
}

TEST_CASE("class partitions serialise and validate") {
  const ClassPartition p{"p", {"day", "night"}, {0, 1, 1}};
  const ClassPartition back = ClassPartition::from_json(p.to_json());
  CHECK(back.prompts == p.prompts);
  CHECK(back.assignment == p.assignment);
  CHECK_THROWS_AS(ClassPartition::from_json({{"id", "x"}, {"prompts", {"a"}}, {"assignment", {0}}}), Error);
  CHECK_THROWS_AS(ClassPartition::from_json({{"id", "x"}, {"prompts", {"a", "b"}}, {"assignment", {2}}}), Error);
}

TEST_CASE("assign_classes picks the most similar prompt") {
  const auto scorer = std::make_shared<ToyScorer>(4);
  std::vector<ImageTensor> images;
  for (int axis : {0, 3, 0, 3, 3}) {
    Eigen::VectorXd dir = Eigen::VectorXd::Zero(16);
    dir(axis) = 1.0;
    images.push_back(scorer->image_for_embedding(dir, 0.5));
  }
  const ClassPartition p = assign_classes(images, {"axis-0", "axis-3"}, *scorer, "ids");
  CHECK(p.assignment == std::vector<int>{0, 1, 0, 1, 1});
}

TEST_CASE("single token search equals an exhaustive loop") {
  const auto tok = toy_tokenizer(5, 32);
  for (std::uint64_t s = 0; s < 4; ++s) {
    const ImageTensor image = random_image(100 + s);
    const int position = static_cast<int>(s * 2);
    const TokenSearchResult r = single_token_search(image, position, *tok, mean_abs_difference, 2);
    const TokenSequence original = tok->tokenize(image);
    int best = -1;
    double best_score = -1.0;
    for (int v = 0; v < 32; ++v) {
      TokenSequence t = original;
      t.indices[position] = v;
      const double score = mean_abs_difference(tok->decode_tokens(t), image);
      if (score > best_score) {
        best_score = score;
        best = v;
      }
    }
    CHECK(r.best_index == best);
    CHECK(r.score == best_score);
    CHECK(r.edited_tokens.indices[position] == best);
    CHECK(r.edited_image == tok->decode_tokens(r.edited_tokens));
    TokenSequence same = original;
    CHECK(r.score >= mean_abs_difference(tok->decode_tokens(same), image));
  }
}

TEST_CASE("single token search edge cases") {
  const auto one = toy_tokenizer(1, 1);
  const ImageTensor image = random_image(1);
  auto constant = [](const ImageTensor&, const ImageTensor&) { return 1.0; };
  CHECK(single_token_search(image, 0, *one, constant).best_index == 0);
  CHECK(single_token_search(image, 0, *toy_tokenizer(1, 16), constant).best_index == 0);  // ties -> lowest
  CHECK_THROWS_AS(single_token_search(image, 8, *one), Error);
  CHECK_THROWS_AS(single_token_search(image, -1, *one), Error);
}

TEST_CASE("per-token probe finds the informative position") {
  const Planted train = planted_tokens(1, 3, 40, 8, 16, 6, 1.0);
  const Planted val = planted_tokens(2, 3, 20, 8, 16, 6, 1.0);
  const LabeledTokens tr{train.tokens, train.partition.assignment};
  const LabeledTokens va{val.tokens, val.partition.assignment};
  CHECK(per_token_probe(tr, va, 6, 3) == 1.0);
  CHECK(per_token_probe(tr, va, 2, 3) < 0.7);
  CHECK_THROWS_AS(per_token_probe(tr, va, 8, 3), Error);
  LabeledTokens bad = va;
  bad.labels[0] = 5;
  CHECK_THROWS_AS(per_token_probe(tr, bad, 1, 3), Error);
}

TEST_CASE("masking probe removes the informative position last") {
  const auto tok = toy_tokenizer(3, 16);
  const Planted train = planted_tokens(1, 3, 30, 8, 16, 4, 1.0);
  const Planted val = planted_tokens(2, 3, 15, 8, 16, 4, 1.0);
  MaskingProbeConfig cfg;
  cfg.num_classes = 3;
  cfg.epochs = 20;
  for (bool discrete : {true, false}) {
    ProbeData tr, va;
    tr.labels = train.partition.assignment;
    va.labels = val.partition.assignment;
    if (discrete) {
      tr.tokens = train.tokens;
      va.tokens = val.tokens;
    } else {
      for (const auto& t : train.tokens) tr.features.push_back(lookup(t, tok->codebook()));
      for (const auto& t : val.tokens) va.features.push_back(lookup(t, tok->codebook()));
    }
    const MaskingProbeResult r = iterative_masking_probe(tr, va, cfg);
    REQUIRE(r.removal_order.size() == 8);
    CHECK(r.removal_order.back() == 4);
    CHECK(std::set<int>(r.removal_order.begin(), r.removal_order.end()).size() == 8);
    CHECK(r.accuracy_trace.front() > 0.9);
    CHECK(r.to_csv().rfind("step,position,value\n", 0) == 0);
    // Same seed, same result.
    CHECK(iterative_masking_probe(tr, va, cfg).removal_order == r.removal_order);
  }
}

TEST_CASE("replace_tokens algebra") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const TokenSequence a = random_tokens(rng(), 32, 4096), b = random_tokens(rng(), 32, 4096),
                        c = random_tokens(rng(), 32, 4096);
    std::vector<int> p, q;
    for (int k = 0; k < 32; ++k) {
      const auto r = uniform_index(rng, 3);
      if (r == 0) p.push_back(k);
      if (r == 1) q.push_back(k);
    }
    const TokenSequence once = replace_tokens(a, b, p);
    CHECK(replace_tokens(once, b, p) == once);
    std::vector<int> pq = p;
    pq.insert(pq.end(), q.begin(), q.end());
    CHECK(replace_tokens(replace_tokens(a, b, p), c, q) == replace_tokens(replace_tokens(a, c, q), b, p));
    CHECK(replace_tokens(a, b, std::vector<int>{}) == a);
    std::vector<int> all(32);
    for (int k = 0; k < 32; ++k) all[k] = k;
    CHECK(replace_tokens(a, b, all) == b);
    CHECK(replace_tokens(a, b, pq) == replace_tokens(replace_tokens(a, b, p), b, q));
  }
  CHECK_THROWS_AS(replace_tokens(random_tokens(1, 8, 64), random_tokens(1, 7, 64), std::vector<int>{}), Error);
  CHECK_THROWS_AS(replace_tokens(random_tokens(1, 8, 64), random_tokens(1, 8, 32), std::vector<int>{}), Error);
  CHECK_THROWS_AS(replace_tokens(random_tokens(1, 8, 64), random_tokens(2, 8, 64), std::vector<int>{8}), Error);
}

TEST_CASE("copy-paste edits and recipes") {
  const auto tok = toy_tokenizer(1);
  const ImageTensor target = toy_image(*tok, 1), ref = toy_image(*tok, 2);
  const std::vector<int> positions{1, 6};
  const ImageTensor out = copy_paste_edit(target, ref, positions, *tok);
  CHECK(out == tok->decode_tokens(replace_tokens(tok->tokenize(target), tok->tokenize(ref), positions)));
  const TokenSequence t = tok->tokenize(target);
  const std::vector<EditRecipe> recipes{{{1}, tok->tokenize(ref), "one"}, {{6}, tok->tokenize(ref), std::nullopt}};
  CHECK(apply_recipes(t, recipes) == tok->tokenize(out));
}

TEST_CASE("edit presets") {
  CHECK(preset_positions("background-blur") == std::vector<int>{18});
  CHECK(preset_positions("scene-lighting") == std::vector<int>{31});
  CHECK(preset_positions("sharpening") == std::vector<int>{12});
  CHECK(preset_positions("colorization") == std::vector<int>{12, 24, 27});
  CHECK_FALSE(preset("pose").reliable);
  CHECK(all_presets().size() == 5);
  for (const auto& p : all_presets()) CHECK(p.variant == "VQ-LL-32");
  try {
    preset("nope");
    FAIL("expected unknown preset");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInvalidInput);
    CHECK(std::string(e.what()).find("background-blur") != std::string::npos);
  }
}

TEST_CASE("spearman helper") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(average_ranks({5, 1, 5, 2}) == std::vector<double>{3.5, 1, 3.5, 2});
}

TEST_CASE("per-token probe accuracies rank-correlate with the importance profile") {
  const auto tok = toy_tokenizer(2);
  const auto scorer = toy_scorer(2);
  // First half of each sequence is the class prototype, second half is random.
  const ToyDataset data = make_toy_dataset(*tok, *scorer, 4, 30, 5);
  LabeledTokens train, val;
  std::vector<LatentFeatures> features;
  ClassPartition partition;
  partition.prompts = data.images.class_names;
  for (std::size_t i = 0; i < data.images.images.size(); ++i) {
    const auto& img = data.images.images[i];
    const TokenSequence t = tok->tokenize(img.image);
    features.push_back(lookup(t, tok->codebook()));
    partition.assignment.push_back(img.label);
    LabeledTokens& split = (i % 3 == 0) ? val : train;
    split.tokens.push_back(t);
    split.labels.push_back(img.label);
  }
  const ImportanceProfile profile = importance_profile(fit_token_stats(features, partition));
  std::vector<double> importance(profile.raw.data(), profile.raw.data() + profile.raw.size());
  std::vector<double> accuracy;
  for (int k = 0; k < tok->num_tokens(); ++k) accuracy.push_back(per_token_probe(train, val, k, 4));
  CHECK(spearman(importance, accuracy) > 0.5);
}

TEST_CASE("masking probe keeps the two most informative of four planted positions") {
  // Four positions carry the class token with decreasing probability. No single
  // position saturates accuracy, so the ranking below the top one is observable.
  const std::vector<double> signal{0.8, 0.6, 0.4, 0.2};
  const int k = 8, codebook = 16, classes = 4;
  int hits = 0;
  const int runs = 20;
  for (int run = 0; run < runs; ++run) {
    Rng rng(derive_seed(77, "planted-ranking", run));
    std::vector<int> positions(k);
    std::iota(positions.begin(), positions.end(), 0);
    std::shuffle(positions.begin(), positions.end(), rng);
    positions.resize(signal.size());
    auto make = [&](int per_class) {
      ProbeData d;
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (int c = 0; c < classes; ++c)
        for (int i = 0; i < per_class; ++i) {
          TokenSequence t{std::vector<int>(k), codebook};
          for (int& x : t.indices) x = static_cast<int>(uniform_index(rng, codebook));
          for (std::size_t j = 0; j < signal.size(); ++j)
            if (u(rng) < signal[j]) t.indices[positions[j]] = (c * 5 + static_cast<int>(j)) % codebook;
          d.tokens.push_back(t);
          d.labels.push_back(c);
        }
      return d;
    };
    const ProbeData train = make(200);
    const ProbeData val = make(100);
    MaskingProbeConfig cfg;
    cfg.num_classes = classes;
    cfg.epochs = 20;
    cfg.seed = static_cast<std::uint64_t>(run);
    const MaskingProbeResult r = iterative_masking_probe(train, val, cfg);
    REQUIRE(r.removal_order.size() == static_cast<std::size_t>(k));
    const std::set<int> last_two{r.removal_order[k - 1], r.removal_order[k - 2]};
    if (last_two == std::set<int>{positions[0], positions[1]}) ++hits;
  }
  MESSAGE("planted ranking recovered in " << hits << "/" << runs << " runs");
  CHECK(hits >= runs * 9 / 10);
}

TEST_CASE("importance profile symmetries") {
  const auto tok = toy_tokenizer(4);
  const Planted p = planted_tokens(9, 3, 6, 8, 64, 2, 0.8);
  std::vector<LatentFeatures> features;
  for (const auto& t : p.tokens) features.push_back(lookup(t, tok->codebook()));
  const ImportanceProfile base = importance_profile(fit_token_stats(features, p.partition));
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    // Permuting positions permutes the profile.
    std::vector<int> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<LatentFeatures> permuted = features;
    for (std::size_t i = 0; i < features.size(); ++i)
      for (int k = 0; k < 8; ++k) permuted[i].values.row(k) = features[i].values.row(perm[k]);
    const ImportanceProfile pp = importance_profile(fit_token_stats(permuted, p.partition));
    for (int k = 0; k < 8; ++k) CHECK(pp.raw[k] == doctest::Approx(base.raw[perm[k]]).epsilon(1e-12));

    // Relabelling classes leaves it unchanged.
    std::vector<int> relabel{0, 1, 2};
    std::shuffle(relabel.begin(), relabel.end(), rng);
    ClassPartition renamed = p.partition;
    for (int& a : renamed.assignment) a = relabel[a];
    const ImportanceProfile rp = importance_profile(fit_token_stats(features, renamed));
    for (int k = 0; k < 8; ++k) CHECK(rp.raw[k] == doctest::Approx(base.raw[k]).epsilon(1e-12));

    // Scaling features by s scales raw by s².
    const double s = 0.25 + 3.0 * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    std::vector<LatentFeatures> scaled = features;
    for (auto& f : scaled) f.values *= s;
    const ImportanceProfile sp = importance_profile(fit_token_stats(scaled, p.partition));
    for (int k = 0; k < 8; ++k) {
      CHECK(sp.raw[k] == doctest::Approx(s * s * base.raw[k]).epsilon(1e-9));
      CHECK(sp.normalized[k] == doctest::Approx(base.normalized[k]).epsilon(1e-9));
    }
  }
}

TEST_CASE("single token search never scores below the original token") {
  const auto tok = toy_tokenizer(6, 32);
  for (std::uint64_t s = 0; s < 6; ++s) {
    const ImageTensor image = random_image(300 + s);
    const int position = static_cast<int>(s % 8);
    const TokenSearchResult r = single_token_search(image, position, *tok);
    const double original = mean_abs_difference(tok->decode_tokens(tok->tokenize(image)), image);
    CHECK(r.score >= original);
  }
}

TEST_CASE("replace_tokens only produces values from its inputs") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const TokenSequence a = random_tokens(rng(), 16, 256), b = random_tokens(rng(), 16, 256);
    std::vector<int> p;
    for (int k = 0; k < 16; ++k)
      if (uniform_index(rng, 2) == 0) p.push_back(k);
    const TokenSequence out = replace_tokens(a, b, p);
    for (int k = 0; k < 16; ++k) {
      const bool chosen = std::find(p.begin(), p.end(), k) != p.end();
      CHECK(out.indices[k] == (chosen ? b.indices[k] : a.indices[k]));
    }
  }
}
