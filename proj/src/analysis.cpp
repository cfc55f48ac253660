#include "tokopt/analysis.hpp"

#include "tokopt/error.hpp"
#include "tokopt/objectives.hpp"
#include "tokopt/parallel.hpp"
#include "tokopt/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace tokopt {

nlohmann::json ClassPartition::to_json() const {
  return {{"id", id}, {"prompts", prompts}, {"assignment", assignment}};
}

ClassPartition ClassPartition::from_json(const nlohmann::json& doc) {
  ClassPartition p;
  try {
    p.id = doc.value("id", "");
    p.prompts = doc.at("prompts").get<std::vector<std::string>>();
    p.assignment = doc.at("assignment").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidInput, std::string("partition document: ") + e.what());
  }
  require(p.num_classes() >= 2, ErrorKind::kInvalidInput, "partition needs at least 2 classes");
  for (int label : p.assignment) {
    require(label >= 0 && label < p.num_classes(), ErrorKind::kInvalidInput,
            "partition label " + std::to_string(label) + " out of range");
  }
  return p;
}

ClassPartition assign_classes(std::span<const ImageTensor> images,
                              const std::vector<std::string>& prompts, const ScorerBackend& scorer,
                              std::string id) {
  require(prompts.size() >= 2, ErrorKind::kInvalidInput, "assign_classes needs at least 2 prompts");
  require(!images.empty(), ErrorKind::kInvalidInput, "assign_classes: empty image set");
  std::vector<Eigen::VectorXd> text;
  text.reserve(prompts.size());
  for (const auto& p : prompts) text.push_back(scorer.embed_text(p));

  ClassPartition partition{std::move(id), prompts, {}};
  partition.assignment.reserve(images.size());
  for (const auto& image : images) {
    const Eigen::VectorXd emb = embed_whole_image(scorer, image);
    int best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < text.size(); ++j) {
      const double s = cosine_similarity(emb, text[j]);
      if (s > best_sim) {
        best_sim = s;
        best = static_cast<int>(j);
      }
    }
    partition.assignment.push_back(best);
  }
  return partition;
}

TokenClassStats fit_token_stats(std::span<const LatentFeatures> token_features,
                                const ClassPartition& partition) {
  require(!token_features.empty(), ErrorKind::kInvalidInput, "fit_token_stats: empty dataset");
  require(token_features.size() == partition.assignment.size(), ErrorKind::kInvalidInput,
          "fit_token_stats: " + std::to_string(token_features.size()) + " samples but " +
              std::to_string(partition.assignment.size()) + " labels");
  const int n_classes = partition.num_classes();
  const int K = token_features.front().tokens();
  const int D = token_features.front().dim();

  TokenClassStats stats;
  stats.num_tokens = K;
  stats.dim = D;
  stats.counts.assign(n_classes, 0);
  for (std::size_t i = 0; i < token_features.size(); ++i) {
    require(token_features[i].tokens() == K && token_features[i].dim() == D,
            ErrorKind::kInvalidInput, "fit_token_stats: inconsistent feature shapes");
    ++stats.counts[partition.assignment[i]];
  }
  for (int j = 0; j < n_classes; ++j) {
    if (stats.counts[j] < 2) {
      fail(ErrorKind::kDegenerateClass, "class " + std::to_string(j) + " ('" +
                                            partition.prompts[j] + "') has " +
                                            std::to_string(stats.counts[j]) +
                                            " member(s); at least 2 are required");
    }
  }

  stats.means.assign(n_classes, Eigen::MatrixXd::Zero(K, D));
  for (std::size_t i = 0; i < token_features.size(); ++i) {
    stats.means[partition.assignment[i]] += token_features[i].values;
  }
  for (int j = 0; j < n_classes; ++j) stats.means[j] /= stats.counts[j];

  stats.covariances.assign(n_classes, std::vector<Eigen::MatrixXd>(K, Eigen::MatrixXd::Zero(D, D)));
  for (std::size_t i = 0; i < token_features.size(); ++i) {
    const int j = partition.assignment[i];
    for (int k = 0; k < K; ++k) {
      const Eigen::RowVectorXd centred = token_features[i].values.row(k) - stats.means[j].row(k);
      stats.covariances[j][k] += centred.transpose() * centred;
    }
  }
  for (int j = 0; j < n_classes; ++j)
    for (int k = 0; k < K; ++k) stats.covariances[j][k] /= (stats.counts[j] - 1);
  return stats;
}

int ImportanceProfile::argmax() const {
  int best = 0;
  for (int k = 1; k < raw.size(); ++k)
    if (raw[k] > raw[best]) best = k;
  return best;
}

nlohmann::json ImportanceProfile::to_json() const {
  return {{"raw", std::vector<double>(raw.data(), raw.data() + raw.size())},
          {"normalized", std::vector<double>(normalized.data(), normalized.data() + normalized.size())},
          {"all_zero", all_zero},
          {"argmax", argmax()}};
}

std::string ImportanceProfile::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "position,value,normalized\n";
  for (int k = 0; k < raw.size(); ++k) out << k << "," << raw[k] << "," << normalized[k] << "\n";
  return out.str();
}

ImportanceProfile importance_profile(const TokenClassStats& stats) {
  const int n = stats.num_classes();
  require(n >= 2, ErrorKind::kInvalidInput, "importance_profile needs at least 2 classes");
  ImportanceProfile profile;
  profile.raw.resize(stats.num_tokens);
  for (int k = 0; k < stats.num_tokens; ++k) {
    Eigen::MatrixXd class_means(n, stats.dim);
    for (int j = 0; j < n; ++j) class_means.row(j) = stats.means[j].row(k);
    const Eigen::RowVectorXd centre = class_means.colwise().mean();
    const Eigen::MatrixXd centred = class_means.rowwise() - centre;
    const Eigen::MatrixXd cov = centred.transpose() * centred / (n - 1);
    // Symmetric PSD: the spectral norm is the largest eigenvalue.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov, Eigen::EigenvaluesOnly);
    profile.raw[k] = std::max(0.0, eig.eigenvalues().maxCoeff());
  }
  const double peak = profile.raw.maxCoeff();
  profile.all_zero = !(peak > 0.0);
  profile.normalized =
      profile.all_zero ? Eigen::VectorXd::Zero(stats.num_tokens) : Eigen::VectorXd(profile.raw / peak);
  return profile;
}

TokenSearchResult single_token_search(const ImageTensor& image, int position,
                                      const TokenizerBackend& backend,
                                      const ImageCriterion& criterion, int workers) {
  require(position >= 0 && position < backend.num_tokens(), ErrorKind::kInvalidInput,
          "single_token_search: position " + std::to_string(position) + " outside [0, " +
              std::to_string(backend.num_tokens() - 1) + "]");
  const TokenSequence base = backend.tokenize(image);
  const int n = backend.codebook().size();
  std::vector<double> scores(n);
  parallel_for(static_cast<std::size_t>(n), workers, [&](std::size_t v) {
    TokenSequence candidate = base;
    candidate.indices[position] = static_cast<int>(v);
    scores[v] = criterion(backend.decode_tokens(candidate), image);
  });
  TokenSearchResult result;
  result.best_index = 0;
  result.score = scores[0];
  for (int v = 1; v < n; ++v) {
    if (scores[v] > result.score) {
      result.score = scores[v];
      result.best_index = v;
    }
  }
  result.edited_tokens = base;
  result.edited_tokens.indices[position] = result.best_index;
  result.edited_image = backend.decode_tokens(result.edited_tokens);
  return result;
}

// --- probes -----------------------------------------------------------------

double per_token_probe(const LabeledTokens& train, const LabeledTokens& val, int position,
                       int num_classes, double smoothing) {
  require(!train.tokens.empty() && !val.tokens.empty(), ErrorKind::kInvalidInput,
          "per_token_probe: empty train or validation split");
  require(train.tokens.size() == train.labels.size() && val.tokens.size() == val.labels.size(),
          ErrorKind::kInvalidInput, "per_token_probe: tokens/labels size mismatch");
  require(num_classes >= 1, ErrorKind::kInvalidInput, "per_token_probe: num_classes must be >= 1");
  const int vocab = train.tokens.front().codebook_size;
  require(position >= 0 && position < train.tokens.front().length(), ErrorKind::kInvalidInput,
          "per_token_probe: position out of range");

  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(vocab, num_classes);
  Eigen::VectorXd prior = Eigen::VectorXd::Zero(num_classes);
  for (std::size_t i = 0; i < train.tokens.size(); ++i) {
    const int label = train.labels[i];
    require(label >= 0 && label < num_classes, ErrorKind::kInvalidInput,
            "per_token_probe: label out of range");
    counts(train.tokens[i].indices[position], label) += 1.0;
    prior[label] += 1.0;
  }
  prior /= prior.sum();

  std::vector<int> prediction(vocab);
  for (int v = 0; v < vocab; ++v) {
    int best = 0;
    double best_score = -1.0;
    for (int c = 0; c < num_classes; ++c) {
      const double s = counts(v, c) + smoothing * prior[c];
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    prediction[v] = best;
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < val.tokens.size(); ++i) {
    const int v = val.tokens[i].indices[position];
    require(v >= 0 && v < vocab, ErrorKind::kInvalidInput, "per_token_probe: token out of range");
    require(val.labels[i] >= 0 && val.labels[i] < num_classes, ErrorKind::kInvalidInput,
            "per_token_probe: label out of range");
    correct += prediction[v] == val.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(val.tokens.size());
}

std::string MaskingProbeResult::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "step,position,value\n";
  for (std::size_t i = 0; i < removal_order.size(); ++i)
    out << i << "," << removal_order[i] << "," << accuracy_trace[i] << "\n";
  return out.str();
}

namespace {

// Softmax head over K slots of width E. Discrete inputs read their slot from a
// learnable embedding table trained jointly with the head.
class LinearProbe {
 public:
  LinearProbe(const ProbeData& data, const MaskingProbeConfig& config, Rng& rng)
      : discrete_(data.discrete()),
        K_(discrete_ ? data.tokens.front().length() : data.features.front().tokens()),
        E_(discrete_ ? config.embed_dim : data.features.front().dim()),
        C_(config.num_classes) {
    std::normal_distribution<double> normal(0.0, 0.01);
    weight_ = Eigen::MatrixXd::NullaryExpr(C_, K_ * E_, [&] { return normal(rng); });
    bias_ = Eigen::VectorXd::Zero(C_);
    if (discrete_) {
      const int vocab = data.tokens.front().codebook_size;
      std::normal_distribution<double> emb(0.0, 1.0);
      table_ = Eigen::MatrixXd::NullaryExpr(vocab, E_, [&] { return emb(rng); });
    }
  }

  Eigen::VectorXd input(const ProbeData& data, std::size_t i, const std::vector<double>& slot_scale) const {
    Eigen::VectorXd x(K_ * E_);
    for (int k = 0; k < K_; ++k) {
      if (discrete_) {
        x.segment(k * E_, E_) = table_.row(data.tokens[i].indices[k]).transpose() * slot_scale[k];
      } else {
        x.segment(k * E_, E_) = data.features[i].values.row(k).transpose() * slot_scale[k];
      }
    }
    return x;
  }

  int predict(const Eigen::VectorXd& x) const {
    Eigen::Index best;
    (weight_ * x + bias_).maxCoeff(&best);
    return static_cast<int>(best);
  }

  void train(const ProbeData& data, const std::vector<bool>& removed,
             const MaskingProbeConfig& config, Rng& rng) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::bernoulli_distribution drop(config.position_dropout);
    const double keep_scale = 1.0 / (1.0 - config.position_dropout);
    const int batch = std::max(1, config.batch_size);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += batch) {
        const std::size_t end = std::min(order.size(), start + batch);
        Eigen::MatrixXd grad_w = Eigen::MatrixXd::Zero(C_, K_ * E_);
        Eigen::VectorXd grad_b = Eigen::VectorXd::Zero(C_);
        Eigen::MatrixXd grad_table;
        if (discrete_) grad_table = Eigen::MatrixXd::Zero(table_.rows(), E_);
        for (std::size_t b = start; b < end; ++b) {
          const std::size_t i = order[b];
          std::vector<double> scale(K_);
          for (int k = 0; k < K_; ++k) scale[k] = removed[k] ? 0.0 : (drop(rng) ? 0.0 : keep_scale);
          const Eigen::VectorXd x = input(data, i, scale);
          Eigen::VectorXd logits = weight_ * x + bias_;
          logits.array() -= logits.maxCoeff();
          Eigen::VectorXd p = logits.array().exp();
          p /= p.sum();
          p[data.labels[i]] -= 1.0;
          grad_w += p * x.transpose();
          grad_b += p;
          if (discrete_) {
            const Eigen::VectorXd gx = weight_.transpose() * p;
            for (int k = 0; k < K_; ++k) {
              if (scale[k] == 0.0) continue;
              grad_table.row(data.tokens[i].indices[k]) += gx.segment(k * E_, E_).transpose() * scale[k];
            }
          }
        }
        const double inv = 1.0 / static_cast<double>(end - start);
        weight_ -= config.learning_rate * (grad_w * inv + config.weight_decay * weight_);
        bias_ -= config.learning_rate * grad_b * inv;
        if (discrete_) table_ -= config.learning_rate * grad_table * inv;
      }
    }
  }

  double accuracy(const ProbeData& data, const std::vector<bool>& masked) const {
    std::vector<double> scale(K_);
    for (int k = 0; k < K_; ++k) scale[k] = masked[k] ? 0.0 : 1.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) correct += predict(input(data, i, scale)) == data.labels[i];
    return static_cast<double>(correct) / static_cast<double>(data.size());
  }

  int positions() const { return K_; }

 private:
  bool discrete_;
  int K_;
  int E_;
  int C_;
  Eigen::MatrixXd weight_;
  Eigen::VectorXd bias_;
  Eigen::MatrixXd table_;
};

void check_probe_data(const ProbeData& data, const char* split, int num_classes) {
  require(data.size() > 0, ErrorKind::kInvalidInput, std::string("masking probe: empty ") + split + " split");
  require((data.discrete() ? data.tokens.size() : data.features.size()) == data.labels.size(),
          ErrorKind::kInvalidInput, std::string("masking probe: ") + split + " inputs/labels size mismatch");
  for (int label : data.labels) {
    require(label >= 0 && label < num_classes, ErrorKind::kInvalidInput,
            std::string("masking probe: label out of range in ") + split + " split");
  }
}

}  // namespace

MaskingProbeResult iterative_masking_probe(const ProbeData& train, const ProbeData& val,
                                           const MaskingProbeConfig& config) {
  require(config.num_classes >= 2, ErrorKind::kInvalidInput, "masking probe: need >= 2 classes");
  require(config.position_dropout >= 0.0 && config.position_dropout < 1.0, ErrorKind::kInvalidInput,
          "masking probe: position_dropout must lie in [0,1)");
  check_probe_data(train, "train", config.num_classes);
  check_probe_data(val, "validation", config.num_classes);
  require(train.discrete() == val.discrete(), ErrorKind::kInvalidInput,
          "masking probe: train and validation must use the same input kind");

  Rng rng(derive_seed(config.seed, "masking-probe"));
  const int K = LinearProbe(train, config, rng).positions();
  std::vector<bool> removed(K, false);
  MaskingProbeResult result;
  for (int round = 0; round < K; ++round) {
    LinearProbe probe(train, config, rng);
    probe.train(train, removed, config, rng);
    result.accuracy_trace.push_back(probe.accuracy(val, removed));
    int choice = -1;
    double best = -1.0;
    for (int k = 0; k < K; ++k) {
      if (removed[k]) continue;
      std::vector<bool> masked = removed;
      masked[k] = true;
      const double acc = probe.accuracy(val, masked);
      if (acc > best) {
        best = acc;
        choice = k;
      }
    }
    removed[choice] = true;
    result.removal_order.push_back(choice);
  }
  return result;
}

}  // namespace tokopt
