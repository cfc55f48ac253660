#include "tokopt/metrics.hpp"

#include "tokopt/error.hpp"
#include "tokopt/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tokopt {

FeatureStats FeatureStats::from_rows(const Eigen::MatrixXd& rows) {
  require(rows.rows() >= 2, ErrorKind::kInvalidInput,
          "feature statistics need at least 2 samples, got " + std::to_string(rows.rows()));
  require(rows.allFinite(), ErrorKind::kNumerical, "feature statistics: non-finite features");
  FeatureStats stats;
  stats.count = static_cast<int>(rows.rows());
  stats.mean = rows.colwise().mean().transpose();
  const Eigen::MatrixXd centred = rows.rowwise() - stats.mean.transpose();
  stats.covariance = centred.transpose() * centred / static_cast<double>(rows.rows() - 1);
  return stats;
}

namespace {

Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> checked_eigen(const Eigen::MatrixXd& cov,
                                                            const char* which, double tolerance) {
  const Eigen::MatrixXd sym = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  require(eig.info() == Eigen::Success, ErrorKind::kNumerical,
          std::string("fid: eigendecomposition of ") + which + " covariance failed");
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (lo < -tolerance * std::max(1.0, std::abs(hi))) {
    std::ostringstream msg;
    msg << "fid: " << which << " covariance is not positive semi-definite (eigenvalues in [" << lo
        << ", " << hi << "])";
    fail(ErrorKind::kNumerical, msg.str());
  }
  return eig;
}

Eigen::MatrixXd psd_sqrt(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& eig) {
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double fid(const FeatureStats& a, const FeatureStats& b, double psd_tolerance) {
  const auto d = a.mean.size();
  require(d > 0 && b.mean.size() == d && a.covariance.rows() == d && a.covariance.cols() == d &&
              b.covariance.rows() == d && b.covariance.cols() == d,
          ErrorKind::kInvalidInput, "fid: feature dimensions differ");
  const auto eig_a = checked_eigen(a.covariance, "first", psd_tolerance);
  const auto eig_b = checked_eigen(b.covariance, "second", psd_tolerance);
  const Eigen::MatrixXd root_a = psd_sqrt(eig_a);
  const Eigen::MatrixXd inner = root_a * (0.5 * (b.covariance + b.covariance.transpose())) * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig_inner(0.5 * (inner + inner.transpose()),
                                                           Eigen::EigenvaluesOnly);
  require(eig_inner.info() == Eigen::Success, ErrorKind::kNumerical,
          "fid: eigendecomposition of the covariance product failed");
  const double trace_sqrt = eig_inner.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double trace_a = eig_a.eigenvalues().cwiseMax(0.0).sum();
  const double trace_b = eig_b.eigenvalues().cwiseMax(0.0).sum();
  const double value = (a.mean - b.mean).squaredNorm() + trace_a + trace_b - 2.0 * trace_sqrt;
  return std::max(0.0, value);
}

InceptionScore inception_score(const Eigen::MatrixXd& posteriors, int splits) {
  const auto n = posteriors.rows();
  require(n > 0 && posteriors.cols() > 0, ErrorKind::kInvalidInput,
          "inception_score: empty posterior matrix");
  require(splits >= 1, ErrorKind::kInvalidInput, "inception_score: splits must be >= 1");
  for (Eigen::Index i = 0; i < n; ++i) {
    const double sum = posteriors.row(i).sum();
    require(posteriors.row(i).minCoeff() >= 0.0 && std::abs(sum - 1.0) <= 1e-6,
            ErrorKind::kInvalidInput,
            "inception_score: row " + std::to_string(i) + " is not a probability vector (sum " +
                std::to_string(sum) + ")");
  }
  const int used = static_cast<int>(std::min<Eigen::Index>(splits, n));
  std::vector<double> scores;
  scores.reserve(used);
  for (int s = 0; s < used; ++s) {
    const Eigen::Index begin = s * n / used;
    const Eigen::Index end = (s + 1) * n / used;
    const Eigen::MatrixXd part = posteriors.middleRows(begin, end - begin);
    const Eigen::RowVectorXd marginal = part.colwise().mean();
    double kl_sum = 0.0;
    for (Eigen::Index i = 0; i < part.rows(); ++i) {
      for (Eigen::Index c = 0; c < part.cols(); ++c) {
        const double p = part(i, c);
        if (p > 0.0) kl_sum += p * (std::log(p) - std::log(marginal[c]));
      }
    }
    scores.push_back(std::exp(kl_sum / static_cast<double>(part.rows())));
  }
  InceptionScore result;
  result.splits = used;
  for (double s : scores) result.mean += s;
  result.mean /= used;
  double var = 0.0;
  for (double s : scores) var += (s - result.mean) * (s - result.mean);
  result.std = std::sqrt(var / used);
  return result;
}

AlignmentScore prompt_alignment_scores(std::span<const std::optional<ImageTensor>> samples,
                                       std::span<const std::string> prompts,
                                       const ScorerBackend& scorer) {
  require(samples.size() == prompts.size(), ErrorKind::kInvalidInput,
          "prompt_alignment_scores: " + std::to_string(samples.size()) + " samples but " +
              std::to_string(prompts.size()) + " prompts");
  AlignmentScore result;
  result.variant = scorer.variant();
  result.convention = scorer.score_convention();
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i]) {
      ++result.missing;
      continue;
    }
    total += scorer.alignment_score(embed_whole_image(scorer, *samples[i]),
                                    scorer.embed_text(prompts[i]));
    ++result.scored;
  }
  result.partial = result.missing > 0;
  result.mean = result.scored > 0 ? total / result.scored : 0.0;
  return result;
}

}  // namespace tokopt
