#include "helpers.hpp"

#include "tokopt/error.hpp"
#include "tokopt/metrics.hpp"
#include "tokopt/objectives.hpp"

#include <doctest.h>

using namespace tokopt;
using namespace tokopt::test;

namespace {

Eigen::MatrixXd random_spd(std::uint64_t seed, int d) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = n(rng);
  return a * a.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

Eigen::VectorXd random_vec(std::uint64_t seed, int d) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd v(d);
  for (int i = 0; i < d; ++i) v(i) = n(rng);
  return v;
}

}  // namespace

TEST_CASE("feature stats from rows") {
  Eigen::MatrixXd rows(3, 2);
  rows << 1, 2, 3, 4, 5, 9;
  const FeatureStats s = FeatureStats::from_rows(rows);
  CHECK(s.count == 3);
  CHECK(s.mean(0) == doctest::Approx(3.0));
  CHECK(s.mean(1) == doctest::Approx(5.0));
  // Unbiased: var of {1,3,5} is 4, cov with {2,4,9} is (−2·−3 + 0 + 2·4)/2 = 7.
  CHECK(s.covariance(0, 0) == doctest::Approx(4.0));
  CHECK(s.covariance(0, 1) == doctest::Approx(7.0));
  CHECK_THROWS_AS(FeatureStats::from_rows(Eigen::MatrixXd::Ones(1, 2)), Error);
}

TEST_CASE("fid of identical statistics is zero") {
  for (int d : {4, 64}) {
    const FeatureStats a{random_vec(d, d), random_spd(d + 1, d), 100};
    CHECK(std::abs(fid(a, a)) <= 1e-6);
  }
}

TEST_CASE("fid with equal covariances is the squared mean distance") {
  for (int d : {4, 64}) {
    const Eigen::MatrixXd cov = random_spd(7, d);
    const Eigen::VectorXd mu = random_vec(9, d);
    const FeatureStats a{Eigen::VectorXd::Zero(d), cov, 100}, b{mu, cov, 100};
    CHECK(fid(a, b) == doctest::Approx(mu.squaredNorm()).epsilon(1e-3));
  }
}

TEST_CASE("fid of diagonal covariances has a per-coordinate closed form") {
  const int d = 6;
  Eigen::VectorXd va(d), vb(d);
  va << 1, 2, 3, 0.5, 4, 0.1;
  vb << 2, 2, 1, 0.25, 9, 1.0;
  const Eigen::VectorXd ma = random_vec(1, d), mb = random_vec(2, d);
  double expected = (ma - mb).squaredNorm();
  for (int i = 0; i < d; ++i) expected += std::pow(std::sqrt(va(i)) - std::sqrt(vb(i)), 2);
  const FeatureStats a{ma, va.asDiagonal(), 10}, b{mb, vb.asDiagonal(), 10};
  CHECK(fid(a, b) == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("fid is symmetric") {
  for (int d : {4, 64}) {
    const FeatureStats a{random_vec(3, d), random_spd(4, d), 50}, b{random_vec(5, d), random_spd(6, d), 50};
    CHECK(std::abs(fid(a, b) - fid(b, a)) <= 1e-6);
  }
}

TEST_CASE("fid rejects indefinite covariances and dimension mismatch") {
  Eigen::MatrixXd bad = Eigen::MatrixXd::Identity(3, 3);
  bad(2, 2) = -0.5;
  const FeatureStats a{Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3), 5};
  const FeatureStats b{Eigen::VectorXd::Zero(3), bad, 5};
  try {
    fid(a, b);
    FAIL("expected numerical error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kNumerical);
  }
  const FeatureStats c{Eigen::VectorXd::Zero(4), Eigen::MatrixXd::Identity(4, 4), 5};
  CHECK_THROWS_AS(fid(a, c), Error);
}

TEST_CASE("inception score of uniform posteriors is one") {
  const Eigen::MatrixXd uniform = Eigen::MatrixXd::Constant(40, 5, 0.2);
  const InceptionScore s = inception_score(uniform, 4);
  CHECK(std::abs(s.mean - 1.0) <= 1e-9);
  CHECK(s.std <= 1e-9);
  CHECK(s.splits == 4);
}

TEST_CASE("inception score of two balanced one-hot classes is two") {
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(40, 2);
  for (int i = 0; i < 40; ++i) p(i, i % 2) = 1.0;
  CHECK(std::abs(inception_score(p, 1).mean - 2.0) <= 1e-9);
  CHECK(std::abs(inception_score(p, 10).mean - 2.0) <= 1e-9);
}

TEST_CASE("inception score input validation") {
  CHECK_THROWS_AS(inception_score(Eigen::MatrixXd::Constant(3, 2, 0.7)), Error);
  CHECK_THROWS_AS(inception_score(Eigen::MatrixXd(0, 2)), Error);
  CHECK_THROWS_AS(inception_score(Eigen::MatrixXd::Constant(3, 2, 0.5), 0), Error);
  CHECK(inception_score(Eigen::MatrixXd::Constant(3, 2, 0.5), 10).splits == 3);
}

TEST_CASE("alignment scores skip missing samples and flag partial") {
  const auto scorer = toy_scorer(1);
  const std::vector<std::optional<ImageTensor>> samples{random_image(1), std::nullopt, random_image(2)};
  const std::vector<std::string> prompts{"a", "b", "c"};
  const AlignmentScore s = prompt_alignment_scores(samples, prompts, *scorer);
  CHECK(s.scored == 2);
  CHECK(s.missing == 1);
  CHECK(s.partial);
  const double expected = (scorer->alignment_score(embed_whole_image(*scorer, *samples[0]), scorer->embed_text("a")) +
                           scorer->alignment_score(embed_whole_image(*scorer, *samples[2]), scorer->embed_text("c"))) /
                          2.0;
  CHECK(s.mean == doctest::Approx(expected));
  CHECK_THROWS_AS(prompt_alignment_scores(samples, std::vector<std::string>{"a"}, *scorer), Error);
}

TEST_CASE("inception score is at least one") {
  Rng rng(17);
  std::gamma_distribution<double> g(0.5, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 4 + static_cast<int>(uniform_index(rng, 60));
    const int classes = 2 + static_cast<int>(uniform_index(rng, 9));
    Eigen::MatrixXd p(n, classes);
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < classes; ++c) p(i, c) = g(rng) + 1e-12;
      p.row(i) /= p.row(i).sum();
    }
    CHECK(inception_score(p, 1 + static_cast<int>(uniform_index(rng, 4))).mean >= 1.0 - 1e-12);
  }
  for (int classes : {3, 5, 10}) {
    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(10 * classes, classes);
    for (int i = 0; i < onehot.rows(); ++i) onehot(i, i % classes) = 1.0;
    CHECK(std::abs(inception_score(onehot, 1).mean - classes) <= 1e-9);
  }
}
