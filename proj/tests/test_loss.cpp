#include "oracles.hpp"
#include "support.hpp"

#include <codembed/loss.hpp>

#include <doctest.h>

#include <numeric>

using namespace codembed;
using testing::Mat;
using testing::nce_oracle;
using testing::random_matrix;

namespace {

Mat unit_rows(Mat m) {
  for (Index i = 0; i < m.rows(); ++i) m.row(i) /= m.row(i).norm();
  return m;
}

double loss_of(const Mat& S, double tau) {
  Tape<double> t(false);
  return info_nce(t.constant(S), tau).item();
}

double matryoshka_of(const Mat& q, const Mat& d, const LossConfig& cfg) {
  Tape<double> t(false);
  return matryoshka_loss(t.constant(q), t.constant(d), cfg).item();
}

/// Single-width term composed by hand: truncate, renormalize, cosine, oracle.
double width_term(const Mat& q, const Mat& d, int m, double tau, LossDirection dir) {
  const Mat qs = unit_rows(q.leftCols(m)), ds = unit_rows(d.leftCols(m));
  Mat S(q.rows(), d.rows());
  for (Index i = 0; i < S.rows(); ++i) {
    for (Index j = 0; j < S.cols(); ++j) S(i, j) = qs.row(i).dot(ds.row(j));
  }
  const double fwd = nce_oracle(S, tau);
  return dir == LossDirection::QueryToDoc ? fwd : 0.5 * (fwd + nce_oracle(S.transpose(), tau));
}

LossConfig config(std::vector<int> dims, std::vector<double> weights, double tau = 0.05) {
  LossConfig c;
  c.temperature = tau;
  c.matryoshka_dims = std::move(dims);
  c.matryoshka_weights = std::move(weights);
  return c;
}

}  // namespace

TEST_CASE("similarity matrix of unit rows is the cosine table") {
  Tape<double> t(false);
  const Mat I = Mat::Identity(3, 3);
  CHECK(similarity_matrix(t.constant(I), t.constant(I)).value() == I);

  std::mt19937_64 rng(1);
  const Mat q = unit_rows(random_matrix(5, 7, rng)), d = unit_rows(random_matrix(5, 7, rng));
  const Mat S = similarity_matrix(t.constant(q), t.constant(d)).value();
  for (Index i = 0; i < 5; ++i) {
    for (Index j = 0; j < 5; ++j) {
      double dot = 0, nq = 0, nd = 0;
      for (Index c = 0; c < 7; ++c) {
        dot += q(i, c) * d(j, c);
        nq += q(i, c) * q(i, c);
        nd += d(j, c) * d(j, c);
      }
      const double cosine = dot / std::sqrt(nq * nd);
      CHECK(std::abs(S(i, j) - cosine) <= 1e-6);
      CHECK(std::abs(S(i, j)) <= 1.0 + 1e-5);
    }
  }
  CHECK_THROWS_AS(similarity_matrix(t.constant(q), t.constant(Mat(d.leftCols(6)))), DimensionError);
}

TEST_CASE("info_nce on the two-pair identity case") {
  const double v = loss_of(Mat::Identity(2, 2), 1.0);
  CHECK(std::abs(v - 0.626523) <= 1e-5);
  CHECK(v == doctest::Approx(2 * std::log1p(std::exp(-1.0))).epsilon(1e-14));
}

TEST_CASE("info_nce with indistinguishable candidates is n log n") {
  for (double tau : {0.05, 0.5, 2.0}) {
    CHECK(loss_of(Mat::Constant(4, 4, 0.3), tau) == doctest::Approx(4 * std::log(4.0)).epsilon(1e-12));
  }
  CHECK(std::abs(4 * std::log(4.0) - 5.545) < 1e-3);
}

TEST_CASE("info_nce matches the log-sum-exp oracle on random matrices") {
  std::mt19937_64 rng(8);
  double worst = 0;
  for (double tau : {0.05, 0.5, 1.0}) {
    for (int trial = 0; trial < 100; ++trial) {
      const Mat S = random_matrix(8, 8, rng);
      worst = std::max(worst, testing::relative_error(loss_of(S, tau), nce_oracle(S, tau), 1e-300));
    }
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("info_nce rejects invalid inputs") {
  Tape<double> t;
  CHECK_THROWS_AS(info_nce(t.constant(Mat::Identity(1, 1)), 1.0), DimensionError);
  CHECK_THROWS_AS(info_nce(t.constant(Mat::Ones(2, 3)), 1.0), DimensionError);
  CHECK_THROWS_AS(info_nce(t.constant(Mat::Identity(2, 2)), 0.0), std::invalid_argument);
  Mat bad = Mat::Identity(3, 3);
  bad(1, 2) = std::nan("");
  CHECK_THROWS_AS(info_nce(t.constant(bad), 1.0), NonFiniteError);
  bad(1, 2) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(info_nce(t.constant(bad), 1.0), NonFiniteError);
}

TEST_CASE("info_nce gradient wrt the similarity matrix matches central differences") {
  std::mt19937_64 rng(4);
  for (double tau : {0.05, 1.0}) {
    const auto r = testing::gradcheck([tau](auto&, const auto& v) { return info_nce(v[0], tau); },
                                      {random_matrix(6, 6, rng)}, 1e-3);
    INFO("tau " << tau << " max relative " << r.max_relative);
    CHECK(r.within == r.coordinates);
  }
}

TEST_CASE("matryoshka loss reduces to plain info_nce for one full width") {
  std::mt19937_64 rng(12);
  const Mat q = random_matrix(5, 8, rng), d = random_matrix(5, 8, rng);
  Tape<double> t(false);
  const double plain =
      info_nce(similarity_matrix(normalize_rows(t.constant(q)), normalize_rows(t.constant(d))), 0.05).item();
  CHECK(matryoshka_of(q, d, config({8}, {1.0})) == doctest::Approx(plain).epsilon(1e-14));
  CHECK(matryoshka_of(q, d, config({8, 8}, {0.5, 0.5})) == doctest::Approx(plain).epsilon(1e-14));
}

TEST_CASE("matryoshka loss equals the hand-composed weighted sum of widths") {
  std::mt19937_64 rng(13);
  const Mat q = random_matrix(6, 64, rng), d = random_matrix(6, 64, rng);
  for (auto dir : {LossDirection::QueryToDoc, LossDirection::Symmetric}) {
    LossConfig cfg = config({64, 32, 16, 8}, {0.4, 0.3, 0.2, 0.1});
    cfg.direction = dir;
    double expect = 0;
    for (std::size_t r = 0; r < 4; ++r) {
      expect += cfg.matryoshka_weights[r] * width_term(q, d, cfg.matryoshka_dims[r], 0.05, dir);
    }
    CHECK(testing::relative_error(matryoshka_of(q, d, cfg), expect) <= 1e-6);
  }
}

TEST_CASE("symmetric direction differs from query-to-document on asymmetric matrices") {
  std::mt19937_64 rng(14);
  const Mat q = random_matrix(4, 8, rng), d = random_matrix(4, 8, rng);
  LossConfig a = config({8}, {1.0}), b = a;
  b.direction = LossDirection::Symmetric;
  CHECK(matryoshka_of(q, d, a) != doctest::Approx(matryoshka_of(q, d, b)));
}

TEST_CASE("loss is invariant to a paired permutation of the batch") {
  std::mt19937_64 rng(15);
  const Mat q = random_matrix(8, 16, rng), d = random_matrix(8, 16, rng);
  std::vector<Index> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Mat qp(8, 16), dp(8, 16);
  for (Index i = 0; i < 8; ++i) {
    qp.row(i) = q.row(perm[static_cast<std::size_t>(i)]);
    dp.row(i) = d.row(perm[static_cast<std::size_t>(i)]);
  }
  for (auto dir : {LossDirection::QueryToDoc, LossDirection::Symmetric}) {
    LossConfig cfg = config({16, 8, 4}, {1, 1, 1});
    cfg.direction = dir;
    cfg.validate(16);
    CHECK(std::abs(matryoshka_of(q, d, cfg) - matryoshka_of(qp, dp, cfg)) <= 1e-10);
  }
}

TEST_CASE("adding a constant to one row of the logits leaves the loss unchanged") {
  std::mt19937_64 rng(16);
  const Mat S = random_matrix(6, 6, rng);
  for (double tau : {0.05, 1.0}) {
    Mat shifted = S;
    shifted.row(2).array() += 0.7 * tau;
    CHECK(std::abs(loss_of(S, tau) - loss_of(shifted, tau)) <= 1e-10);
  }
}

TEST_CASE("positive rescaling of raw embeddings leaves the loss unchanged") {
  std::mt19937_64 rng(17);
  const Mat q = random_matrix(5, 16, rng), d = random_matrix(5, 16, rng);
  LossConfig cfg = config({16, 8}, {1, 1});
  cfg.validate(16);
  const double base = matryoshka_of(q, d, cfg);
  for (double c : {0.01, 3.0, 250.0}) CHECK(std::abs(matryoshka_of(c * q, d, cfg) - base) <= 1e-10);
}

TEST_CASE("loss config defaults and validation") {
  LossConfig def = LossConfig::defaults(64);
  CHECK(def.matryoshka_dims == std::vector<int>{64, 32, 16, 8});
  CHECK(def.temperature == 0.05);
  CHECK(def.direction == LossDirection::QueryToDoc);
  def.validate(64);
  for (double w : def.matryoshka_weights) CHECK(w == doctest::Approx(0.25));

  LossConfig c = config({16, 8}, {3, 1});
  c.validate(16);
  CHECK(c.matryoshka_weights[0] == doctest::Approx(0.75));
  CHECK(c.matryoshka_weights[0] + c.matryoshka_weights[1] == doctest::Approx(1.0));

  auto rejects = [](LossConfig bad, int d) { CHECK_THROWS_AS(bad.validate(d), std::invalid_argument); };
  rejects(config({8, 16}, {1, 1}), 16);
  rejects(config({32, 16}, {1, 1}), 16);
  rejects(config({8}, {1}), 16);
  rejects(config({16, 8}, {1, 0}), 16);
  rejects(config({16, 8}, {1}), 16);
  rejects(config({16, 0}, {1, 1}), 16);
  LossConfig tau = config({16}, {1}, 0.0);
  rejects(tau, 16);
  CHECK(parse_loss_direction("symmetric") == LossDirection::Symmetric);
  CHECK_THROWS_AS(parse_loss_direction("backwards"), std::invalid_argument);
}
