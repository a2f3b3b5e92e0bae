#include "op_cases.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cstring>

using namespace codembed;
using testing::gradcheck;
using testing::Mat;
using testing::random_matrix;

namespace {

constexpr double kOpTolerance = 1e-3;

}  // namespace

TEST_CASE("per-op analytic gradients agree with central differences") {
  for (const auto& c : testing::op_cases()) {
    const auto r = gradcheck(c.fn, c.inputs, kOpTolerance);
    INFO(c.name << " max relative error " << r.max_relative);
    CHECK(r.within == r.coordinates);
  }
}

TEST_CASE("attention matches a direct per-head computation") {
  std::mt19937_64 rng(5);
  const Mat Q = random_matrix(4, 4, rng), K = random_matrix(4, 4, rng), V = random_matrix(4, 4, rng);
  Tape<double> t(false);
  AttentionLayout layout{1, 4, 4, {4}, {}, true, 2};
  const Mat out = attention(t.constant(Q), t.constant(K), t.constant(V), layout).value();
  for (Index h = 0; h < 2; ++h) {
    for (Index i = 0; i < 4; ++i) {
      std::vector<double> w;
      double z = 0;
      for (Index j = 0; j <= i; ++j) {
        double s = 0;
        for (Index c = 0; c < 2; ++c) s += Q(i, h * 2 + c) * K(j, h * 2 + c);
        w.push_back(std::exp(s / std::sqrt(2.0)));
        z += w.back();
      }
      for (Index c = 0; c < 2; ++c) {
        double expect = 0;
        for (Index j = 0; j <= i; ++j) expect += w[static_cast<std::size_t>(j)] / z * V(j, h * 2 + c);
        CHECK(out(i, h * 2 + c) == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("softmax rows on known inputs") {
  Tape<double> t(false);
  Mat x(2, 3);
  x << 0, 0, 0, 1, 2, 3;
  const Mat s = softmax_rows(t.constant(x)).value();
  for (Index j = 0; j < 3; ++j) CHECK(s(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(s(1, 2) == doctest::Approx(std::exp(3.0) / z).epsilon(1e-14));
  Mat big(1, 2);
  big << 1000, 1000;
  const Mat ls = log_softmax_rows(t.constant(big)).value();
  CHECK(ls(0, 0) == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("rotary encoding preserves norms and depends only on relative position") {
  std::mt19937_64 rng(3);
  const Mat q = random_matrix(1, 8, rng), k = random_matrix(1, 8, rng);
  const Index L = 6;
  Tape<double> t(false);
  const Mat Qrep = q.replicate(L, 1);
  const Mat Krep = k.replicate(L, 1);
  const Mat rq = rope(t.constant(Qrep), L, 2).value();
  const Mat rk = rope(t.constant(Krep), L, 2).value();
  CHECK((rq.row(0) - q).norm() == doctest::Approx(0.0));
  for (Index p = 0; p < L; ++p) CHECK(rq.row(p).norm() == doctest::Approx(q.norm()).epsilon(1e-12));
  // Per-head dot products at offset 2 agree across absolute positions.
  for (Index h = 0; h < 2; ++h) {
    const double d02 = rq.row(0).segment(h * 4, 4).dot(rk.row(2).segment(h * 4, 4));
    const double d35 = rq.row(3).segment(h * 4, 4).dot(rk.row(5).segment(h * 4, 4));
    CHECK(d02 == doctest::Approx(d35).epsilon(1e-12));
  }
}

TEST_CASE("tape misuse is reported") {
  Tape<double> t;
  Var<double> x = t.variable(Mat::Ones(2, 2));
  SUBCASE("non-scalar loss") { CHECK_THROWS_AS(t.backward(x), TapeError); }
  SUBCASE("detached loss") {
    Var<double> c = t.constant(Mat::Ones(1, 1));
    CHECK_THROWS_AS(t.backward(scale(c, 2.0)), TapeError);
  }
  SUBCASE("second backward without reset") {
    Var<double> loss = sum(mul(x, x));
    t.backward(loss);
    CHECK(x.grad()(1, 1) == doctest::Approx(2.0));
    CHECK_THROWS_AS(t.backward(loss), TapeError);
    t.reset();
    CHECK(t.size() == 0);
    Var<double> y = t.variable(Mat::Ones(1, 1));
    t.backward(scale(y, 3.0));
    CHECK(y.grad()(0, 0) == doctest::Approx(3.0));
  }
  SUBCASE("loss from another tape") {
    Tape<double> other;
    Var<double> z = other.variable(Mat::Ones(1, 1));
    CHECK_THROWS_AS(t.backward(z), TapeError);
  }
  SUBCASE("shape mismatch") {
    Var<double> y = t.variable(Mat::Ones(3, 2));
    CHECK_THROWS_AS(matmul(x, transpose(transpose(y))), DimensionError);
    CHECK_THROWS_AS(add(x, y), DimensionError);
  }
  SUBCASE("zero row cannot be normalized") {
    Mat m = Mat::Ones(2, 2);
    m.row(1).setZero();
    CHECK_THROWS_AS(normalize_rows(t.variable(m)), NormalizationError);
  }
}

TEST_CASE("parameters accumulate gradients across tapes") {
  Parameter<double> p("w", Mat::Constant(1, 2, 2.0));
  for (int round = 0; round < 2; ++round) {
    Tape<double> t;
    t.backward(sum(mul(t.param(p), t.param(p))));
  }
  CHECK(p.grad(0, 0) == doctest::Approx(8.0));
  p.trainable = false;
  Tape<double> t;
  CHECK_FALSE(t.param(p).requires_grad());
  p.zero_grad();
  CHECK(p.grad.isZero());
}

TEST_CASE("every reachable variable receives a full gradient") {
  Tape<double> t;
  Var<double> a = t.variable(Mat::Constant(1, 1, 3.0));
  Var<double> b = t.variable(Mat::Constant(1, 1, 5.0));
  Var<double> unused = t.variable(Mat::Constant(2, 2, 1.0));
  // a is used twice: a*b + a.
  t.backward(add(mul(a, b), a));
  CHECK(a.grad()(0, 0) == doctest::Approx(6.0));
  CHECK(b.grad()(0, 0) == doctest::Approx(3.0));
  CHECK(unused.grad().rows() == 2);
  CHECK(unused.grad().isZero());
}

TEST_CASE("forward evaluation is bitwise deterministic") {
  std::mt19937_64 rng(99);
  const Mat x = random_matrix(16, 12, rng), w = random_matrix(12, 12, rng);
  auto run = [&] {
    Tape<float> t(false);
    auto v = softmax_rows(matmul(t.constant(x.cast<float>()), t.constant(w.cast<float>())));
    return Matrix<float>(sum(v).value());
  };
  const auto a = run(), b = run();
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float)) == 0);
}

TEST_CASE("a grad-disabled tape stores no backward state") {
  Tape<double> t(false);
  Var<double> x = t.variable(Mat::Ones(2, 2));
  CHECK_FALSE(x.requires_grad());
  CHECK_FALSE(sum(x).requires_grad());
}
