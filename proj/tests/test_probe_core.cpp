#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "gradprobe/probe_core.hpp"
#include "test_util.hpp"

using namespace gradprobe;
using probe::Matrix;
using probe::Mode;
using probe::ProbeBatch;

namespace {

double relative_error(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-12);
}

// Softmax, loss and readouts recomputed column by column in long double.
struct LongDoubleOracle {
  std::vector<std::vector<long double>> probs;
  long double loss = 0;
  long double confidence = 0, entropy = 0, margin = 0;
};

LongDoubleOracle oracle(const ProbeBatch& batch) {
  const Matrix logits = batch.head * batch.features;
  LongDoubleOracle out;
  const auto b = logits.cols();
  for (Eigen::Index j = 0; j < b; ++j) {
    long double mx = logits.col(j).maxCoeff();
    long double z = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) z += std::exp(static_cast<long double>(logits(i, j)) - mx);
    std::vector<long double> p;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      p.push_back(std::exp(static_cast<long double>(logits(i, j)) - mx) / z);
    }
    out.loss -= std::log(p[batch.labels[static_cast<std::size_t>(j)]]);
    std::vector<long double> sorted = p;
    std::sort(sorted.rbegin(), sorted.rend());
    out.confidence += sorted[0];
    out.margin += sorted[0] - sorted[1];
    for (const long double v : p)
      if (v > 0) out.entropy -= v * std::log(v);
    out.probs.push_back(std::move(p));
  }
  out.loss /= b;
  out.confidence /= b;
  out.entropy /= b;
  out.margin /= b;
  return out;
}

}  // namespace

TEST_CASE("classification gradient matches central finite differences") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> cdist(2, 10), ddist(1, 16), bdist(1, 8);
  for (int trial = 0; trial < 100; ++trial) {
    const ProbeBatch batch = testing::random_classification(rng, cdist(rng), ddist(rng), bdist(rng));
    const Matrix analytic = probe::head_gradient(batch);
    const Matrix numeric = testing::finite_difference_gradient(batch);
    CHECK(relative_error(analytic, numeric) < 1e-5);
  }
}

TEST_CASE("regression gradient matches central finite differences") {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> cdist(1, 10), ddist(1, 16), bdist(1, 8);
  for (int trial = 0; trial < 50; ++trial) {
    const ProbeBatch batch = testing::random_regression(rng, cdist(rng), ddist(rng), bdist(rng));
    const Matrix analytic = probe::head_gradient(batch);
    const Matrix numeric = testing::finite_difference_gradient(batch);
    CHECK(relative_error(analytic, numeric) < 1e-5);
    const Matrix closed = (batch.head * batch.features - batch.targets) * batch.features.transpose() /
                          static_cast<double>(batch.batch_size());
    CHECK(relative_error(analytic, closed) < 1e-12);
  }
}

TEST_CASE("zero head on a binary problem") {
  ProbeBatch batch;
  batch.features = Matrix::Constant(1, 1, 1.0);
  batch.head = Matrix::Zero(2, 1);
  batch.labels = {0};
  const probe::ProbeScore s = probe::probe(batch);
  CHECK(std::abs(s.grad_fro - std::sqrt(0.5)) < 1e-9);
  CHECK(std::abs(s.loss - std::log(2.0)) < 1e-9);
  CHECK(std::abs(s.grad_l1 - 1.0) < 1e-12);
  CHECK(std::abs(s.grad_linf - 0.5) < 1e-12);
  REQUIRE(s.fisher_trace);
  CHECK(std::abs(*s.fisher_trace - 0.5) < 1e-12);
  REQUIRE(s.readouts);
  CHECK(std::abs(s.readouts->confidence - 0.5) < 1e-12);
  CHECK(std::abs(s.readouts->entropy - std::log(2.0)) < 1e-12);
  CHECK(std::abs(s.readouts->margin) < 1e-12);
}

TEST_CASE("zero head with C classes gives uniform probabilities") {
  for (int c : {2, 3, 7, 10}) {
    ProbeBatch batch;
    batch.features = Matrix::Constant(3, 2, 1.0);
    batch.head = Matrix::Zero(c, 3);
    batch.labels = {0, 1};
    const auto probs = probe::softmax_columns(batch.head * batch.features);
    CHECK((probs.values().array() - 1.0 / c).abs().maxCoeff() < 1e-15);
    CHECK(std::abs(probe::batch_loss(batch) - std::log(static_cast<double>(c))) < 1e-12);
  }
}

TEST_CASE("softmax, loss and readouts agree with a long-double oracle") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 40; ++trial) {
    ProbeBatch batch = testing::random_classification(rng, 2 + trial % 9, 1 + trial % 16, 1 + trial % 8);
    batch.head *= (trial % 4 == 0) ? 40.0 : 1.0;  // large logits exercise the stabilized path
    const LongDoubleOracle ref = oracle(batch);
    const auto probs = probe::softmax_columns(batch.head * batch.features);
    for (Eigen::Index j = 0; j < probs.batch_size(); ++j) {
      for (Eigen::Index i = 0; i < probs.num_classes(); ++i) {
        CHECK(std::abs(probs.values()(i, j) - static_cast<double>(ref.probs[j][i])) < 1e-14);
      }
    }
    const probe::ProbeScore s = probe::probe(batch);
    CHECK(std::abs(s.loss - static_cast<double>(ref.loss)) <= 1e-12 * std::max(1.0, static_cast<double>(ref.loss)));
    CHECK(std::abs(s.readouts->confidence - static_cast<double>(ref.confidence)) < 1e-12);
    CHECK(std::abs(s.readouts->entropy - static_cast<double>(ref.entropy)) < 1e-12);
    CHECK(std::abs(s.readouts->margin - static_cast<double>(ref.margin)) < 1e-12);
  }
}

TEST_CASE("extreme logits stay finite") {
  ProbeBatch batch;
  batch.features = Matrix::Constant(1, 1, 1.0);
  batch.head = Matrix(2, 1);
  batch.head << 1000.0, -1000.0;
  batch.labels = {1};
  const probe::ProbeScore s = probe::probe(batch);
  CHECK(std::isfinite(s.loss));
  CHECK(std::abs(s.loss - 2000.0) < 1e-9);
  CHECK(std::abs(s.grad_fro - std::sqrt(2.0)) < 1e-12);
}

TEST_CASE("norms of a known gradient") {
  Matrix g(2, 2);
  g << 1.0, -2.0, 3.0, -4.0;
  const auto n = probe::gradient_norms(g);
  CHECK(n.l1 == doctest::Approx(10.0));
  CHECK(n.fro == doctest::Approx(std::sqrt(30.0)));
  CHECK(n.linf == doctest::Approx(4.0));
}

TEST_CASE("empirical Fisher trace matches the per-sample sum") {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const ProbeBatch batch = testing::random_classification(rng, 4, 5, 6);
    const auto probs = probe::softmax_columns(batch.head * batch.features);
    long double sum = 0;
    for (Eigen::Index i = 0; i < 6; ++i) {
      Eigen::VectorXd r = probs.values().col(i);
      r(batch.labels[static_cast<std::size_t>(i)]) -= 1.0;
      sum += r.squaredNorm() * batch.features.col(i).squaredNorm();
    }
    CHECK(std::abs(probe::fisher_trace(batch) - static_cast<double>(sum / 6)) < 1e-12);
  }
}

TEST_CASE("normalized scores") {
  ProbeBatch batch;
  batch.features = Matrix::Constant(2, 2, 1.0);  // ||Z|| = 2
  batch.head = Matrix::Constant(2, 2, 0.5);      // ||W|| = 1
  batch.labels = {0, 1};
  const auto s = probe::normalized_scores(3.0, batch.features, batch.head);
  CHECK(s.score_z == doctest::Approx(1.5));
  CHECK(s.score_w == doctest::Approx(3.0));

  const auto zero = probe::normalized_scores(1.0, Matrix::Zero(2, 2), Matrix::Zero(2, 2));
  CHECK(zero.score_z == doctest::Approx(1e12));
  CHECK_THROWS_AS(probe::normalized_scores(1.0, Matrix::Zero(2, 2), Matrix::Zero(2, 2), 0.0, 0.0), Error);
  try {
    probe::normalized_scores(1.0, Matrix::Zero(2, 2), batch.head, 0.0, 0.0);
    FAIL("expected a division guard");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDivisionGuard);
  }
}

TEST_CASE("gradient is invariant to batch order and duplication") {
  std::mt19937_64 rng(15);
  const ProbeBatch batch = testing::random_classification(rng, 5, 7, 6);
  const Matrix g = probe::head_gradient(batch);

  ProbeBatch permuted = batch;
  const std::vector<int> order = {3, 0, 5, 1, 4, 2};
  for (int j = 0; j < 6; ++j) {
    permuted.features.col(j) = batch.features.col(order[j]);
    permuted.labels[j] = batch.labels[order[j]];
  }
  CHECK(relative_error(probe::head_gradient(permuted), g) < 1e-14);

  ProbeBatch doubled = batch;
  doubled.features.resize(7, 12);
  doubled.features << batch.features, batch.features;
  doubled.labels.insert(doubled.labels.end(), batch.labels.begin(), batch.labels.end());
  CHECK(relative_error(probe::head_gradient(doubled), g) < 1e-14);
  CHECK(probe::batch_loss(doubled) == doctest::Approx(probe::batch_loss(batch)).epsilon(1e-14));
}

TEST_CASE("regression with a perfect head has zero gradient") {
  std::mt19937_64 rng(16);
  ProbeBatch batch = testing::random_regression(rng, 3, 4, 5);
  batch.targets = batch.head * batch.features;
  CHECK(probe::head_gradient(batch).norm() < 1e-14);
  CHECK(probe::batch_loss(batch) < 1e-28);
  const auto s = probe::probe(batch);
  CHECK_FALSE(s.fisher_trace.has_value());
  CHECK_FALSE(s.readouts.has_value());
}

TEST_CASE("half MSE closed form") {
  Matrix pred(1, 2), target(1, 2);
  pred << 1.0, 3.0;
  target << 0.0, 1.0;
  CHECK(probe::half_mse(pred, target) == doctest::Approx((0.5 * 1 + 0.5 * 4) / 2));
}

TEST_CASE("validation errors carry distinct codes") {
  const auto code_of = [](const ProbeBatch& b) {
    try {
      b.validate();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kIo;  // sentinel: no error
  };
  ProbeBatch ok;
  ok.features = Matrix::Ones(2, 3);
  ok.head = Matrix::Ones(4, 2);
  ok.labels = {0, 1, 3};
  CHECK(code_of(ok) == ErrorCode::kIo);

  ProbeBatch bad = ok;
  bad.labels = {0, 1, 4};
  CHECK(code_of(bad) == ErrorCode::kLabelOutOfRange);
  bad = ok;
  bad.labels = {0, 1};
  CHECK(code_of(bad) == ErrorCode::kShapeMismatch);
  bad = ok;
  bad.head = Matrix::Ones(4, 3);
  CHECK(code_of(bad) == ErrorCode::kShapeMismatch);
  bad = ok;
  bad.head = Matrix::Ones(1, 2);
  CHECK(code_of(bad) == ErrorCode::kShapeMismatch);
  bad = ok;
  bad.features(1, 2) = std::nan("");
  CHECK(code_of(bad) == ErrorCode::kNonFinite);
  bad = ok;
  bad.head(0, 0) = INFINITY;
  CHECK(code_of(bad) == ErrorCode::kNonFinite);

  ProbeBatch reg;
  reg.mode = Mode::kRegression;
  reg.features = Matrix::Ones(2, 3);
  reg.head = Matrix::Ones(1, 2);
  reg.targets = Matrix::Ones(1, 3);
  CHECK(code_of(reg) == ErrorCode::kIo);
  reg.targets = Matrix::Ones(2, 3);
  CHECK(code_of(reg) == ErrorCode::kShapeMismatch);

  reg.targets = Matrix::Ones(1, 3);
  try {
    probe::fisher_trace(reg);
    FAIL("expected unsupported mode");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kUnsupportedMode);
  }
}
