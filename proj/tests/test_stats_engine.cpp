#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Dense>

#include "doctest.h"
#include "gradprobe/stats_engine.hpp"
#include "test_util.hpp"

using namespace gradprobe;
using namespace gradprobe::stats;

namespace {

ErrorCode code_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kIo;
}

std::vector<double> normals(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> d(0, 1);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST_CASE("pearson on a hand-computed fixture") {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  const std::vector<double> y = {2, 4, 5, 4, 5};
  CHECK(pearson(x, y) == doctest::Approx(6.0 / std::sqrt(60.0)).epsilon(1e-15));
  const std::vector<double> neg = {5, 4, 3, 2, 1};
  CHECK(pearson(x, neg) == -1.0);
}

TEST_CASE("pearson agrees with an extended-precision oracle") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = normals(rng, 5 + trial);
    auto y = normals(rng, 5 + trial);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += 0.5 * x[i] + 1e6;  // large offset
    CHECK(std::abs(pearson(x, y) - testing::pearson_ld(x, y)) < 1e-10);
  }
}

TEST_CASE("degenerate correlation inputs are errors, not NaN") {
  const std::vector<double> flat = {2, 2, 2, 2};
  const std::vector<double> v = {1, 2, 3, 4};
  CHECK(code_of([&] { pearson(flat, v); }) == ErrorCode::kDegenerateSample);
  CHECK(code_of([&] { spearman(v, flat); }) == ErrorCode::kDegenerateSample);
  const std::vector<double> short_v = {1, 2, 3};
  CHECK(code_of([&] { pearson(short_v, v); }) == ErrorCode::kShapeMismatch);
  const std::vector<double> one = {1};
  CHECK(code_of([&] { pearson(one, one); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("average ranks with ties match brute-force counting") {
  const std::vector<double> v = {3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5};
  CHECK(average_ranks(v) == testing::ranks_brute(v));
  CHECK(average_ranks(std::vector<double>{10, 20, 20, 30}) == std::vector<double>{1, 2.5, 2.5, 4});
}

TEST_CASE("spearman equals pearson of brute-force ranks") {
  std::mt19937_64 rng(22);
  std::uniform_int_distribution<int> small(0, 5);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<double> x(12), y(12);
    for (auto& a : x) a = small(rng);
    for (auto& a : y) a = small(rng);
    if (testing::ranks_brute(x) == std::vector<double>(12, 6.5)) continue;
    if (testing::ranks_brute(y) == std::vector<double>(12, 6.5)) continue;
    const double oracle = testing::pearson_ld(testing::ranks_brute(x), testing::ranks_brute(y));
    CHECK(std::abs(spearman(x, y) - oracle) < 1e-12);
  }
  const std::vector<double> x = {1, 2, 3, 4, 5};
  const std::vector<double> cubic = {1, 8, 27, 64, 125};
  CHECK(spearman(x, cubic) == doctest::Approx(1.0));
}

TEST_CASE("pearson p-values match closed forms for small samples") {
  // n = 3: Student t with 1 dof is Cauchy, p = 1 - (2/pi) atan|t|.
  CHECK(pearson_p_value(0.5, 3) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  // n = 4: 2 dof, p = 1 - |t| / sqrt(2 + t^2).
  const double r = -0.8;
  const double t = r * std::sqrt(2.0 / (1.0 - r * r));
  CHECK(pearson_p_value(r, 4) == doctest::Approx(1.0 - std::abs(t) / std::sqrt(2.0 + t * t)).epsilon(1e-12));
  CHECK(pearson_p_value(1.0, 10) == 0.0);
  CHECK(pearson_p_value(0.0, 10) == doctest::Approx(1.0));
}

TEST_CASE("bootstrap is deterministic in the seed") {
  std::mt19937_64 rng(23);
  PairedSample s;
  s.x = normals(rng, 30);
  s.y = normals(rng, 30);
  for (std::size_t i = 0; i < 30; ++i) s.y[i] += s.x[i];
  const auto a = bootstrap_ci(s, Statistic::kPearson, 2000, 7);
  const auto b = bootstrap_ci(s, Statistic::kPearson, 2000, 7);
  const auto c = bootstrap_ci(s, Statistic::kPearson, 2000, 8);
  CHECK(a.low == b.low);
  CHECK(a.high == b.high);
  CHECK(a.standard_error == b.standard_error);
  CHECK((a.low != c.low || a.high != c.high));
  const double r = pearson(s.x, s.y);
  CHECK(a.low < r);
  CHECK(r < a.high);
  CHECK(a.standard_error > 0.0);
  CHECK(a.n_resamples == 2000);
  CHECK(a.seed == 7);
  // Resample i depends only on (seed, i): a longer run shares its prefix distribution.
  const auto longer = bootstrap_ci(s, Statistic::kPearson, 4000, 7);
  CHECK(std::abs(longer.low - a.low) < 0.05);
}

TEST_CASE("bootstrap of an exact line is a point interval") {
  PairedSample s;
  for (int i = 0; i < 10; ++i) {
    s.x.push_back(i);
    s.y.push_back(2.0 * i - 1.0);
  }
  const auto ci = bootstrap_ci(s, Statistic::kPearson, 500, 1);
  CHECK(ci.low == doctest::Approx(1.0));
  CHECK(ci.high == doctest::Approx(1.0));
  const auto rank_ci = bootstrap_ci(s, Statistic::kSpearman, 500, 1);
  CHECK(rank_ci.low == doctest::Approx(1.0));
}

TEST_CASE("bootstrap reports an unstable interval when most resamples are degenerate") {
  PairedSample s;
  s.x.assign(20, 0.0);
  s.y.assign(20, 0.0);
  s.x[0] = 1.0;
  s.y[1] = 1.0;
  CHECK(code_of([&] { bootstrap_ci(s, Statistic::kPearson, 1000, 0); }) == ErrorCode::kUnstableInterval);
}

TEST_CASE("leave-one-out deltas") {
  PairedSample line;
  for (int i = 0; i < 8; ++i) {
    line.x.push_back(i);
    line.y.push_back(-3.0 * i + 2.0);
  }
  const auto exact = loo_sensitivity(line, Statistic::kPearson);
  REQUIRE(exact.deltas.size() == 8);
  for (const auto& d : exact.deltas) CHECK(std::abs(*d) < 1e-12);
  CHECK(exact.max_abs_delta < 1e-12);

  PairedSample outlier = line;
  outlier.x.push_back(3.5);
  outlier.y.push_back(40.0);
  const auto r = loo_sensitivity(outlier, Statistic::kPearson);
  CHECK(r.max_index == 8);
  const double full = pearson(outlier.x, outlier.y);
  CHECK(*r.deltas[8] == doctest::Approx(-1.0 - full));

  PairedSample tiny;
  tiny.x = {1, 2, 3};
  tiny.y = {1, 2, 3};
  CHECK(code_of([&] { loo_sensitivity(tiny, Statistic::kPearson); }) == ErrorCode::kInvalidArgument);

  PairedSample fragile;
  fragile.x = {0, 0, 0, 1};
  fragile.y = {1, 2, 3, 4};
  const auto f = loo_sensitivity(fragile, Statistic::kPearson);
  CHECK(f.flagged == std::vector<std::size_t>{3});
  CHECK_FALSE(f.deltas[3].has_value());
}

TEST_CASE("detrending removes a linear step trend") {
  const std::vector<double> steps = {0, 1, 2, 3, 4};
  const std::vector<double> u = {1, -2, 0, 2, -1};  // orthogonal to 1 and step
  std::vector<double> x, y, trend;
  for (std::size_t i = 0; i < 5; ++i) {
    x.push_back(3 + 0.5 * steps[i] + u[i]);
    y.push_back(1 - steps[i] - 2 * u[i]);
    trend.push_back(7 - 2 * steps[i]);
  }
  const auto r = detrend(x, steps);
  for (std::size_t i = 0; i < 5; ++i) CHECK(r[i] == doctest::Approx(u[i]));
  CHECK(detrended_correlation(x, y, steps) == doctest::Approx(-1.0));
  CHECK(code_of([&] { detrended_correlation(trend, y, steps); }) == ErrorCode::kDegenerateSample);
  const std::vector<double> flat_steps = {2, 2, 2, 2, 2};
  CHECK(code_of([&] { detrend(x, flat_steps); }) == ErrorCode::kDegenerateSample);
}

TEST_CASE("OLS with a step covariate recovers exact coefficients") {
  const std::vector<double> score = {0.3, 1.2, 0.7, 2.5, 1.9, 0.1, 3.3};
  std::vector<double> steps, target;
  for (std::size_t i = 0; i < score.size(); ++i) {
    steps.push_back(100.0 * i);
    target.push_back(2.0 + 3.0 * score[i] - 0.005 * steps[i]);
  }
  const auto rep = ols_with_covariate(target, score, steps);
  CHECK(rep.intercept == doctest::Approx(2.0));
  CHECK(rep.score_coefficient == doctest::Approx(3.0));
  CHECK(rep.step_coefficient == doctest::Approx(-0.005));
  CHECK(rep.r_squared == doctest::Approx(1.0));
  CHECK(rep.n == 7);
}

TEST_CASE("OLS agrees with long-double normal equations") {
  std::mt19937_64 rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 12 + trial;
    const auto score = normals(rng, n);
    const auto noise = normals(rng, n);
    std::vector<double> steps, target;
    for (std::size_t i = 0; i < n; ++i) {
      steps.push_back(5.0 * i);
      target.push_back(1.0 - 0.7 * score[i] + 0.01 * steps[i] + 0.3 * noise[i]);
    }
    using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
    MatL X(n, 3);
    Eigen::Matrix<long double, Eigen::Dynamic, 1> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      X(i, 0) = 1;
      X(i, 1) = score[i];
      X(i, 2) = steps[i];
      y(i) = target[i];
    }
    const MatL gram_inv = (X.transpose() * X).inverse();
    const auto beta = (gram_inv * X.transpose() * y).eval();
    const auto resid = (y - X * beta).eval();
    const long double sigma2 = resid.squaredNorm() / (n - 3);
    const long double t = beta(1) / std::sqrt(sigma2 * gram_inv(1, 1));
    const long double ybar = y.mean();
    const long double tss = (y.array() - ybar).square().sum();

    const auto rep = ols_with_covariate(target, score, steps);
    CHECK(rep.intercept == doctest::Approx(static_cast<double>(beta(0))).epsilon(1e-9));
    CHECK(rep.score_coefficient == doctest::Approx(static_cast<double>(beta(1))).epsilon(1e-9));
    CHECK(rep.step_coefficient == doctest::Approx(static_cast<double>(beta(2))).epsilon(1e-9));
    CHECK(rep.score_t_statistic == doctest::Approx(static_cast<double>(t)).epsilon(1e-8));
    CHECK(rep.r_squared == doctest::Approx(static_cast<double>(1 - resid.squaredNorm() / tss)).epsilon(1e-9));
    CHECK(rep.r_squared_score_only == doctest::Approx(std::pow(testing::pearson_ld(score, target), 2)));
    REQUIRE(rep.partial_correlation);
    CHECK(*rep.partial_correlation == doctest::Approx(detrended_correlation(target, score, steps)));
  }
}

TEST_CASE("OLS rejects collinear designs") {
  const std::vector<double> steps = {0, 1, 2, 3, 4, 5};
  const std::vector<double> score = {0, 2, 4, 6, 8, 10};
  const std::vector<double> target = {1, 3, 2, 5, 4, 6};
  CHECK(code_of([&] { ols_with_covariate(target, score, steps); }) == ErrorCode::kCollinear);
  const std::vector<double> zero = {0, 0, 0, 0, 0, 0};
  CHECK(code_of([&] { ols_with_covariate(target, zero, steps); }) == ErrorCode::kCollinear);
}

TEST_CASE("model ranking") {
  const std::vector<ModelEntry> models = {
      {"a", 0.3, 0.7}, {"b", 0.1, 0.9}, {"c", 0.5, 0.5}, {"d", 0.2, 0.8}, {"e", 0.4, 0.6}};
  const auto r = rank_models(models);
  CHECK(r.order == std::vector<std::string>{"b", "d", "a", "e", "c"});
  CHECK(r.spearman_rho == doctest::Approx(-1.0));
  CHECK(r.argmin_is_best);
  const auto lower = rank_models(models, MetricOrientation::kLowerIsBetter);
  CHECK_FALSE(lower.argmin_is_best);

  const std::vector<ModelEntry> mixed = {
      {"m1", 1.0, 10}, {"m2", 2.0, 30}, {"m3", 3.0, 20}, {"m4", 4.0, 40}};
  const auto m = rank_models(mixed, MetricOrientation::kLowerIsBetter);
  CHECK(m.spearman_rho == doctest::Approx(0.8));
  CHECK(m.argmin_is_best);
}

TEST_CASE("correlation report bundles point estimates, intervals and LOO") {
  std::mt19937_64 rng(25);
  PairedSample s;
  s.x = normals(rng, 20);
  s.y = normals(rng, 20);
  for (std::size_t i = 0; i < 20; ++i) s.y[i] = -s.x[i] + 0.3 * s.y[i];
  const auto rep = correlate(s, 1000, 3);
  CHECK(rep.n == 20);
  CHECK(rep.pearson_r == pearson(s.x, s.y));
  CHECK(rep.spearman_rho == spearman(s.x, s.y));
  CHECK(rep.pearson_ci.low <= rep.pearson_r);
  CHECK(rep.pearson_ci.high >= rep.pearson_r);
  CHECK(rep.p_value_pearson < 1e-6);
  REQUIRE(rep.loo);
  CHECK(rep.loo->deltas.size() == 20);
  s.x[3] = std::nan("");
  CHECK(code_of([&] { correlate(s, 10, 0); }) == ErrorCode::kNonFinite);
}
