#include "gradprobe/stats_engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

namespace gradprobe::stats {
namespace {

void require_same_length(std::span<const double> x, std::span<const double> y,
                         std::size_t min_size) {
  if (x.size() != y.size()) {
    throw Error(ErrorCode::kShapeMismatch, "paired series lengths differ: " +
                                               std::to_string(x.size()) + " vs " +
                                               std::to_string(y.size()));
  }
  if (x.size() < min_size) {
    throw Error(ErrorCode::kInvalidArgument, "need at least " + std::to_string(min_size) +
                                                 " points, got " + std::to_string(x.size()));
  }
}

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (const double a : v) m = std::max(m, std::abs(a));
  return m;
}

// Column-scaled least squares with rank check; returns coefficients for the
// unscaled columns and fills the residuals.
Eigen::VectorXd least_squares(const Eigen::MatrixXd& design, const Eigen::VectorXd& target,
                              Eigen::VectorXd* residual, Eigen::MatrixXd* inverse_gram) {
  Eigen::VectorXd scale = design.colwise().norm().transpose();
  for (Eigen::Index j = 0; j < scale.size(); ++j) {
    if (scale(j) == 0.0) {
      throw Error(ErrorCode::kCollinear, "design column " + std::to_string(j) + " is all zero");
    }
  }
  const Eigen::MatrixXd scaled = design * scale.cwiseInverse().asDiagonal();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(scaled);
  qr.setThreshold(1e-10);
  if (qr.rank() < scaled.cols()) {
    throw Error(ErrorCode::kCollinear, "design matrix is rank deficient (rank " +
                                           std::to_string(qr.rank()) + " of " +
                                           std::to_string(scaled.cols()) + ")");
  }
  const Eigen::VectorXd scaled_beta = qr.solve(target);
  if (residual != nullptr) *residual = target - scaled * scaled_beta;
  if (inverse_gram != nullptr) {
    const Eigen::MatrixXd gram = scaled.transpose() * scaled;
    const Eigen::MatrixXd inv = gram.ldlt().solve(Eigen::MatrixXd::Identity(gram.rows(), gram.cols()));
    *inverse_gram = scale.cwiseInverse().asDiagonal() * inv * scale.cwiseInverse().asDiagonal();
  }
  return scaled_beta.cwiseQuotient(scale);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Unbiased draw in [0, n) that does not depend on the standard library's
// distribution implementation.
std::size_t bounded(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t range = n;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % range;
  std::uint64_t draw = rng();
  while (draw >= limit) draw = rng();
  return static_cast<std::size_t>(draw % range);
}

double percentile(const std::vector<double>& sorted, double p) {
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

void PairedSample::validate(std::size_t min_size) const {
  require_same_length(x, y, min_size);
  if (!labels.empty() && labels.size() != x.size()) {
    throw Error(ErrorCode::kShapeMismatch, "label count does not match sample size");
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) {
      throw Error(ErrorCode::kNonFinite, "non-finite value at point " + std::to_string(i));
    }
  }
}

double pearson(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y, 2);
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0;
  double syy = 0.0;
  double sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  const double tol_x = 1e-12 * max_abs(x);
  const double tol_y = 1e-12 * max_abs(y);
  if (sxx <= n * tol_x * tol_x || syy <= n * tol_y * tol_y) {
    throw Error(ErrorCode::kDegenerateSample, "zero variance in correlation input (n = " +
                                                  std::to_string(x.size()) + ")");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i + 1;
    while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
    const double mean_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = mean_rank;
    i = j;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y, 2);
  const std::vector<double> rx = average_ranks(x);
  const std::vector<double> ry = average_ranks(y);
  return pearson(rx, ry);
}

double statistic_value(Statistic statistic, std::span<const double> x, std::span<const double> y) {
  return statistic == Statistic::kPearson ? pearson(x, y) : spearman(x, y);
}

double pearson_p_value(double r, std::size_t n) {
  if (n < 3) throw Error(ErrorCode::kInvalidArgument, "p-value needs at least 3 points");
  if (std::abs(r) >= 1.0) return 0.0;
  const double df = static_cast<double>(n - 2);
  const double t = r * std::sqrt(df / (1.0 - r * r));
  const boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

BootstrapInterval bootstrap_ci(const PairedSample& sample, Statistic statistic,
                               std::size_t n_resamples, std::uint64_t seed) {
  sample.validate(3);
  if (n_resamples < 1) throw Error(ErrorCode::kInvalidArgument, "need at least one resample");
  const std::size_t n = sample.size();
  std::vector<double> values;
  values.reserve(n_resamples);
  std::vector<double> xs(n);
  std::vector<double> ys(n);
  std::size_t degenerate = 0;
  for (std::size_t r = 0; r < n_resamples; ++r) {
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(r)));
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t pick = bounded(rng, n);
      xs[i] = sample.x[pick];
      ys[i] = sample.y[pick];
    }
    try {
      values.push_back(statistic_value(statistic, xs, ys));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kDegenerateSample) throw;
      ++degenerate;
    }
  }
  if (2 * degenerate > n_resamples) {
    throw Error(ErrorCode::kUnstableInterval,
                std::to_string(degenerate) + " of " + std::to_string(n_resamples) +
                    " bootstrap resamples were degenerate");
  }
  std::sort(values.begin(), values.end());
  BootstrapInterval ci;
  ci.low = percentile(values, 0.025);
  ci.high = percentile(values, 0.975);
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) /
                      static_cast<double>(values.size());
  double ss = 0.0;
  for (const double v : values) ss += (v - mean) * (v - mean);
  ci.standard_error =
      values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
  ci.n_resamples = n_resamples;
  ci.n_degenerate = degenerate;
  ci.seed = seed;
  return ci;
}

LooResult loo_sensitivity(const PairedSample& sample, Statistic statistic) {
  sample.validate(4);
  const double full = statistic_value(statistic, sample.x, sample.y);
  const std::size_t n = sample.size();
  LooResult result;
  result.deltas.resize(n);
  std::vector<double> xs;
  std::vector<double> ys;
  bool any = false;
  for (std::size_t drop = 0; drop < n; ++drop) {
    xs.clear();
    ys.clear();
    for (std::size_t i = 0; i < n; ++i) {
      if (i == drop) continue;
      xs.push_back(sample.x[i]);
      ys.push_back(sample.y[i]);
    }
    try {
      const double delta = statistic_value(statistic, xs, ys) - full;
      result.deltas[drop] = delta;
      if (!any || std::abs(delta) > result.max_abs_delta) {
        result.max_abs_delta = std::abs(delta);
        result.max_index = drop;
        any = true;
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kDegenerateSample) throw;
      result.flagged.push_back(drop);
    }
  }
  return result;
}

std::vector<double> detrend(std::span<const double> values, std::span<const double> steps) {
  require_same_length(values, steps, 3);
  const auto n = static_cast<Eigen::Index>(values.size());
  Eigen::MatrixXd design(n, 2);
  Eigen::VectorXd target(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    design(i, 0) = 1.0;
    design(i, 1) = steps[static_cast<std::size_t>(i)];
    target(i) = values[static_cast<std::size_t>(i)];
  }
  // Centering the step column keeps the intercept/slope split well conditioned.
  design.col(1).array() -= design.col(1).mean();
  if (design.col(1).norm() == 0.0) {
    throw Error(ErrorCode::kDegenerateSample, "steps are constant; no trend can be removed");
  }
  Eigen::VectorXd residual;
  least_squares(design, target, &residual, nullptr);
  return {residual.data(), residual.data() + residual.size()};
}

namespace {

// Residual series that is numerically zero relative to the input's spread is
// reported as degenerate rather than correlated as rounding noise.
void require_residual_spread(std::span<const double> original, std::span<const double> residual,
                             const char* name) {
  const double mean = std::accumulate(original.begin(), original.end(), 0.0) /
                      static_cast<double>(original.size());
  double spread = 0.0;
  double remaining = 0.0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    spread += (original[i] - mean) * (original[i] - mean);
    remaining += residual[i] * residual[i];
  }
  if (spread == 0.0 || remaining <= 1e-20 * spread) {
    throw Error(ErrorCode::kDegenerateSample,
                std::string(name) + " is fully explained by the step trend");
  }
}

}  // namespace

double detrended_correlation(std::span<const double> x, std::span<const double> y,
                             std::span<const double> steps) {
  require_same_length(x, y, 3);
  const std::vector<double> rx = detrend(x, steps);
  const std::vector<double> ry = detrend(y, steps);
  require_residual_spread(x, rx, "x");
  require_residual_spread(y, ry, "y");
  return pearson(rx, ry);
}

RegressionReport ols_with_covariate(std::span<const double> target, std::span<const double> score,
                                    std::span<const double> steps) {
  require_same_length(target, score, 4);
  require_same_length(target, steps, 4);
  const auto n = static_cast<Eigen::Index>(target.size());
  Eigen::MatrixXd design(n, 3);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    design(i, 0) = 1.0;
    design(i, 1) = score[k];
    design(i, 2) = steps[k];
    y(i) = target[k];
  }
  if (!design.allFinite() || !y.allFinite()) {
    throw Error(ErrorCode::kNonFinite, "regression input contains non-finite values");
  }
  // Fit on centered predictors, then recover the intercept.
  Eigen::MatrixXd centered = design;
  const double score_mean = design.col(1).mean();
  const double step_mean = design.col(2).mean();
  centered.col(1).array() -= score_mean;
  centered.col(2).array() -= step_mean;

  Eigen::VectorXd residual;
  Eigen::MatrixXd inverse_gram;
  const Eigen::VectorXd beta = least_squares(centered, y, &residual, &inverse_gram);

  RegressionReport report;
  report.n = static_cast<std::size_t>(n);
  report.score_coefficient = beta(1);
  report.step_coefficient = beta(2);
  report.intercept = beta(0) - beta(1) * score_mean - beta(2) * step_mean;

  const double tss = (y.array() - y.mean()).square().sum();
  if (tss == 0.0) throw Error(ErrorCode::kDegenerateSample, "target is constant");
  const double rss = residual.squaredNorm();
  report.r_squared = std::clamp(1.0 - rss / tss, 0.0, 1.0);
  const double r_score = pearson(score, target);
  report.r_squared_score_only = r_score * r_score;

  const double sigma2 = rss / static_cast<double>(n - 3);
  const double se = std::sqrt(sigma2 * inverse_gram(1, 1));
  if (se > 0.0) {
    report.score_t_statistic = beta(1) / se;
  } else {
    report.score_t_statistic =
        beta(1) == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), beta(1));
  }

  try {
    const std::vector<double> rt = detrend(target, steps);
    const std::vector<double> rs = detrend(score, steps);
    require_residual_spread(target, rt, "target");
    require_residual_spread(score, rs, "score");
    report.partial_correlation = pearson(rt, rs);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kDegenerateSample) throw;
  }
  return report;
}

RankingReport rank_models(std::span<const ModelEntry> entries, MetricOrientation orientation) {
  if (entries.size() < 2) throw Error(ErrorCode::kInvalidArgument, "ranking needs at least 2 entries");
  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return entries[a].score < entries[b].score; });
  RankingReport report;
  for (const std::size_t i : order) report.order.push_back(entries[i].name);

  std::vector<double> scores;
  std::vector<double> metrics;
  for (const auto& e : entries) {
    scores.push_back(e.score);
    metrics.push_back(e.metric);
  }
  report.spearman_rho = spearman(scores, metrics);

  std::size_t best = 0;
  for (std::size_t i = 1; i < entries.size(); ++i) {
    const bool improves = orientation == MetricOrientation::kHigherIsBetter
                              ? entries[i].metric > entries[best].metric
                              : entries[i].metric < entries[best].metric;
    if (improves) best = i;
  }
  report.argmin_is_best = order.front() == best;
  return report;
}

CorrelationReport correlate(const PairedSample& sample, std::size_t n_resamples,
                            std::uint64_t seed) {
  sample.validate(3);
  CorrelationReport report;
  report.n = sample.size();
  report.pearson_r = pearson(sample.x, sample.y);
  report.spearman_rho = spearman(sample.x, sample.y);
  report.p_value_pearson = pearson_p_value(report.pearson_r, sample.size());
  report.pearson_ci = bootstrap_ci(sample, Statistic::kPearson, n_resamples, seed);
  report.spearman_ci = bootstrap_ci(sample, Statistic::kSpearman, n_resamples, seed);
  if (sample.size() >= 4) report.loo = loo_sensitivity(sample, Statistic::kPearson);
  return report;
}

}  // namespace gradprobe::stats
