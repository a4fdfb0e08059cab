#pragma once

// Correlation and regression protocol for probe-vs-quality analysis.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradprobe/error.hpp"

namespace gradprobe::stats {

enum class Statistic { kPearson, kSpearman };

struct PairedSample {
  std::vector<double> x;
  std::vector<double> y;
  std::vector<std::string> labels;  // optional, empty or one per point

  std::size_t size() const { return x.size(); }
  void validate(std::size_t min_size = 2) const;
};

/// Product-moment correlation. Throws kDegenerateSample on (numerically) zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

/// Average ranks, 1-based; ties share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

double spearman(std::span<const double> x, std::span<const double> y);

double statistic_value(Statistic statistic, std::span<const double> x, std::span<const double> y);

/// Two-sided p-value of H0: r = 0 using Student's t with n - 2 degrees of freedom.
double pearson_p_value(double r, std::size_t n);

struct BootstrapInterval {
  double low = 0.0;
  double high = 0.0;
  double standard_error = 0.0;
  std::size_t n_resamples = 0;
  std::size_t n_degenerate = 0;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kDefaultResamples = 10000;

/// Percentile bootstrap over (x, y) pairs. Resample i draws from a generator
/// seeded by (seed, i), so the interval does not depend on evaluation order.
BootstrapInterval bootstrap_ci(const PairedSample& sample, Statistic statistic,
                               std::size_t n_resamples = kDefaultResamples,
                               std::uint64_t seed = 0);

struct LooResult {
  std::vector<std::optional<double>> deltas;  // statistic(without i) - statistic(all); empty when degenerate
  std::vector<std::size_t> flagged;           // points whose removal made the sample degenerate
  double max_abs_delta = 0.0;
  std::size_t max_index = 0;
};

LooResult loo_sensitivity(const PairedSample& sample, Statistic statistic);

/// Residuals of `values` after least-squares removal of a + b * steps.
std::vector<double> detrend(std::span<const double> values, std::span<const double> steps);

double detrended_correlation(std::span<const double> x, std::span<const double> y,
                             std::span<const double> steps);

struct RegressionReport {
  double intercept = 0.0;
  double score_coefficient = 0.0;
  double step_coefficient = 0.0;
  double r_squared = 0.0;
  double r_squared_score_only = 0.0;
  double score_t_statistic = 0.0;
  std::optional<double> partial_correlation;  // empty when a step residual is degenerate
  std::size_t n = 0;
};

/// Fits target ~ 1 + score + step by column-pivoted QR.
RegressionReport ols_with_covariate(std::span<const double> target, std::span<const double> score,
                                    std::span<const double> steps);

enum class MetricOrientation { kHigherIsBetter, kLowerIsBetter };

struct ModelEntry {
  std::string name;
  double score = 0.0;
  double metric = 0.0;
};

struct RankingReport {
  std::vector<std::string> order;  // ascending score
  double spearman_rho = 0.0;
  bool argmin_is_best = false;
};

RankingReport rank_models(std::span<const ModelEntry> entries,
                          MetricOrientation orientation = MetricOrientation::kHigherIsBetter);

struct CorrelationReport {
  std::size_t n = 0;
  double pearson_r = 0.0;
  double spearman_rho = 0.0;
  BootstrapInterval pearson_ci;
  BootstrapInterval spearman_ci;
  double p_value_pearson = 1.0;
  std::optional<LooResult> loo;  // needs n >= 4
};

CorrelationReport correlate(const PairedSample& sample, std::size_t n_resamples = kDefaultResamples,
                            std::uint64_t seed = 0);

}  // namespace gradprobe::stats
