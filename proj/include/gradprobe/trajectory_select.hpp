#pragma once

// Validation-free checkpoint selection over a per-checkpoint score series.
//
// Every head-gradient strategy reads only `score` (and, for lead-lag
// alignment, `aux_loss`). The `metric` column is consulted solely to
// report gaps against the oracle.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradprobe/error.hpp"

namespace gradprobe::select {

enum class Orientation { kHigherIsBetter, kLowerIsBetter };

struct TrajectoryRecord {
  std::uint64_t step = 0;
  double score = 0.0;
  std::optional<double> metric;
  std::optional<double> aux_loss;
};

struct TrajectorySeries {
  std::vector<TrajectoryRecord> records;

  std::size_t size() const { return records.size(); }
  bool has_metric() const;
  bool has_aux_loss() const;
  std::vector<double> scores() const;

  /// Throws Error if empty, steps are not strictly increasing or a score is not finite.
  void validate() const;
};

struct SelectionConfig {
  std::optional<int> ema_span = 3;
  std::optional<double> ema_beta;
  std::optional<std::size_t> tail_size = 80;
  std::optional<double> tail_fraction;
  double quantile = 0.1;
  std::size_t patience = 3;
  std::size_t max_lag = 10;
  std::size_t repeats = 1;
  Orientation orientation = Orientation::kHigherIsBetter;

  /// Throws kConfigConflict when both span and beta (or both tail size and
  /// tail fraction) are set, kInvalidArgument for out-of-range values.
  void validate() const;
  /// Smoothing factor actually used; 0 means no smoothing.
  double effective_beta() const;
};

inline constexpr double kDefaultTailFraction = 0.2;

/// Half-open [begin, end) range of record indices.
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
};

struct SelectionResult {
  std::string strategy;
  std::size_t chosen_index = 0;
  std::uint64_t chosen_step = 0;
  std::vector<double> smoothed;          // over the whole series
  std::vector<std::size_t> candidates;   // record indices
  std::optional<double> gap;             // against the tail-window oracle
  std::optional<double> global_gap;      // against the best record of the whole series
  std::optional<std::uint64_t> oracle_step;
  std::optional<int> lag;                // lead-lag strategy only
  bool lag_warning = false;
};

struct LagResult {
  int lag = 0;
  double correlation = 0.0;  // Pearson r at the chosen lag (0 when none was evaluable)
  bool warning = false;
};

std::vector<double> ema_smooth(std::span<const double> values, const SelectionConfig& config);

IndexRange tail_window(std::size_t n, const SelectionConfig& config);

/// Minimum of the smoothed score inside the tail window, earliest on ties.
SelectionResult select_argmin(const TrajectorySeries& series, const SelectionConfig& config);

/// Nearest-rank quantile candidates followed by the patience rule.
SelectionResult select_quantile_patience(const TrajectorySeries& series,
                                         const SelectionConfig& config);

/// Lag in [-max_lag, max_lag] maximizing |pearson(score[t], reference[t + lag])|.
LagResult best_lag(std::span<const double> score, std::span<const double> reference,
                   std::size_t max_lag);

std::vector<double> median_aggregate(std::span<const std::vector<double>> repeats);

namespace strategy {
inline constexpr const char* kRawArgmin = "raw_argmin";
inline constexpr const char* kEmaArgmin = "ema_argmin";
inline constexpr const char* kQuantile = "quantile";
inline constexpr const char* kQuantilePatience = "quantile_patience";
inline constexpr const char* kLeadLag = "lead_lag";
inline constexpr const char* kLast = "last";
inline constexpr const char* kLossMin = "loss_min";
inline constexpr const char* kOracle = "oracle";
}  // namespace strategy

/// Strategies whose choice depends on the probe score only.
bool is_head_gradient_strategy(const std::string& name);

/// Runs every strategy. Loss-min needs aux_loss, Oracle needs metric; either is
/// omitted when its column is absent.
std::map<std::string, SelectionResult> evaluate_strategies(const TrajectorySeries& series,
                                                           const SelectionConfig& config);

struct SweepCell {
  int ema_span = 1;
  std::size_t tail_size = 1;
  std::uint64_t chosen_step = 0;
  double gap = 0.0;
};

struct SweepTable {
  std::vector<SweepCell> cells;  // grid order
  std::optional<std::size_t> universal_cell;
  std::size_t best_cell = 0;
};

struct GridPoint {
  int ema_span;
  std::size_t tail_size;
};

std::vector<GridPoint> default_sweep_grid();

/// EMA-argmin gap for each (k, s) cell. Requires metric on every record.
SweepTable sweep_configs(const TrajectorySeries& series, std::span<const GridPoint> grid,
                         const SelectionConfig& base = {});

}  // namespace gradprobe::select
