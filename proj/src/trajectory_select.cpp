#include "gradprobe/trajectory_select.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "gradprobe/stats_engine.hpp"

namespace gradprobe::select {

bool TrajectorySeries::has_metric() const {
  return !records.empty() &&
         std::all_of(records.begin(), records.end(), [](const auto& r) { return r.metric.has_value(); });
}

bool TrajectorySeries::has_aux_loss() const {
  return !records.empty() && std::all_of(records.begin(), records.end(),
                                         [](const auto& r) { return r.aux_loss.has_value(); });
}

std::vector<double> TrajectorySeries::scores() const {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.score);
  return out;
}

void TrajectorySeries::validate() const {
  if (records.empty()) throw Error(ErrorCode::kEmptyWindow, "trajectory has no records");
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!std::isfinite(records[i].score)) {
      throw Error(ErrorCode::kNonFinite, "score at record " + std::to_string(i) + " is not finite");
    }
    if (i > 0 && records[i].step <= records[i - 1].step) {
      throw Error(ErrorCode::kNonMonotone,
                  "step " + std::to_string(records[i].step) + " at record " + std::to_string(i) +
                      " does not increase");
    }
  }
}

void SelectionConfig::validate() const {
  if (ema_span && ema_beta) {
    throw Error(ErrorCode::kConfigConflict, "both an EMA span and an EMA beta were supplied");
  }
  if (tail_size && tail_fraction) {
    throw Error(ErrorCode::kConfigConflict, "both a tail size and a tail fraction were supplied");
  }
  if (ema_span && *ema_span < 1) {
    throw Error(ErrorCode::kInvalidArgument, "EMA span must be a positive integer");
  }
  if (ema_beta && !(*ema_beta >= 0.0 && *ema_beta < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "EMA beta must lie in [0, 1)");
  }
  if (tail_size && *tail_size < 1) {
    throw Error(ErrorCode::kInvalidArgument, "tail size must be positive");
  }
  if (tail_fraction && !(*tail_fraction > 0.0 && *tail_fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "tail fraction must lie in (0, 1]");
  }
  if (!(quantile > 0.0 && quantile <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "quantile must lie in (0, 1]");
  }
  if (repeats < 1) throw Error(ErrorCode::kInvalidArgument, "repeats must be positive");
}

double SelectionConfig::effective_beta() const {
  if (ema_beta) return *ema_beta;
  if (ema_span) return 1.0 - 2.0 / (static_cast<double>(*ema_span) + 1.0);
  return 0.0;
}

std::vector<double> ema_smooth(std::span<const double> values, const SelectionConfig& config) {
  config.validate();
  if (values.empty()) throw Error(ErrorCode::kInvalidArgument, "cannot smooth an empty series");
  const double beta = config.effective_beta();
  std::vector<double> out(values.begin(), values.end());
  if (beta == 0.0) return out;
  for (std::size_t t = 1; t < out.size(); ++t) {
    out[t] = beta * out[t - 1] + (1.0 - beta) * values[t];
  }
  return out;
}

IndexRange tail_window(std::size_t n, const SelectionConfig& config) {
  config.validate();
  std::size_t m = 0;
  if (config.tail_size) {
    m = std::min(*config.tail_size, n);
  } else {
    const double fraction = config.tail_fraction.value_or(kDefaultTailFraction);
    // The small offset keeps exact products such as 0.2 * 10 from rounding up.
    m = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
    m = std::clamp<std::size_t>(m, n == 0 ? 0 : 1, n);
  }
  return {n - m, n};
}

namespace {

std::size_t argmin_in(std::span<const double> values, IndexRange window) {
  std::size_t best = window.begin;
  for (std::size_t i = window.begin + 1; i < window.end; ++i) {
    if (values[i] < values[best]) best = i;
  }
  return best;
}

SelectionResult make_result(const TrajectorySeries& series, std::string name, std::size_t index,
                            std::vector<double> smoothed) {
  SelectionResult result;
  result.strategy = std::move(name);
  result.chosen_index = index;
  result.chosen_step = series.records[index].step;
  result.smoothed = std::move(smoothed);
  return result;
}

IndexRange checked_window(const TrajectorySeries& series, const SelectionConfig& config) {
  series.validate();
  const IndexRange window = tail_window(series.size(), config);
  if (window.size() == 0) throw Error(ErrorCode::kEmptyWindow, "tail window is empty");
  return window;
}

SelectionResult quantile_select(const TrajectorySeries& series, const SelectionConfig& config,
                                std::size_t patience, std::string name) {
  const IndexRange window = checked_window(series, config);
  const std::vector<double> scores = series.scores();
  std::vector<double> smoothed = ema_smooth(scores, config);

  std::vector<double> sorted(smoothed.begin() + static_cast<std::ptrdiff_t>(window.begin),
                             smoothed.begin() + static_cast<std::ptrdiff_t>(window.end));
  std::sort(sorted.begin(), sorted.end());
  const auto m = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(config.quantile * m - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  const double threshold = sorted[rank - 1];

  std::vector<bool> in_set(series.size(), false);
  std::vector<std::size_t> candidates;
  for (std::size_t i = window.begin; i < window.end; ++i) {
    if (smoothed[i] <= threshold) {
      in_set[i] = true;
      candidates.push_back(i);
    }
  }

  // A candidate qualifies once it and the following records stay in the set
  // for `patience` consecutive records (the candidate itself counts as one).
  const std::size_t needed = std::max<std::size_t>(patience, 1);
  std::optional<std::size_t> chosen;
  for (const std::size_t i : candidates) {
    std::size_t run = 0;
    while (i + run < window.end && in_set[i + run] && run < needed) ++run;
    if (run >= needed) {
      chosen = i;
      break;
    }
  }
  const std::size_t index = chosen.value_or(argmin_in(smoothed, window));
  SelectionResult result = make_result(series, std::move(name), index, std::move(smoothed));
  result.candidates = std::move(candidates);
  return result;
}

bool better(double a, double b, Orientation orientation) {
  return orientation == Orientation::kHigherIsBetter ? a > b : a < b;
}

std::size_t best_metric_in(const TrajectorySeries& series, IndexRange range,
                           Orientation orientation) {
  std::size_t best = range.begin;
  for (std::size_t i = range.begin + 1; i < range.end; ++i) {
    if (better(*series.records[i].metric, *series.records[best].metric, orientation)) best = i;
  }
  return best;
}

double oriented_gap(double oracle, double selected, Orientation orientation) {
  return orientation == Orientation::kHigherIsBetter ? oracle - selected : selected - oracle;
}

}  // namespace

SelectionResult select_argmin(const TrajectorySeries& series, const SelectionConfig& config) {
  const IndexRange window = checked_window(series, config);
  const std::vector<double> scores = series.scores();
  std::vector<double> smoothed = ema_smooth(scores, config);
  const std::size_t index = argmin_in(smoothed, window);
  SelectionResult result = make_result(series, strategy::kEmaArgmin, index, std::move(smoothed));
  result.candidates = {index};
  return result;
}

SelectionResult select_quantile_patience(const TrajectorySeries& series,
                                         const SelectionConfig& config) {
  return quantile_select(series, config, config.patience, strategy::kQuantilePatience);
}

LagResult best_lag(std::span<const double> score, std::span<const double> reference,
                   std::size_t max_lag) {
  if (score.size() != reference.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "lag series lengths differ: " + std::to_string(score.size()) + " vs " +
                    std::to_string(reference.size()));
  }
  const auto n = static_cast<long>(score.size());
  LagResult best;
  bool found = false;
  for (long k = 0; k <= static_cast<long>(2 * max_lag); ++k) {
    // Visit 0, +1, -1, +2, -2, ... so ties resolve toward zero lag.
    const long lag = (k % 2 == 1) ? (k + 1) / 2 : -(k / 2);
    const long overlap = n - std::labs(lag);
    if (overlap < 3) {
      best.warning = true;
      continue;
    }
    std::vector<double> xs;
    std::vector<double> ys;
    xs.reserve(static_cast<std::size_t>(overlap));
    ys.reserve(static_cast<std::size_t>(overlap));
    for (long t = std::max(0L, -lag); t < std::min(n, n - lag); ++t) {
      xs.push_back(score[static_cast<std::size_t>(t)]);
      ys.push_back(reference[static_cast<std::size_t>(t + lag)]);
    }
    double r = 0.0;
    try {
      r = stats::pearson(xs, ys);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kDegenerateSample) throw;
      continue;
    }
    if (!found || std::abs(r) > std::abs(best.correlation) + 1e-12) {
      best.lag = static_cast<int>(lag);
      best.correlation = r;
      found = true;
    }
  }
  if (!found) {
    best.lag = 0;
    best.correlation = 0.0;
    best.warning = true;
  }
  return best;
}

std::vector<double> median_aggregate(std::span<const std::vector<double>> repeats) {
  if (repeats.empty()) throw Error(ErrorCode::kInvalidArgument, "median of zero repeats");
  const std::size_t n = repeats.front().size();
  for (std::size_t k = 1; k < repeats.size(); ++k) {
    if (repeats[k].size() != n) {
      throw Error(ErrorCode::kShapeMismatch,
                  "repeat " + std::to_string(k) + " has length " + std::to_string(repeats[k].size()) +
                      ", expected " + std::to_string(n));
    }
  }
  std::vector<double> out(n);
  std::vector<double> column(repeats.size());
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t k = 0; k < repeats.size(); ++k) column[k] = repeats[k][t];
    std::sort(column.begin(), column.end());
    const std::size_t mid = column.size() / 2;
    out[t] = column.size() % 2 == 1 ? column[mid] : 0.5 * (column[mid - 1] + column[mid]);
  }
  return out;
}

bool is_head_gradient_strategy(const std::string& name) {
  return name == strategy::kRawArgmin || name == strategy::kEmaArgmin ||
         name == strategy::kQuantile || name == strategy::kQuantilePatience ||
         name == strategy::kLeadLag;
}

std::map<std::string, SelectionResult> evaluate_strategies(const TrajectorySeries& series,
                                                           const SelectionConfig& config) {
  const IndexRange window = checked_window(series, config);
  std::map<std::string, SelectionResult> results;

  SelectionConfig raw_config = config;
  raw_config.ema_span = 1;
  raw_config.ema_beta.reset();
  SelectionResult raw = select_argmin(series, raw_config);
  raw.strategy = strategy::kRawArgmin;
  results.emplace(strategy::kRawArgmin, std::move(raw));

  results.emplace(strategy::kEmaArgmin, select_argmin(series, config));
  results.emplace(strategy::kQuantile, quantile_select(series, config, 0, strategy::kQuantile));
  SelectionResult patient = select_quantile_patience(series, config);

  SelectionResult lead_lag = patient;
  lead_lag.strategy = strategy::kLeadLag;
  if (series.has_aux_loss()) {
    std::vector<double> aux;
    aux.reserve(series.size());
    for (const auto& r : series.records) aux.push_back(*r.aux_loss);
    const LagResult lag = best_lag(patient.smoothed, aux, config.max_lag);
    const long shifted = std::clamp(static_cast<long>(patient.chosen_index) + lag.lag,
                                    static_cast<long>(window.begin),
                                    static_cast<long>(window.end) - 1);
    lead_lag.chosen_index = static_cast<std::size_t>(shifted);
    lead_lag.lag = lag.lag;
    lead_lag.lag_warning = lag.warning;
  } else {
    lead_lag.lag = 0;
    lead_lag.lag_warning = true;
  }
  lead_lag.chosen_step = series.records[lead_lag.chosen_index].step;
  results.emplace(strategy::kQuantilePatience, std::move(patient));
  results.emplace(strategy::kLeadLag, std::move(lead_lag));

  results.emplace(strategy::kLast, make_result(series, strategy::kLast, window.end - 1, {}));

  if (series.has_aux_loss()) {
    std::vector<double> aux;
    for (const auto& r : series.records) aux.push_back(*r.aux_loss);
    results.emplace(strategy::kLossMin,
                    make_result(series, strategy::kLossMin, argmin_in(aux, window), {}));
  }

  if (series.has_metric()) {
    const std::size_t oracle = best_metric_in(series, window, config.orientation);
    const std::size_t global = best_metric_in(series, {0, series.size()}, config.orientation);
    results.emplace(strategy::kOracle, make_result(series, strategy::kOracle, oracle, {}));
    const double oracle_metric = *series.records[oracle].metric;
    const double global_metric = *series.records[global].metric;
    for (auto& [name, result] : results) {
      const double selected = *series.records[result.chosen_index].metric;
      result.gap = oriented_gap(oracle_metric, selected, config.orientation);
      result.global_gap = oriented_gap(global_metric, selected, config.orientation);
      result.oracle_step = series.records[oracle].step;
    }
  }
  return results;
}

std::vector<GridPoint> default_sweep_grid() {
  std::vector<GridPoint> grid;
  for (const int k : {1, 3, 5, 9}) {
    for (const std::size_t s : {60, 80, 100}) grid.push_back({k, s});
  }
  return grid;
}

SweepTable sweep_configs(const TrajectorySeries& series, std::span<const GridPoint> grid,
                         const SelectionConfig& base) {
  if (!series.has_metric()) {
    throw Error(ErrorCode::kInvalidArgument, "sweep requires a metric on every record");
  }
  if (grid.empty()) throw Error(ErrorCode::kInvalidArgument, "sweep grid is empty");
  SweepTable table;
  for (const GridPoint& point : grid) {
    SelectionConfig config = base;
    config.ema_span = point.ema_span;
    config.ema_beta.reset();
    config.tail_size = point.tail_size;
    config.tail_fraction.reset();
    const SelectionResult chosen = select_argmin(series, config);
    const IndexRange window = tail_window(series.size(), config);
    const std::size_t oracle = best_metric_in(series, window, config.orientation);
    const double gap = oriented_gap(*series.records[oracle].metric,
                                    *series.records[chosen.chosen_index].metric, config.orientation);
    if (point.ema_span == 3 && point.tail_size == 80) table.universal_cell = table.cells.size();
    table.cells.push_back({point.ema_span, point.tail_size, chosen.chosen_step, gap});
  }
  for (std::size_t i = 1; i < table.cells.size(); ++i) {
    if (table.cells[i].gap < table.cells[table.best_cell].gap) table.best_cell = i;
  }
  return table;
}

}  // namespace gradprobe::select
