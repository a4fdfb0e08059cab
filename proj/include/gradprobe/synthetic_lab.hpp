#pragma once

// Ground-truth-bearing trajectories at desk scale.
//
// Two generators:
//   * a latent-state simulator, where every readout is a noisy, possibly
//     lagged affine projection of one hidden quality path S(t);
//   * small gradient-descent trainers for a linear head on synthetic
//     features, which write real probe traces plus exact held-out quality.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gradprobe/probe_core.hpp"
#include "gradprobe/trace_io.hpp"

namespace gradprobe::lab {

struct ReadoutProjection {
  double sign = 1.0;
  double scale = 1.0;
  double offset = 0.0;
  double noise = 0.0;
  std::size_t lag = 0;
};

struct LatentStateModel {
  double initial = 0.0;
  double drift = 0.01;        // per-step increase of S before the plateau
  double state_noise = 0.0;   // std of the per-step innovation of S
  std::size_t plateau_step = 300;
  std::size_t max_lag = 20;
  ReadoutProjection gradient{-1.0, 1.0, 5.0, 0.05, 0};
  ReadoutProjection confidence{1.0, 0.2, 0.2, 0.01, 0};
  ReadoutProjection entropy{-1.0, 0.5, 2.0, 0.02, 0};
  ReadoutProjection margin{1.0, 0.2, 0.0, 0.01, 0};
  ReadoutProjection metric{1.0, 0.2, 0.3, 0.01, 0};

  void validate() const;
};

/// Columns: step, score (gradient-like), metric, aux_loss (absent), then
/// latent_state, confidence, entropy, margin.
io::SeriesTable simulate_readouts(const LatentStateModel& model, std::size_t n_steps,
                                  std::uint64_t seed);

struct SyntheticTask {
  std::uint32_t num_classes = 5;
  std::uint32_t feature_dim = 20;
  double center_scale = 1.0;  // std of the class-center coordinates
  double spread = 1.0;        // within-class std
  double anisotropy = 30.0;   // max/min ratio of per-coordinate std (centers scale alongside)
  std::size_t train_size = 500;
  std::size_t heldout_size = 2000;
  std::size_t probe_batch = 64;
  double label_noise = 0.0;   // probability of uniform relabeling (train split)
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainConfig {
  std::size_t steps = 400;
  double learning_rate = 0.05;
  std::size_t probe_every = 5;
  double init_scale = 0.0;    // std of the initial head entries
};

struct CheckpointRecord {
  std::uint64_t step = 0;
  double train_loss = 0.0;
  double heldout_accuracy = 0.0;  // classification
  double heldout_loss = 0.0;
  double grad_fro = 0.0;          // probe on the in-memory (f64) head; median over repeats
};

struct SyntheticRun {
  io::RunManifest manifest;
  std::vector<CheckpointRecord> checkpoints;

  /// step, score = grad_fro, metric, aux_loss = held-out loss.
  select::TrajectorySeries series() const;
};

/// Materialized data of a classification task (features are columns).
struct TaskData {
  Eigen::MatrixXd train_x;
  std::vector<std::uint32_t> train_y;
  Eigen::MatrixXd heldout_x;
  std::vector<std::uint32_t> heldout_y;
  Eigen::MatrixXd probe_x;
  std::vector<std::uint32_t> probe_y;
};

TaskData make_task_data(const SyntheticTask& task);

/// Largest eigenvalue of X X^T / N; gradient descent on the mean loss is
/// monotone for lr < 2 / L with L = lambda/2 (cross-entropy) or lambda (squared loss).
double feature_gram_max_eigenvalue(const Eigen::MatrixXd& features);

/// Writes one trace per checkpoint plus manifest.json into `out_dir` (skipped
/// when `out_dir` is empty).
SyntheticRun train_linear_head(const SyntheticTask& task, const TrainConfig& config,
                               const std::filesystem::path& out_dir);

struct RegressionTask {
  std::uint32_t num_outputs = 4;
  std::uint32_t feature_dim = 16;
  std::size_t train_size = 400;
  std::size_t heldout_size = 2000;
  std::size_t probe_batch = 64;
  double target_noise = 0.1;
  double noise_scale_low = 0.1;   // per-trace multiplier of target_noise
  double noise_scale_high = 0.7;
  std::size_t repeats = 3;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Metric is the negative held-out mean squared error; K traces per probe step.
SyntheticRun make_regression_run(const RegressionTask& task, const TrainConfig& config,
                                 const std::filesystem::path& out_dir);

}  // namespace gradprobe::lab
