#include "gradprobe/synthetic_lab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include "gradprobe/trajectory_select.hpp"

namespace gradprobe::lab {
namespace {

using Matrix = Eigen::MatrixXd;

Matrix gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * normal(rng);
  return m;
}

void check_projection(const ReadoutProjection& p, std::size_t max_lag, const char* name) {
  if (!(p.noise >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, std::string(name) + " readout noise must be >= 0");
  }
  if (p.lag > max_lag) {
    throw Error(ErrorCode::kInvalidArgument, std::string(name) + " readout lag exceeds max_lag");
  }
}

std::string trace_name(std::uint64_t step, std::optional<std::size_t> repeat) {
  char buf[64];
  if (repeat) {
    std::snprintf(buf, sizeof(buf), "step_%06llu_r%zu.hgp", static_cast<unsigned long long>(step), *repeat);
  } else {
    std::snprintf(buf, sizeof(buf), "step_%06llu.hgp", static_cast<unsigned long long>(step));
  }
  return buf;
}

double accuracy(const Matrix& head, const Matrix& x, const std::vector<std::uint32_t>& y) {
  const Matrix logits = head * x;
  std::size_t correct = 0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    Eigen::Index best = 0;
    logits.col(j).maxCoeff(&best);
    if (static_cast<std::uint32_t>(best) == y[static_cast<std::size_t>(j)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(y.size());
}

probe::ProbeBatch classification_batch(const Matrix& head, const Matrix& x,
                                       const std::vector<std::uint32_t>& y) {
  probe::ProbeBatch batch;
  batch.mode = probe::Mode::kClassification;
  batch.head = head;
  batch.features = x;
  batch.labels = y;
  return batch;
}

void prepare_dir(const std::filesystem::path& out_dir) {
  if (out_dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + out_dir.string() + ": " + ec.message());
}

std::vector<std::uint64_t> probe_steps(const TrainConfig& config) {
  if (config.probe_every < 1) throw Error(ErrorCode::kInvalidArgument, "probe_every must be >= 1");
  std::vector<std::uint64_t> steps;
  for (std::size_t s = 0; s <= config.steps; s += config.probe_every) steps.push_back(s);
  return steps;
}

}  // namespace

void LatentStateModel::validate() const {
  if (!(state_noise >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "state noise must be >= 0");
  check_projection(gradient, max_lag, "gradient");
  check_projection(confidence, max_lag, "confidence");
  check_projection(entropy, max_lag, "entropy");
  check_projection(margin, max_lag, "margin");
  check_projection(metric, max_lag, "metric");
}

io::SeriesTable simulate_readouts(const LatentStateModel& model, std::size_t n_steps,
                                  std::uint64_t seed) {
  model.validate();
  if (n_steps < 2) throw Error(ErrorCode::kInvalidArgument, "simulation needs at least 2 steps");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> state(n_steps);
  state[0] = model.initial;
  for (std::size_t t = 1; t < n_steps; ++t) {
    const double drift = t < model.plateau_step ? model.drift : 0.0;
    state[t] = state[t - 1] + drift + model.state_noise * normal(rng);
  }

  const auto project = [&](const ReadoutProjection& p, std::size_t t) {
    const std::size_t source = t >= p.lag ? t - p.lag : 0;
    const double noise = p.noise > 0.0 ? p.noise * normal(rng) : 0.0;
    return p.sign * p.scale * state[source] + p.offset + noise;
  };

  io::SeriesTable table;
  table.extra_columns = {"latent_state", "confidence", "entropy", "margin"};
  for (const auto& name : table.extra_columns) table.extras[name].reserve(n_steps);
  for (std::size_t t = 0; t < n_steps; ++t) {
    select::TrajectoryRecord rec;
    rec.step = t;
    rec.score = project(model.gradient, t);
    rec.metric = project(model.metric, t);
    table.extras["latent_state"].push_back(state[t]);
    table.extras["confidence"].push_back(project(model.confidence, t));
    table.extras["entropy"].push_back(project(model.entropy, t));
    table.extras["margin"].push_back(project(model.margin, t));
    table.rows.push_back(rec);
  }
  return table;
}

void SyntheticTask::validate() const {
  if (num_classes < 2) throw Error(ErrorCode::kInvalidArgument, "need at least 2 classes");
  if (feature_dim < 1) throw Error(ErrorCode::kInvalidArgument, "feature_dim must be >= 1");
  if (train_size < num_classes || heldout_size < num_classes || probe_batch < 1 ||
      probe_batch > train_size) {
    throw Error(ErrorCode::kInvalidArgument,
                "sizes must be >= the class count and the probe batch must fit in train data");
  }
  if (!(spread > 0.0)) throw Error(ErrorCode::kInvalidArgument, "within-class spread must be > 0");
  if (!(anisotropy >= 1.0)) throw Error(ErrorCode::kInvalidArgument, "anisotropy must be >= 1");
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "label noise must lie in [0, 1]");
  }
}

TaskData make_task_data(const SyntheticTask& task) {
  task.validate();
  std::mt19937_64 rng(task.seed);
  const auto c = static_cast<Eigen::Index>(task.num_classes);
  const auto d = static_cast<Eigen::Index>(task.feature_dim);
  // Per-coordinate std, geometrically spaced so that max/min = anisotropy.
  Eigen::VectorXd scale(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double t = d > 1 ? static_cast<double>(j) / static_cast<double>(d - 1) : 0.5;
    scale(j) = std::pow(task.anisotropy, t - 0.5);
  }
  const Matrix centers = scale.asDiagonal() * gaussian(rng, d, c, task.center_scale);

  const auto draw = [&](std::size_t n, Matrix& x, std::vector<std::uint32_t>& y) {
    x = scale.asDiagonal() * gaussian(rng, d, static_cast<Eigen::Index>(n), task.spread);
    y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Balanced classes in a fixed cyclic order.
      y[i] = static_cast<std::uint32_t>(i % task.num_classes);
      x.col(static_cast<Eigen::Index>(i)) += centers.col(y[i]);
    }
  };

  TaskData data;
  draw(task.train_size, data.train_x, data.train_y);
  draw(task.heldout_size, data.heldout_x, data.heldout_y);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& label : data.train_y) {
    if (unit(rng) < task.label_noise) {
      label = static_cast<std::uint32_t>(std::min<double>(unit(rng) * task.num_classes,
                                                          task.num_classes - 1));
    }
  }

  // The probe batch is drawn once from the training split and reused at every checkpoint.
  std::vector<std::size_t> order(task.train_size);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; i < task.probe_batch; ++i) {
    const auto j = i + static_cast<std::size_t>(unit(rng) * static_cast<double>(order.size() - i));
    std::swap(order[i], order[std::min(j, order.size() - 1)]);
  }
  data.probe_x.resize(d, static_cast<Eigen::Index>(task.probe_batch));
  data.probe_y.resize(task.probe_batch);
  for (std::size_t i = 0; i < task.probe_batch; ++i) {
    data.probe_x.col(static_cast<Eigen::Index>(i)) = data.train_x.col(static_cast<Eigen::Index>(order[i]));
    data.probe_y[i] = data.train_y[order[i]];
  }
  return data;
}

double feature_gram_max_eigenvalue(const Eigen::MatrixXd& features) {
  const Matrix gram = features * features.transpose() / static_cast<double>(features.cols());
  Eigen::SelfAdjointEigenSolver<Matrix> solver(gram, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().maxCoeff();
}

select::TrajectorySeries SyntheticRun::series() const {
  select::TrajectorySeries series;
  const bool regression = manifest.task == probe::Mode::kRegression;
  for (const auto& cp : checkpoints) {
    select::TrajectoryRecord rec;
    rec.step = cp.step;
    rec.score = cp.grad_fro;
    rec.metric = regression ? -2.0 * cp.heldout_loss / manifest.num_classes : cp.heldout_accuracy;
    rec.aux_loss = cp.heldout_loss;
    series.records.push_back(rec);
  }
  return series;
}

SyntheticRun train_linear_head(const SyntheticTask& task, const TrainConfig& config,
                               const std::filesystem::path& out_dir) {
  const TaskData data = make_task_data(task);
  const std::vector<std::uint64_t> steps = probe_steps(config);
  prepare_dir(out_dir);

  std::mt19937_64 rng(task.seed ^ 0x5EED5EED5EED5EEDULL);
  Matrix head = gaussian(rng, task.num_classes, task.feature_dim, config.init_scale);

  SyntheticRun run;
  run.manifest.run_id = "linear-head-seed" + std::to_string(task.seed);
  run.manifest.task = probe::Mode::kClassification;
  run.manifest.num_classes = task.num_classes;
  run.manifest.feature_dim = task.feature_dim;
  run.manifest.probe_batch_size = static_cast<std::uint32_t>(task.probe_batch);
  run.manifest.orientation = select::Orientation::kHigherIsBetter;
  run.manifest.notes = "synthetic Gaussian-cluster classification; full-batch gradient descent, lr=" +
                       io::format_number(config.learning_rate);

  probe::ProbeBatch train = classification_batch(head, data.train_x, data.train_y);
  std::size_t next = 0;
  for (std::size_t step = 0; step <= config.steps; ++step) {
    train.head = head;
    const double train_loss = probe::batch_loss(train);
    if (!std::isfinite(train_loss)) {
      throw Error(ErrorCode::kDiverged, "training loss became non-finite at step " + std::to_string(step));
    }
    if (next < steps.size() && steps[next] == step) {
      const probe::ProbeBatch probe_batch = classification_batch(head, data.probe_x, data.probe_y);
      const probe::ProbeBatch heldout = classification_batch(head, data.heldout_x, data.heldout_y);
      CheckpointRecord rec;
      rec.step = step;
      rec.train_loss = train_loss;
      rec.heldout_accuracy = accuracy(head, data.heldout_x, data.heldout_y);
      rec.heldout_loss = probe::batch_loss(heldout);
      rec.grad_fro = probe::gradient_norms(probe::head_gradient(probe_batch)).fro;
      if (!out_dir.empty()) {
        const std::string name = trace_name(step, std::nullopt);
        io::write_trace(io::ProbeTraceFile::from_batch(probe_batch, step, rec.heldout_accuracy,
                                                       rec.heldout_loss),
                        out_dir / name);
        run.manifest.checkpoints.push_back({step, {name}});
      }
      run.checkpoints.push_back(rec);
      ++next;
    }
    if (step < config.steps) {
      const Matrix gradient = probe::head_gradient(train);
      head -= config.learning_rate * gradient;
      if (!head.allFinite()) {
        throw Error(ErrorCode::kDiverged, "head weights became non-finite at step " + std::to_string(step));
      }
    }
  }
  if (!out_dir.empty()) io::write_manifest(run.manifest, out_dir / io::kManifestName);
  return run;
}

void RegressionTask::validate() const {
  if (num_outputs < 1 || feature_dim < 1) {
    throw Error(ErrorCode::kInvalidArgument, "regression task needs outputs and features");
  }
  if (train_size < 2 || heldout_size < 1 || probe_batch < 1 || probe_batch > train_size) {
    throw Error(ErrorCode::kInvalidArgument, "invalid regression task sizes");
  }
  if (!(target_noise >= 0.0) || !(noise_scale_low >= 0.0) || !(noise_scale_high >= noise_scale_low)) {
    throw Error(ErrorCode::kInvalidArgument, "noise parameters must satisfy 0 <= low <= high");
  }
  if (repeats < 1) throw Error(ErrorCode::kInvalidArgument, "repeats must be >= 1");
}

SyntheticRun make_regression_run(const RegressionTask& task, const TrainConfig& config,
                                 const std::filesystem::path& out_dir) {
  task.validate();
  const std::vector<std::uint64_t> steps = probe_steps(config);
  prepare_dir(out_dir);

  std::mt19937_64 rng(task.seed);
  const auto c = static_cast<Eigen::Index>(task.num_outputs);
  const auto d = static_cast<Eigen::Index>(task.feature_dim);
  const Matrix truth = gaussian(rng, c, d, 1.0 / std::sqrt(static_cast<double>(d)));
  const auto draw = [&](std::size_t n, Matrix& x, Matrix& y) {
    x = gaussian(rng, d, static_cast<Eigen::Index>(n), 1.0);
    y = truth * x + gaussian(rng, c, static_cast<Eigen::Index>(n), task.target_noise);
  };
  Matrix train_x, train_y, heldout_x, heldout_y;
  draw(task.train_size, train_x, train_y);
  draw(task.heldout_size, heldout_x, heldout_y);
  const Matrix probe_x = train_x.leftCols(static_cast<Eigen::Index>(task.probe_batch));
  const Matrix probe_clean = truth * probe_x;

  Matrix head = gaussian(rng, c, d, config.init_scale);
  std::uniform_real_distribution<double> scale_dist(task.noise_scale_low, task.noise_scale_high);

  SyntheticRun run;
  run.manifest.run_id = "linear-regression-seed" + std::to_string(task.seed);
  run.manifest.task = probe::Mode::kRegression;
  run.manifest.num_classes = task.num_outputs;
  run.manifest.feature_dim = task.feature_dim;
  run.manifest.probe_batch_size = static_cast<std::uint32_t>(task.probe_batch);
  run.manifest.orientation = select::Orientation::kHigherIsBetter;
  run.manifest.notes = "synthetic linear regression; metric = -held-out MSE; " +
                       std::to_string(task.repeats) + " noise-scale repeats per checkpoint";

  probe::ProbeBatch train;
  train.mode = probe::Mode::kRegression;
  train.features = train_x;
  train.targets = train_y;
  probe::ProbeBatch heldout;
  heldout.mode = probe::Mode::kRegression;
  heldout.features = heldout_x;
  heldout.targets = heldout_y;

  std::size_t next = 0;
  for (std::size_t step = 0; step <= config.steps; ++step) {
    train.head = head;
    const double train_loss = probe::batch_loss(train);
    if (!std::isfinite(train_loss)) {
      throw Error(ErrorCode::kDiverged, "training loss became non-finite at step " + std::to_string(step));
    }
    if (next < steps.size() && steps[next] == step) {
      heldout.head = head;
      CheckpointRecord rec;
      rec.step = step;
      rec.train_loss = train_loss;
      rec.heldout_loss = probe::batch_loss(heldout);
      const double mse = 2.0 * rec.heldout_loss / static_cast<double>(c);
      io::ManifestCheckpoint entry{step, {}};
      std::vector<std::vector<double>> repeats;
      for (std::size_t k = 0; k < task.repeats; ++k) {
        probe::ProbeBatch batch;
        batch.mode = probe::Mode::kRegression;
        batch.head = head;
        batch.features = probe_x;
        const double sigma = scale_dist(rng) * task.target_noise;
        batch.targets = probe_clean + gaussian(rng, c, probe_x.cols(), sigma);
        repeats.push_back({probe::gradient_norms(probe::head_gradient(batch)).fro});
        if (!out_dir.empty()) {
          const std::string name = trace_name(step, k);
          io::write_trace(io::ProbeTraceFile::from_batch(batch, step, -mse, rec.heldout_loss),
                          out_dir / name);
          entry.files.push_back(name);
        }
      }
      rec.grad_fro = select::median_aggregate(repeats).front();
      if (!out_dir.empty()) run.manifest.checkpoints.push_back(std::move(entry));
      run.checkpoints.push_back(rec);
      ++next;
    }
    if (step < config.steps) {
      head -= config.learning_rate * probe::head_gradient(train);
      if (!head.allFinite()) {
        throw Error(ErrorCode::kDiverged, "head weights became non-finite at step " + std::to_string(step));
      }
    }
  }
  if (!out_dir.empty()) io::write_manifest(run.manifest, out_dir / io::kManifestName);
  return run;
}

}  // namespace gradprobe::lab
