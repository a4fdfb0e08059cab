#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "gradprobe/stats_engine.hpp"
#include "gradprobe/synthetic_lab.hpp"
#include "gradprobe/trajectory_select.hpp"
#include "test_util.hpp"

using namespace gradprobe;
using namespace gradprobe::lab;

namespace {

std::vector<double> column(const io::SeriesTable& t, const std::string& name) {
  if (name == "score") {
    std::vector<double> v;
    for (const auto& r : t.rows) v.push_back(r.score);
    return v;
  }
  if (name == "metric") {
    std::vector<double> v;
    for (const auto& r : t.rows) v.push_back(*r.metric);
    return v;
  }
  return t.extras.at(name);
}

LatentStateModel noise_free() {
  LatentStateModel m;
  for (auto* p : {&m.gradient, &m.confidence, &m.entropy, &m.margin, &m.metric}) p->noise = 0.0;
  return m;
}

}  // namespace

TEST_CASE("noise-free latent readouts are exact affine images of the state") {
  const io::SeriesTable t = simulate_readouts(noise_free(), 400, 1);
  const auto state = column(t, "latent_state");
  CHECK(stats::pearson(column(t, "score"), state) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(stats::pearson(column(t, "confidence"), state) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(stats::pearson(column(t, "entropy"), state) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(stats::pearson(column(t, "score"), column(t, "metric")) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(t.rows[0].score == 5.0);
  CHECK(t.rows[10].score == doctest::Approx(5.0 - 0.1));
  CHECK(state[350] == state[399]);  // plateau
}

TEST_CASE("a lagged metric is recovered by the lag search") {
  LatentStateModel m = noise_free();
  m.metric.lag = 4;
  const io::SeriesTable t = simulate_readouts(m, 400, 1);
  const auto lag = select::best_lag(column(t, "score"), column(t, "metric"), 20);
  CHECK(lag.lag == 4);
  CHECK(lag.correlation == doctest::Approx(-1.0));

  m.metric.lag = 25;
  CHECK_THROWS_AS(simulate_readouts(m, 400, 1), Error);
}

TEST_CASE("noisy latent readouts keep a strong negative correlation and are seed-deterministic") {
  const io::SeriesTable a = simulate_readouts(LatentStateModel{}, 400, 3);
  const io::SeriesTable b = simulate_readouts(LatentStateModel{}, 400, 3);
  const io::SeriesTable c = simulate_readouts(LatentStateModel{}, 400, 4);
  CHECK(io::write_series_string(a) == io::write_series_string(b));
  CHECK(io::write_series_string(a) != io::write_series_string(c));
  CHECK(stats::pearson(column(a, "score"), column(a, "metric")) < -0.8);
}

TEST_CASE("classification run writes traces whose recomputed scores match") {
  const auto dir = testing::scratch_dir("lab_classification");
  SyntheticTask task;
  task.seed = 5;
  TrainConfig cfg;
  cfg.steps = 100;
  const SyntheticRun run = train_linear_head(task, cfg, dir);
  REQUIRE(run.checkpoints.size() == 21);
  const io::RunManifest manifest = io::read_manifest(dir / io::kManifestName);
  REQUIRE(manifest.checkpoints.size() == 21);
  CHECK(manifest.num_classes == 5);
  CHECK(manifest.feature_dim == 20);
  for (std::size_t i = 0; i < run.checkpoints.size(); ++i) {
    const io::ProbeTraceFile trace = io::read_trace(dir / manifest.checkpoints[i].files.front());
    CHECK(trace.step == run.checkpoints[i].step);
    CHECK(*trace.metric == run.checkpoints[i].heldout_accuracy);
    const double recomputed = probe::probe(trace.to_batch()).grad_fro;
    CHECK(std::abs(recomputed - run.checkpoints[i].grad_fro) <= 1e-6 * run.checkpoints[i].grad_fro);
  }
  // Step 0 has a zero head: uniform predictions and chance-level loss.
  CHECK(run.checkpoints[0].heldout_loss == doctest::Approx(std::log(5.0)));
  CHECK(run.checkpoints.back().heldout_accuracy > 0.6);
  const auto series = run.series();
  CHECK(stats::pearson(series.scores(), [&] {
          std::vector<double> m;
          for (const auto& r : series.records) m.push_back(*r.metric);
          return m;
        }()) < -0.8);
}

TEST_CASE("same seed gives identical trace bytes") {
  const auto a = testing::scratch_dir("lab_det_a");
  const auto b = testing::scratch_dir("lab_det_b");
  SyntheticTask task;
  task.seed = 9;
  TrainConfig cfg;
  cfg.steps = 20;
  train_linear_head(task, cfg, a);
  train_linear_head(task, cfg, b);
  for (const auto& entry : std::filesystem::directory_iterator(a)) {
    const auto name = entry.path().filename();
    CHECK(io::read_text_file(a / name) == io::read_text_file(b / name));
  }
}

TEST_CASE("zero learning rate freezes every readout") {
  SyntheticTask task;
  task.seed = 2;
  TrainConfig cfg;
  cfg.steps = 50;
  cfg.learning_rate = 0.0;
  const SyntheticRun run = train_linear_head(task, cfg, {});
  for (const auto& cp : run.checkpoints) {
    CHECK(cp.grad_fro == run.checkpoints[0].grad_fro);
    CHECK(cp.heldout_accuracy == run.checkpoints[0].heldout_accuracy);
    CHECK(cp.train_loss == run.checkpoints[0].train_loss);
  }
}

TEST_CASE("separable two-class problem reaches perfect accuracy with shrinking gradients") {
  SyntheticTask task;
  task.num_classes = 2;
  task.feature_dim = 4;
  task.center_scale = 5.0;
  task.spread = 0.1;
  task.anisotropy = 1.0;
  task.seed = 3;
  TrainConfig cfg;
  cfg.steps = 200;
  cfg.learning_rate = 0.05;
  const SyntheticRun run = train_linear_head(task, cfg, {});
  CHECK(run.checkpoints.back().heldout_accuracy == 1.0);
  for (std::size_t i = 1; i < run.checkpoints.size(); ++i) {
    CHECK(run.checkpoints[i].grad_fro < run.checkpoints[i - 1].grad_fro);
  }
}

TEST_CASE("training loss is monotone below the smoothness step-size bound") {
  SyntheticTask task;
  task.seed = 4;
  const TaskData data = make_task_data(task);
  const double lambda = feature_gram_max_eigenvalue(data.train_x);
  // Cross-entropy Hessian is bounded by (lambda / 2) I, so steps below 4 / lambda descend.
  TrainConfig cfg;
  cfg.steps = 150;
  cfg.probe_every = 1;
  cfg.learning_rate = 0.9 * 4.0 / lambda;
  const SyntheticRun run = train_linear_head(task, cfg, {});
  for (std::size_t i = 1; i < run.checkpoints.size(); ++i) {
    CHECK(run.checkpoints[i].train_loss <= run.checkpoints[i - 1].train_loss + 1e-12);
  }
  CHECK(lambda == doctest::Approx([&] {
          Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(data.train_x * data.train_x.transpose());
          return es.eigenvalues().maxCoeff() / static_cast<double>(data.train_x.cols());
        }()));
}

TEST_CASE("label noise touches only the training split") {
  SyntheticTask clean;
  clean.seed = 6;
  SyntheticTask noisy = clean;
  noisy.label_noise = 0.5;
  const TaskData a = make_task_data(clean);
  const TaskData b = make_task_data(noisy);
  CHECK(a.heldout_y == b.heldout_y);
  CHECK(a.train_y != b.train_y);
  CHECK(a.train_x == b.train_x);
}

TEST_CASE("regression run stores K repeats and the median score") {
  const auto dir = testing::scratch_dir("lab_regression");
  RegressionTask task;
  task.seed = 7;
  TrainConfig cfg;
  cfg.steps = 400;
  cfg.learning_rate = 0.01;
  const SyntheticRun run = make_regression_run(task, cfg, dir);
  const io::RunManifest manifest = io::read_manifest(dir / io::kManifestName);
  REQUIRE(manifest.checkpoints.size() == run.checkpoints.size());
  CHECK(manifest.task == probe::Mode::kRegression);
  for (std::size_t i = 0; i < manifest.checkpoints.size(); i += 10) {
    REQUIRE(manifest.checkpoints[i].files.size() == 3);
    std::vector<std::vector<double>> repeats;
    for (const auto& f : manifest.checkpoints[i].files) {
      const auto trace = io::read_trace(dir / f);
      CHECK(trace.mode == probe::Mode::kRegression);
      CHECK(*trace.metric == doctest::Approx(*run.series().records[i].metric));
      repeats.push_back({probe::probe(trace.to_batch()).grad_fro});
    }
    const double median = select::median_aggregate(repeats).front();
    CHECK(std::abs(median - run.checkpoints[i].grad_fro) <= 1e-6 * run.checkpoints[i].grad_fro);
  }
  const auto series = run.series();
  std::vector<double> metric;
  for (const auto& r : series.records) metric.push_back(*r.metric);
  CHECK(stats::spearman(series.scores(), metric) < -0.7);
}

TEST_CASE("metric corruption leaves probe scores unchanged") {
  const auto dir = testing::scratch_dir("lab_corrupt");
  SyntheticTask task;
  task.seed = 8;
  TrainConfig cfg;
  cfg.steps = 30;
  const SyntheticRun run = train_linear_head(task, cfg, dir);
  for (const auto& cp : run.manifest.checkpoints) {
    io::ProbeTraceFile trace = io::read_trace(dir / cp.files.front());
    const double before = probe::probe(trace.to_batch()).grad_fro;
    trace.metric = 0.0;
    trace.aux_loss.reset();
    CHECK(probe::probe(trace.to_batch()).grad_fro == before);
  }
}

TEST_CASE("divergent training is reported") {
  RegressionTask task;
  TrainConfig cfg;
  cfg.learning_rate = 100.0;
  try {
    make_regression_run(task, cfg, {});
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDiverged);
  }
  SyntheticTask bad;
  bad.anisotropy = 0.5;
  CHECK_THROWS_AS(make_task_data(bad), Error);
}
