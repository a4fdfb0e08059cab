#include "gradprobe/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>

#include "CLI11.hpp"

#include "gradprobe/probe_core.hpp"
#include "gradprobe/stats_engine.hpp"
#include "gradprobe/synthetic_lab.hpp"
#include "gradprobe/trace_io.hpp"
#include "gradprobe/trajectory_select.hpp"

namespace gradprobe::cli {

namespace fs = std::filesystem;
using io::Json;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIo:
      return kExitIo;
    case ErrorCode::kDegenerateSample:
    case ErrorCode::kUnstableInterval:
    case ErrorCode::kCollinear:
      return kExitDegenerate;
    default:
      return kExitValidation;
  }
}

namespace {

const std::vector<std::string> kReadoutColumns = {
    "grad_fro", "grad_l1", "grad_linf", "fisher_trace", "score_z", "score_w",
    "loss",     "confidence", "entropy", "margin"};

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double readout(const probe::ProbeScore& s, const std::string& name) {
  if (name == "grad_fro" || name == "fro") return s.grad_fro;
  if (name == "grad_l1" || name == "l1") return s.grad_l1;
  if (name == "grad_linf" || name == "linf") return s.grad_linf;
  if (name == "fisher_trace" || name == "fisher") return s.fisher_trace.value_or(kNaN);
  if (name == "score_z") return s.score_z;
  if (name == "score_w") return s.score_w;
  if (name == "loss") return s.loss;
  if (!s.readouts) return kNaN;
  if (name == "confidence") return s.readouts->confidence;
  if (name == "entropy") return s.readouts->entropy;
  if (name == "margin") return s.readouts->margin;
  throw Error(ErrorCode::kInvalidArgument, "unknown readout '" + name + "'");
}

// Options shared by the selection-style subcommands.
struct SelectionOptions {
  int ema_span = 3;
  double ema_beta = 0.0;
  std::size_t tail_size = 80;
  double tail_fraction = 0.0;
  double quantile = 0.1;
  std::size_t patience = 3;
  std::size_t max_lag = 10;
  std::size_t repeats = 1;
  bool lower_is_better = false;
  bool higher_is_better = false;
  CLI::Option* span_opt = nullptr;
  CLI::Option* beta_opt = nullptr;
  CLI::Option* size_opt = nullptr;
  CLI::Option* fraction_opt = nullptr;

  void add(CLI::App* app) {
    span_opt = app->add_option("--ema-span", ema_span, "EMA span k (beta = 1 - 2/(k+1)); 1 disables smoothing")
                   ->capture_default_str();
    beta_opt = app->add_option("--ema-beta", ema_beta, "EMA decay beta in [0,1); replaces --ema-span");
    size_opt = app->add_option("--tail-size", tail_size, "tail window: last s records")->capture_default_str();
    fraction_opt = app->add_option("--tail-fraction", tail_fraction,
                                   "tail window: last ceil(f*n) records; replaces --tail-size");
    app->add_option("--quantile", quantile, "candidate quantile q (nearest rank)")->capture_default_str();
    app->add_option("--patience", patience, "consecutive candidate records required")->capture_default_str();
    app->add_option("--max-lag", max_lag, "lead-lag search range +/-L records")->capture_default_str();
    app->add_option("--repeats", repeats, "probe repeats per checkpoint (median aggregation)")
        ->capture_default_str();
    auto* lower = app->add_flag("--lower-is-better", lower_is_better, "metric is lower-is-better (e.g. FID)");
    auto* higher = app->add_flag("--higher-is-better", higher_is_better, "metric is higher-is-better (default)");
    lower->excludes(higher);
  }

  select::SelectionConfig config() const {
    select::SelectionConfig c;
    c.ema_span.reset();
    c.tail_size.reset();
    if (*beta_opt) c.ema_beta = ema_beta;
    if (*span_opt || !*beta_opt) c.ema_span = ema_span;
    if (*fraction_opt) c.tail_fraction = tail_fraction;
    if (*size_opt || !*fraction_opt) c.tail_size = tail_size;
    c.quantile = quantile;
    c.patience = patience;
    c.max_lag = max_lag;
    c.repeats = repeats;
    c.orientation = lower_is_better ? select::Orientation::kLowerIsBetter
                                    : select::Orientation::kHigherIsBetter;
    c.validate();
    return c;
  }
};

struct SeedOption {
  std::uint64_t seed = 0;
  CLI::Option* opt = nullptr;

  void add(CLI::App* app) {
    opt = app->add_option("--seed", seed, "random seed (falls back to $GRADPROBE_SEED)")->capture_default_str();
  }

  std::uint64_t resolve() const {
    if (*opt) return seed;
    if (const char* env = std::getenv("GRADPROBE_SEED"); env != nullptr && *env != '\0') {
      char* end = nullptr;
      const unsigned long long v = std::strtoull(env, &end, 10);
      if (end == nullptr || *end != '\0') {
        throw Error(ErrorCode::kInvalidArgument, std::string("GRADPROBE_SEED is not an integer: ") + env);
      }
      return v;
    }
    return seed;
  }
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
}

// Replaces the score column by a named extra column when requested.
select::TrajectorySeries series_with_score(const io::SeriesTable& table, const std::string& column) {
  select::TrajectorySeries series = table.series();
  if (column == "score") return series;
  const auto it = table.extras.find(column);
  if (it == table.extras.end()) {
    throw Error(ErrorCode::kInvalidArgument, "series has no column '" + column + "'");
  }
  for (std::size_t i = 0; i < series.records.size(); ++i) series.records[i].score = it->second[i];
  return series;
}

bool is_model_table(const fs::path& path) {
  const std::string text = io::read_text_file(path);
  return text.rfind("name,", 0) == 0;
}

// ---- probe ----

struct ProbeInput {
  std::uint64_t step = 0;
  std::vector<fs::path> files;
};

struct ProbeCommand {
  std::vector<std::string> inputs;
  std::string out_dir = ".";
  std::string score = "fro";
  double eps_z = probe::kDefaultEps;
  double eps_w = probe::kDefaultEps;
  bool keep_going = false;

  void add(CLI::App* app) {
    app->add_option("inputs", inputs, "manifest.json, a run directory, or .hgp trace files")->required();
    app->add_option("--out-dir", out_dir, "output directory")->capture_default_str();
    app->add_option("--score", score, "readout used as the score column")
        ->check(CLI::IsMember({"fro", "l1", "linf", "fisher", "score_z", "score_w", "confidence",
                               "entropy", "margin"}))
        ->capture_default_str();
    app->add_option("--eps-z", eps_z, "epsilon added to ||Z||_F")->capture_default_str();
    app->add_option("--eps-w", eps_w, "epsilon added to ||W||_F")->capture_default_str();
    app->add_flag("--keep-going", keep_going, "continue past unreadable traces");
  }

  int run(std::ostream& out, std::ostream& err) const {
    std::vector<ProbeInput> groups;
    std::vector<fs::path> loose;
    for (const auto& input : inputs) {
      fs::path path(input);
      if (fs::is_directory(path)) path /= io::kManifestName;
      if (path.extension() == ".json") {
        const io::RunManifest manifest = io::read_manifest(path);
        for (const auto& cp : manifest.checkpoints) {
          ProbeInput g{cp.step, {}};
          for (const auto& f : cp.files) g.files.push_back(path.parent_path() / f);
          groups.push_back(std::move(g));
        }
      } else {
        loose.push_back(path);
      }
    }

    struct Loaded {
      fs::path file;
      io::ProbeTraceFile trace;
      probe::ProbeScore score;
    };
    std::map<std::uint64_t, std::vector<Loaded>> by_step;
    Json errors = Json::array();
    int worst = kExitOk;
    const auto load = [&](const fs::path& file, std::optional<std::uint64_t> expected_step) {
      try {
        io::ProbeTraceFile trace = io::read_trace(file);
        if (expected_step && trace.step != *expected_step) {
          throw Error(ErrorCode::kParse, file.string() + ": trace step " + std::to_string(trace.step) +
                                             " differs from manifest step " + std::to_string(*expected_step));
        }
        const probe::ProbeScore score = probe::probe(trace.to_batch(), eps_z, eps_w);
        by_step[trace.step].push_back({file, std::move(trace), score});
      } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        Json entry;
        entry["file"] = file.string();
        entry["code"] = std::string(error_code_name(e.code()));
        entry["message"] = e.what();
        errors.push_back(std::move(entry));
        worst = std::max(worst, exit_code_for(e.code()));
        if (!keep_going) throw;
      }
    };
    for (const auto& g : groups)
      for (const auto& f : g.files) load(f, g.step);
    for (const auto& f : loose) load(f, std::nullopt);

    io::SeriesTable table;
    table.extra_columns = kReadoutColumns;
    Json checkpoints = Json::array();
    for (const auto& [step, loaded] : by_step) {
      select::TrajectoryRecord rec;
      rec.step = step;
      rec.metric = loaded.front().trace.metric;
      rec.aux_loss = loaded.front().trace.aux_loss;
      for (const auto& column : kReadoutColumns) {
        std::vector<std::vector<double>> values;
        for (const auto& l : loaded) values.push_back({readout(l.score, column)});
        table.extras[column].push_back(select::median_aggregate(values).front());
      }
      {
        std::vector<std::vector<double>> values;
        for (const auto& l : loaded) values.push_back({readout(l.score, score)});
        rec.score = select::median_aggregate(values).front();
      }
      if (!std::isfinite(rec.score)) {
        throw Error(ErrorCode::kInvalidArgument,
                    "readout '" + score + "' is undefined at step " + std::to_string(step) +
                        " (regression traces have no output readouts or Fisher trace)");
      }
      table.rows.push_back(rec);

      Json cp;
      cp["step"] = step;
      Json files = Json::array();
      Json scores = Json::array();
      for (const auto& l : loaded) {
        files.push_back(l.file.string());
        scores.push_back(io::to_json(l.score));
      }
      cp["files"] = std::move(files);
      cp["metric"] = rec.metric ? Json(*rec.metric) : Json(nullptr);
      cp["aux_loss"] = rec.aux_loss ? Json(*rec.aux_loss) : Json(nullptr);
      cp["scores"] = std::move(scores);
      checkpoints.push_back(std::move(cp));
    }

    ensure_dir(out_dir);
    io::write_series(table, fs::path(out_dir) / "series.csv");
    Json config;
    config["score"] = score;
    config["eps_z"] = eps_z;
    config["eps_w"] = eps_w;
    config["keep_going"] = keep_going;
    Json body;
    body["checkpoints"] = std::move(checkpoints);
    body["errors"] = errors;
    io::write_report(io::make_report("probe", 0, config, std::move(body)),
                     fs::path(out_dir) / "probe_scores.json");
    out << "probed " << table.rows.size() << " checkpoints";
    if (!errors.empty()) out << " (" << errors.size() << " unreadable)";
    out << " -> " << (fs::path(out_dir) / "series.csv").string() << "\n";
    return worst;
  }
};

// ---- select ----

struct SelectCommand {
  std::string input;
  std::string out_dir = ".";
  std::string column = "score";
  SelectionOptions selection;

  void add(CLI::App* app) {
    app->add_option("series", input, "series CSV (step,score,metric,aux_loss,...)")->required();
    app->add_option("--out-dir", out_dir, "output directory")->capture_default_str();
    app->add_option("--column", column, "column used as the score")->capture_default_str();
    selection.add(app);
  }

  int run(std::ostream& out) const {
    const select::SelectionConfig config = selection.config();
    const io::SeriesTable table = io::read_series(input);
    const select::TrajectorySeries series = series_with_score(table, column);
    const auto results = select::evaluate_strategies(series, config);

    Json strategies;
    for (const auto& [name, result] : results) strategies[name] = io::to_json(result);
    Json body;
    body["records"] = series.size();
    const select::IndexRange window = select::tail_window(series.size(), config);
    body["window_first_step"] = series.records[window.begin].step;
    body["window_last_step"] = series.records[window.end - 1].step;
    body["strategies"] = std::move(strategies);
    Json cfg = io::to_json(config);
    cfg["column"] = column;
    ensure_dir(out_dir);
    io::write_report(io::make_report("selection", 0, cfg, std::move(body)),
                     fs::path(out_dir) / "selection.json");

    const auto& chosen = results.at(select::strategy::kEmaArgmin);
    out << "selected step " << chosen.chosen_step << " (ema_argmin";
    if (chosen.gap) out << ", gap " << io::format_number(*chosen.gap);
    out << ")\n";
    return kExitOk;
  }
};

// ---- correlate ----

struct CorrelateCommand {
  std::string input;
  std::string out_dir = ".";
  std::string column = "score";
  std::size_t resamples = stats::kDefaultResamples;
  SeedOption seed;
  bool lower_is_better = false;

  void add(CLI::App* app) {
    app->add_option("input", input, "series CSV or model table (name,score,metric)")->required();
    app->add_option("--out-dir", out_dir, "output directory")->capture_default_str();
    app->add_option("--column", column, "series column used as the score")->capture_default_str();
    app->add_option("--resamples", resamples, "bootstrap resamples")->capture_default_str();
    seed.add(app);
    app->add_flag("--lower-is-better", lower_is_better, "metric is lower-is-better (model ranking)");
  }

  int run(std::ostream& out) const {
    const std::uint64_t s = seed.resolve();
    Json body;
    stats::PairedSample sample;
    std::vector<double> steps;
    if (is_model_table(input)) {
      const auto entries = io::read_model_table(input);
      for (const auto& e : entries) {
        sample.x.push_back(e.score);
        sample.y.push_back(e.metric);
        sample.labels.push_back(e.name);
      }
      body["correlation"] = io::to_json(stats::correlate(sample, resamples, s));
      body["regression"] = nullptr;
      body["ranking"] = io::to_json(stats::rank_models(
          entries, lower_is_better ? stats::MetricOrientation::kLowerIsBetter
                                   : stats::MetricOrientation::kHigherIsBetter));
    } else {
      const io::SeriesTable table = io::read_series(input);
      const select::TrajectorySeries series = series_with_score(table, column);
      for (const auto& r : series.records) {
        if (!r.metric) continue;
        sample.x.push_back(r.score);
        sample.y.push_back(*r.metric);
        steps.push_back(static_cast<double>(r.step));
      }
      if (sample.size() < 3) {
        throw Error(ErrorCode::kInvalidArgument, "correlation needs at least 3 rows with a metric");
      }
      body["correlation"] = io::to_json(stats::correlate(sample, resamples, s));
      if (sample.size() >= 4) {
        try {
          body["regression"] = io::to_json(stats::ols_with_covariate(sample.y, sample.x, steps));
          body["detrended_correlation"] = stats::detrended_correlation(sample.x, sample.y, steps);
        } catch (const Error& e) {
          if (exit_code_for(e.code()) != kExitDegenerate) throw;
          body["regression"] = nullptr;
          body["regression_error"] = e.what();
        }
      } else {
        body["regression"] = nullptr;
      }
    }
    Json cfg;
    cfg["column"] = column;
    cfg["resamples"] = resamples;
    ensure_dir(out_dir);
    const Json& c = body["correlation"];
    out << "pearson r = " << io::format_number(c["pearson_r"].get<double>()) << " ["
        << io::format_number(c["ci_low"].get<double>()) << ", "
        << io::format_number(c["ci_high"].get<double>()) << "], spearman rho = "
        << io::format_number(c["spearman_rho"].get<double>()) << " (n = " << sample.size() << ")\n";
    io::write_report(io::make_report("correlation", s, cfg, std::move(body)),
                     fs::path(out_dir) / "correlation.json");
    return kExitOk;
  }
};

// ---- simulate ----

struct SimulateCommand {
  std::string kind = "classification";
  std::string out_dir = "run";
  SeedOption seed;
  std::size_t steps = 400;
  std::size_t probe_every = 5;
  double learning_rate = 0.05;
  CLI::Option* lr_opt = nullptr;
  std::uint32_t classes = 5;
  std::uint32_t dim = 20;
  CLI::Option* classes_opt = nullptr;
  CLI::Option* dim_opt = nullptr;
  double label_noise = 0.0;
  double spread = 1.0;
  double center_scale = 1.0;
  double anisotropy = 30.0;
  std::size_t probe_batch = 64;
  std::size_t repeats = 3;
  double target_noise = 0.1;

  void add(CLI::App* app) {
    app->add_option("--kind", kind, "classification | regression | latent")
        ->check(CLI::IsMember({"classification", "regression", "latent"}))
        ->capture_default_str();
    app->add_option("--out-dir", out_dir, "output directory")->capture_default_str();
    seed.add(app);
    app->add_option("--steps", steps, "training steps (latent: number of records)")->capture_default_str();
    app->add_option("--probe-every", probe_every, "checkpoint interval")->capture_default_str();
    lr_opt = app->add_option("--lr", learning_rate, "learning rate (regression default 0.01)")
                 ->capture_default_str();
    classes_opt = app->add_option("--classes", classes, "classes (regression: outputs, default 4)")
                      ->capture_default_str();
    dim_opt = app->add_option("--dim", dim, "feature dimension (regression default 16)")->capture_default_str();
    app->add_option("--label-noise", label_noise, "uniform relabeling rate")->capture_default_str();
    app->add_option("--spread", spread, "within-class standard deviation")->capture_default_str();
    app->add_option("--center-scale", center_scale, "std of class-center coordinates")->capture_default_str();
    app->add_option("--anisotropy", anisotropy, "max/min per-coordinate std ratio")->capture_default_str();
    app->add_option("--probe-batch", probe_batch, "probe batch size B")->capture_default_str();
    app->add_option("--repeats", repeats, "regression: noise-scale repeats per checkpoint")
        ->capture_default_str();
    app->add_option("--target-noise", target_noise, "regression: target noise std")->capture_default_str();
  }

  static void write_truth(const lab::SyntheticRun& run, const fs::path& path) {
    io::SeriesTable table;
    table.rows = run.series().records;
    table.extra_columns = {"train_loss"};
    for (const auto& cp : run.checkpoints) table.extras["train_loss"].push_back(cp.train_loss);
    io::write_series(table, path);
  }

  int run(std::ostream& out) const {
    const std::uint64_t s = seed.resolve();
    ensure_dir(out_dir);
    lab::TrainConfig train;
    train.steps = steps;
    train.probe_every = probe_every;
    train.learning_rate = (kind == "regression" && !*lr_opt) ? 0.01 : learning_rate;
    if (kind == "latent") {
      const io::SeriesTable table = lab::simulate_readouts(lab::LatentStateModel{}, steps, s);
      io::write_series(table, fs::path(out_dir) / "series.csv");
      out << "simulated " << table.rows.size() << " latent-state records -> "
          << (fs::path(out_dir) / "series.csv").string() << "\n";
      return kExitOk;
    }
    lab::SyntheticRun run;
    if (kind == "classification") {
      lab::SyntheticTask task;
      task.num_classes = classes;
      task.feature_dim = dim;
      task.label_noise = label_noise;
      task.spread = spread;
      task.center_scale = center_scale;
      task.anisotropy = anisotropy;
      task.probe_batch = probe_batch;
      task.seed = s;
      run = lab::train_linear_head(task, train, out_dir);
    } else {
      lab::RegressionTask task;
      if (*classes_opt) task.num_outputs = classes;
      if (*dim_opt) task.feature_dim = dim;
      task.probe_batch = probe_batch;
      task.repeats = repeats;
      task.target_noise = target_noise;
      task.seed = s;
      run = lab::make_regression_run(task, train, out_dir);
    }
    write_truth(run, fs::path(out_dir) / "truth.csv");
    out << "wrote " << run.manifest.checkpoints.size() << " checkpoints -> "
        << (fs::path(out_dir) / io::kManifestName).string() << "\n";
    return kExitOk;
  }
};

// ---- sweep ----

struct SweepCommand {
  std::vector<std::string> inputs;
  std::string out_dir = ".";
  std::string column = "score";
  std::vector<int> spans = {1, 3, 5, 9};
  std::vector<std::size_t> tails = {60, 80, 100};
  SelectionOptions selection;

  void add(CLI::App* app) {
    app->add_option("series", inputs, "one or more series CSVs (one per run)")->required();
    app->add_option("--out-dir", out_dir, "output directory")->capture_default_str();
    app->add_option("--column", column, "column used as the score")->capture_default_str();
    app->add_option("--spans", spans, "EMA spans in the grid")->capture_default_str()->delimiter(',');
    app->add_option("--tails", tails, "tail sizes in the grid")->capture_default_str()->delimiter(',');
    selection.add(app);
  }

  int run(std::ostream& out) const {
    const select::SelectionConfig base = selection.config();
    std::vector<select::GridPoint> grid;
    for (const int k : spans)
      for (const std::size_t t : tails) grid.push_back({k, t});

    std::string csv = "run,ema_span,tail_size,chosen_step,gap,universal,best\n";
    Json runs = Json::array();
    double universal_total = 0.0;
    double best_total = 0.0;
    for (std::size_t r = 0; r < inputs.size(); ++r) {
      const io::SeriesTable table = io::read_series(inputs[r]);
      const select::SweepTable sweep = select::sweep_configs(series_with_score(table, column), grid, base);
      for (std::size_t i = 0; i < sweep.cells.size(); ++i) {
        const auto& c = sweep.cells[i];
        csv += std::to_string(r) + "," + std::to_string(c.ema_span) + "," + std::to_string(c.tail_size) +
               "," + std::to_string(c.chosen_step) + "," + io::format_number(c.gap) + "," +
               (sweep.universal_cell == i ? "1" : "0") + "," + (sweep.best_cell == i ? "1" : "0") + "\n";
      }
      Json entry = io::to_json(sweep);
      entry["input"] = inputs[r];
      runs.push_back(std::move(entry));
      if (sweep.universal_cell) universal_total += sweep.cells[*sweep.universal_cell].gap;
      best_total += sweep.cells[sweep.best_cell].gap;
    }
    ensure_dir(out_dir);
    io::write_text_file(fs::path(out_dir) / "sweep.csv", csv);
    Json cfg = io::to_json(base);
    cfg["spans"] = spans;
    cfg["tails"] = tails;
    Json body;
    body["cells"] = runs.empty() ? Json::array() : runs.front()["cells"];
    body["best_cell"] = runs.empty() ? Json(0) : runs.front()["best_cell"];
    body["runs"] = std::move(runs);
    const auto n = static_cast<double>(inputs.size());
    body["mean_universal_gap"] = universal_total / n;
    body["mean_best_gap"] = best_total / n;
    io::write_report(io::make_report("sweep", 0, cfg, std::move(body)), fs::path(out_dir) / "sweep.json");
    out << "swept " << grid.size() << " cells over " << inputs.size()
        << " runs; mean universal gap " << io::format_number(universal_total / n)
        << ", mean per-run best gap " << io::format_number(best_total / n) << "\n";
    return kExitOk;
  }
};

// ---- report ----

struct ReportCommand {
  std::string input;
  std::string out_dir = ".";
  std::string column = "score";
  std::size_t resamples = stats::kDefaultResamples;
  SeedOption seed;
  bool log10_x = false;
  bool x_lower_is_better = false;
  std::string title = "head-gradient score vs metric";

  void add(CLI::App* app) {
    app->add_option("input", input, "model table (name,score,metric) or series CSV")->required();
    app->add_option("--out-dir", out_dir, "output directory")->capture_default_str();
    app->add_option("--column", column, "series column used as the score")->capture_default_str();
    app->add_option("--resamples", resamples, "bootstrap resamples")->capture_default_str();
    seed.add(app);
    app->add_flag("--log10-x", log10_x, "fit and plot against log10(score)");
    app->add_flag("--x-lower-is-better", x_lower_is_better, "annotate the x axis as lower-is-better");
    app->add_option("--title", title, "plot title")->capture_default_str();
  }

  int run(std::ostream& out) const {
    const std::uint64_t s = seed.resolve();
    stats::PairedSample sample;
    if (is_model_table(input)) {
      for (const auto& e : io::read_model_table(input)) {
        sample.x.push_back(e.score);
        sample.y.push_back(e.metric);
        sample.labels.push_back(e.name);
      }
    } else {
      const io::SeriesTable table = io::read_series(input);
      for (const auto& r : series_with_score(table, column).records) {
        if (!r.metric) continue;
        sample.x.push_back(r.score);
        sample.y.push_back(*r.metric);
        sample.labels.push_back(std::to_string(r.step));
      }
    }
    io::ScatterOptions options;
    options.log10_x = log10_x;
    options.x_lower_is_better = x_lower_is_better;
    options.title = title;
    options.x_label = column == "score" ? "head-gradient score" : column;
    const io::ScatterPlot plot = io::emit_scatter(sample, options);
    ensure_dir(out_dir);
    io::write_text_file(fs::path(out_dir) / "scatter.svg", plot.svg);

    Json body;
    body["correlation"] = io::to_json(stats::correlate(sample, resamples, s));
    Json fit;
    fit["log10_x"] = log10_x;
    fit["slope"] = plot.slope;
    fit["intercept"] = plot.intercept;
    body["fit"] = std::move(fit);
    body["plots"] = Json::array({"scatter.svg"});
    Json cfg;
    cfg["column"] = column;
    cfg["resamples"] = resamples;
    cfg["log10_x"] = log10_x;
    io::write_report(io::make_report("report", s, cfg, std::move(body)), fs::path(out_dir) / "report.json");
    out << "wrote scatter.svg (" << sample.size() << " points) and report.json to " << out_dir << "\n";
    return kExitOk;
  }
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"gradprobe: validation-free checkpoint diagnostics from head-only gradient probes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", io::kToolVersion);

  ProbeCommand probe_cmd;
  SelectCommand select_cmd;
  CorrelateCommand correlate_cmd;
  SimulateCommand simulate_cmd;
  SweepCommand sweep_cmd;
  ReportCommand report_cmd;
  auto* probe_app = app.add_subcommand("probe", "compute probe readouts for every checkpoint trace");
  auto* select_app = app.add_subcommand("select", "choose a checkpoint without validation labels");
  auto* correlate_app = app.add_subcommand("correlate", "score/metric correlation, bootstrap CI, LOO, OLS");
  auto* simulate_app = app.add_subcommand("simulate", "generate a synthetic run");
  auto* sweep_app = app.add_subcommand("sweep", "selection gap over an EMA-span x tail-size grid");
  auto* report_app = app.add_subcommand("report", "scatter plot with least-squares fit plus summary JSON");
  probe_cmd.add(probe_app);
  select_cmd.add(select_app);
  correlate_cmd.add(correlate_app);
  simulate_cmd.add(simulate_app);
  sweep_cmd.add(sweep_app);
  report_cmd.add(report_app);

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*probe_app) return probe_cmd.run(out, err);
    if (*select_app) return select_cmd.run(out);
    if (*correlate_app) return correlate_cmd.run(out);
    if (*simulate_app) return simulate_cmd.run(out);
    if (*sweep_app) return sweep_cmd.run(out);
    if (*report_app) return report_cmd.run(out);
  } catch (const Error& e) {
    err << "error [" << error_code_name(e.code()) << "]: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitValidation;
}

}  // namespace gradprobe::cli
