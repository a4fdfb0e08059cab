#pragma once

// On-disk formats.
//
// Probe trace (binary, little-endian, fixed 44-byte header):
//
//   offset size  field
//   0      4     magic "HGP1"
//   4      2     u16 version (= 1)
//   6      1     u8 mode (0 classification, 1 regression)
//   7      1     u8 dtype (0 = f32)
//   8      4     u32 C
//   12     4     u32 d
//   16     4     u32 B
//   20     8     u64 step
//   28     8     f64 metric   (NaN = absent)
//   36     8     f64 aux_loss (NaN = absent)
//   44     ...   W  C*d f32 row-major
//                Z  d*B f32 row-major
//                targets: B u32 labels, or C*B f32 row-major (regression)
//
// Series table (CSV): header `step,score[,metric[,aux_loss[,extra...]]]`,
// `nan` or an empty cell marks an absent value.
//
// Run manifest (JSON): run_id, task, num_classes, feature_dim,
// probe_batch_size, orientation, checkpoints[{step, files[]}], notes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "gradprobe/error.hpp"
#include "gradprobe/probe_core.hpp"
#include "gradprobe/stats_engine.hpp"
#include "gradprobe/trajectory_select.hpp"

namespace gradprobe::io {

inline constexpr char kTraceMagic[4] = {'H', 'G', 'P', '1'};
inline constexpr std::uint16_t kTraceVersion = 1;
inline constexpr std::size_t kTraceHeaderBytes = 44;
inline constexpr const char* kToolVersion = "0.1.0";

using Json = nlohmann::ordered_json;

/// One checkpoint's probe inputs exactly as stored (f32 payloads).
struct ProbeTraceFile {
  std::string run_id;  // carried by the manifest, not by the binary layout
  std::uint64_t step = 0;
  probe::Mode mode = probe::Mode::kClassification;
  std::uint32_t num_outputs = 0;  // C
  std::uint32_t feature_dim = 0;  // d
  std::uint32_t batch_size = 0;   // B
  std::optional<double> metric;
  std::optional<double> aux_loss;
  std::vector<float> head;                // C*d row-major
  std::vector<float> features;            // d*B row-major
  std::vector<std::uint32_t> labels;      // B, classification
  std::vector<float> targets;             // C*B row-major, regression

  /// Widened to f64 for the probe.
  probe::ProbeBatch to_batch() const;
  /// Narrows to f32.
  static ProbeTraceFile from_batch(const probe::ProbeBatch& batch, std::uint64_t step,
                                   std::optional<double> metric = std::nullopt,
                                   std::optional<double> aux_loss = std::nullopt);

  std::size_t byte_size() const;
};

std::vector<std::uint8_t> encode_trace(const ProbeTraceFile& trace);
ProbeTraceFile decode_trace(std::span<const std::uint8_t> bytes);

void write_trace(const ProbeTraceFile& trace, const std::filesystem::path& path);
ProbeTraceFile read_trace(const std::filesystem::path& path);

struct ManifestCheckpoint {
  std::uint64_t step = 0;
  std::vector<std::string> files;  // relative to the manifest directory
};

struct RunManifest {
  std::string run_id;
  probe::Mode task = probe::Mode::kClassification;
  std::uint32_t num_classes = 0;
  std::uint32_t feature_dim = 0;
  std::uint32_t probe_batch_size = 0;
  select::Orientation orientation = select::Orientation::kHigherIsBetter;
  std::vector<ManifestCheckpoint> checkpoints;
  std::string notes;
};

inline constexpr const char* kManifestName = "manifest.json";

Json manifest_to_json(const RunManifest& manifest);
RunManifest manifest_from_json(const Json& json);
void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);
/// Also checks that every listed file exists next to the manifest.
RunManifest read_manifest(const std::filesystem::path& path);

struct SeriesTable {
  std::vector<select::TrajectoryRecord> rows;
  std::vector<std::string> extra_columns;
  std::map<std::string, std::vector<double>> extras;  // NaN = absent

  select::TrajectorySeries series() const { return {rows}; }
  void validate() const;
};

/// Shortest decimal that round-trips to the same double; `nan` for NaN.
std::string format_number(double value);

std::string write_series_string(const SeriesTable& table);
SeriesTable read_series_string(const std::string& text);
void write_series(const SeriesTable& table, const std::filesystem::path& path);
SeriesTable read_series(const std::filesystem::path& path);

/// CSV with header `name,score,metric`.
std::vector<stats::ModelEntry> read_model_table(const std::filesystem::path& path);
void write_model_table(std::span<const stats::ModelEntry> entries, const std::filesystem::path& path);

// Report documents. Non-finite numbers are emitted as null.
Json to_json(const probe::ProbeScore& score);
Json to_json(const select::SelectionConfig& config);
Json to_json(const select::SelectionResult& result);
Json to_json(const stats::BootstrapInterval& interval);
Json to_json(const stats::CorrelationReport& report);
Json to_json(const stats::RegressionReport& report);
Json to_json(const stats::RankingReport& report);
Json to_json(const select::SweepTable& table);

/// Wraps `body` with tool, version, seed and config echo.
Json make_report(const std::string& kind, std::uint64_t seed, const Json& config, Json body);

std::string dump_report(const Json& report);
void write_report(const Json& report, const std::filesystem::path& path);
Json read_report(const std::filesystem::path& path);

/// Returns human-readable violations of the documented report schema; empty when valid.
std::vector<std::string> check_report_schema(const Json& report);

struct ScatterOptions {
  bool log10_x = false;
  bool x_lower_is_better = false;
  std::string title = "score vs metric";
  std::string x_label = "score";
  std::string y_label = "metric";
  int width = 640;
  int height = 480;
};

struct ScatterPlot {
  std::string svg;
  double slope = 0.0;      // in the (possibly log10) x space
  double intercept = 0.0;
};

ScatterPlot emit_scatter(const stats::PairedSample& sample, const ScatterOptions& options = {});

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace gradprobe::io
