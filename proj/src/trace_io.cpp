#include "gradprobe/trace_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace gradprobe::io {
namespace {

// Little-endian encoding independent of host byte order.
class ByteWriter {
 public:
  explicit ByteWriter(std::size_t reserve) { bytes_.reserve(reserve); }

  void put_u8(std::uint8_t v) { bytes_.push_back(v); }
  void put_u16(std::uint16_t v) { put_le(v, 2); }
  void put_u32(std::uint32_t v) { put_le(v, 4); }
  void put_u64(std::uint64_t v) { put_le(v, 8); }
  void put_f32(float v) { put_u32(std::bit_cast<std::uint32_t>(v)); }
  void put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }
  void put_raw(const char* data, std::size_t n) { bytes_.insert(bytes_.end(), data, data + n); }

  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
  std::uint64_t u64() { return get_le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::uint64_t get_le(int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

double optional_to_sentinel(const std::optional<double>& v) {
  return v ? *v : std::numeric_limits<double>::quiet_NaN();
}

std::optional<double> sentinel_to_optional(double v) {
  if (std::isnan(v)) return std::nullopt;
  return v;
}

std::uint64_t payload_bytes(probe::Mode mode, std::uint64_t c, std::uint64_t d, std::uint64_t b) {
  const std::uint64_t targets = mode == probe::Mode::kClassification ? b : c * b;
  return 4 * (c * d + d * b + targets);
}

Json number(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

Json number(const std::optional<double>& v) {
  if (!v) return nullptr;
  return number(*v);
}

}  // namespace

probe::ProbeBatch ProbeTraceFile::to_batch() const {
  probe::ProbeBatch batch;
  batch.mode = mode;
  const auto c = static_cast<Eigen::Index>(num_outputs);
  const auto d = static_cast<Eigen::Index>(feature_dim);
  const auto b = static_cast<Eigen::Index>(batch_size);
  batch.head.resize(c, d);
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = 0; j < d; ++j)
      batch.head(i, j) = head[static_cast<std::size_t>(i * d + j)];
  batch.features.resize(d, b);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < b; ++j)
      batch.features(i, j) = features[static_cast<std::size_t>(i * b + j)];
  if (mode == probe::Mode::kClassification) {
    batch.labels = labels;
  } else {
    batch.targets.resize(c, b);
    for (Eigen::Index i = 0; i < c; ++i)
      for (Eigen::Index j = 0; j < b; ++j)
        batch.targets(i, j) = targets[static_cast<std::size_t>(i * b + j)];
  }
  return batch;
}

ProbeTraceFile ProbeTraceFile::from_batch(const probe::ProbeBatch& batch, std::uint64_t step,
                                          std::optional<double> metric,
                                          std::optional<double> aux_loss) {
  batch.validate();
  ProbeTraceFile trace;
  trace.step = step;
  trace.mode = batch.mode;
  trace.num_outputs = static_cast<std::uint32_t>(batch.num_outputs());
  trace.feature_dim = static_cast<std::uint32_t>(batch.feature_dim());
  trace.batch_size = static_cast<std::uint32_t>(batch.batch_size());
  trace.metric = metric;
  trace.aux_loss = aux_loss;
  for (Eigen::Index i = 0; i < batch.head.rows(); ++i)
    for (Eigen::Index j = 0; j < batch.head.cols(); ++j)
      trace.head.push_back(static_cast<float>(batch.head(i, j)));
  for (Eigen::Index i = 0; i < batch.features.rows(); ++i)
    for (Eigen::Index j = 0; j < batch.features.cols(); ++j)
      trace.features.push_back(static_cast<float>(batch.features(i, j)));
  if (batch.mode == probe::Mode::kClassification) {
    trace.labels = batch.labels;
  } else {
    for (Eigen::Index i = 0; i < batch.targets.rows(); ++i)
      for (Eigen::Index j = 0; j < batch.targets.cols(); ++j)
        trace.targets.push_back(static_cast<float>(batch.targets(i, j)));
  }
  return trace;
}

std::size_t ProbeTraceFile::byte_size() const {
  return kTraceHeaderBytes +
         static_cast<std::size_t>(payload_bytes(mode, num_outputs, feature_dim, batch_size));
}

std::vector<std::uint8_t> encode_trace(const ProbeTraceFile& trace) {
  const std::size_t c = trace.num_outputs;
  const std::size_t d = trace.feature_dim;
  const std::size_t b = trace.batch_size;
  const bool classification = trace.mode == probe::Mode::kClassification;
  if (trace.head.size() != c * d || trace.features.size() != d * b ||
      (classification ? trace.labels.size() != b : trace.targets.size() != c * b)) {
    throw Error(ErrorCode::kShapeMismatch, "trace payload sizes do not match header dims " +
                                               std::to_string(c) + "x" + std::to_string(d) + "x" +
                                               std::to_string(b));
  }
  ByteWriter out(trace.byte_size());
  out.put_raw(kTraceMagic, 4);
  out.put_u16(kTraceVersion);
  out.put_u8(static_cast<std::uint8_t>(trace.mode));
  out.put_u8(0);
  out.put_u32(trace.num_outputs);
  out.put_u32(trace.feature_dim);
  out.put_u32(trace.batch_size);
  out.put_u64(trace.step);
  out.put_f64(optional_to_sentinel(trace.metric));
  out.put_f64(optional_to_sentinel(trace.aux_loss));
  for (const float v : trace.head) out.put_f32(v);
  for (const float v : trace.features) out.put_f32(v);
  if (classification) {
    for (const std::uint32_t v : trace.labels) out.put_u32(v);
  } else {
    for (const float v : trace.targets) out.put_f32(v);
  }
  return out.take();
}

ProbeTraceFile decode_trace(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) {
    throw Error(ErrorCode::kTruncated, "trace is " + std::to_string(bytes.size()) +
                                           " bytes, shorter than its magic");
  }
  if (!std::equal(bytes.begin(), bytes.begin() + 4, kTraceMagic,
                  [](std::uint8_t a, char b) { return a == static_cast<std::uint8_t>(b); })) {
    throw Error(ErrorCode::kBadMagic, "trace magic is not HGP1");
  }
  if (bytes.size() < kTraceHeaderBytes) {
    throw Error(ErrorCode::kTruncated, "trace header needs 44 bytes, file has " +
                                           std::to_string(bytes.size()));
  }
  ByteReader in(bytes.subspan(4));
  const std::uint16_t version = in.u16();
  if (version != kTraceVersion) {
    throw Error(ErrorCode::kBadVersion, "unsupported trace version " + std::to_string(version));
  }
  const std::uint8_t mode = in.u8();
  if (mode > 1) throw Error(ErrorCode::kBadMode, "unknown trace mode " + std::to_string(mode));
  const std::uint8_t dtype = in.u8();
  if (dtype != 0) throw Error(ErrorCode::kBadDtype, "unsupported dtype " + std::to_string(dtype));

  ProbeTraceFile trace;
  trace.mode = static_cast<probe::Mode>(mode);
  trace.num_outputs = in.u32();
  trace.feature_dim = in.u32();
  trace.batch_size = in.u32();
  trace.step = in.u64();
  trace.metric = sentinel_to_optional(in.f64());
  trace.aux_loss = sentinel_to_optional(in.f64());
  if (trace.num_outputs == 0 || trace.feature_dim == 0 || trace.batch_size == 0) {
    throw Error(ErrorCode::kShapeMismatch, "trace header has a zero dimension");
  }

  const std::uint64_t expected =
      payload_bytes(trace.mode, trace.num_outputs, trace.feature_dim, trace.batch_size);
  if (in.remaining() < expected) {
    throw Error(ErrorCode::kTruncated, "trace payload needs " + std::to_string(expected) +
                                           " bytes, file has " + std::to_string(in.remaining()));
  }
  if (in.remaining() > expected) {
    throw Error(ErrorCode::kTrailingBytes,
                std::to_string(in.remaining() - expected) + " unexpected bytes after payload");
  }

  const std::size_t c = trace.num_outputs;
  const std::size_t d = trace.feature_dim;
  const std::size_t b = trace.batch_size;
  trace.head.resize(c * d);
  for (float& v : trace.head) v = in.f32();
  trace.features.resize(d * b);
  for (float& v : trace.features) v = in.f32();
  if (trace.mode == probe::Mode::kClassification) {
    trace.labels.resize(b);
    for (std::size_t i = 0; i < b; ++i) {
      trace.labels[i] = in.u32();
      if (trace.labels[i] >= trace.num_outputs) {
        throw Error(ErrorCode::kLabelOutOfRange,
                    "label " + std::to_string(trace.labels[i]) + " at index " + std::to_string(i) +
                        " is not below C = " + std::to_string(trace.num_outputs));
      }
    }
  } else {
    trace.targets.resize(c * b);
    for (float& v : trace.targets) v = in.f32();
  }
  return trace;
}

void write_trace(const ProbeTraceFile& trace, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = encode_trace(trace);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

ProbeTraceFile read_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_trace(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

// ---- manifest ----

namespace {

const char* mode_name(probe::Mode mode) {
  return mode == probe::Mode::kClassification ? "classification" : "regression";
}

const char* orientation_name(select::Orientation o) {
  return o == select::Orientation::kHigherIsBetter ? "higher_is_better" : "lower_is_better";
}

template <typename T>
T require_field(const Json& json, const char* key) {
  if (!json.contains(key)) throw Error(ErrorCode::kParse, std::string("manifest lacks '") + key + "'");
  try {
    return json.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("manifest field '") + key + "': " + e.what());
  }
}

}  // namespace

Json manifest_to_json(const RunManifest& manifest) {
  Json json;
  json["run_id"] = manifest.run_id;
  json["task"] = mode_name(manifest.task);
  json["num_classes"] = manifest.num_classes;
  json["feature_dim"] = manifest.feature_dim;
  json["probe_batch_size"] = manifest.probe_batch_size;
  json["orientation"] = orientation_name(manifest.orientation);
  Json checkpoints = Json::array();
  for (const auto& cp : manifest.checkpoints) {
    Json entry;
    entry["step"] = cp.step;
    entry["files"] = cp.files;
    checkpoints.push_back(std::move(entry));
  }
  json["checkpoints"] = std::move(checkpoints);
  json["notes"] = manifest.notes;
  return json;
}

RunManifest manifest_from_json(const Json& json) {
  RunManifest m;
  m.run_id = require_field<std::string>(json, "run_id");
  const auto task = require_field<std::string>(json, "task");
  if (task == "classification") {
    m.task = probe::Mode::kClassification;
  } else if (task == "regression") {
    m.task = probe::Mode::kRegression;
  } else {
    throw Error(ErrorCode::kParse, "unknown manifest task '" + task + "'");
  }
  m.num_classes = require_field<std::uint32_t>(json, "num_classes");
  m.feature_dim = require_field<std::uint32_t>(json, "feature_dim");
  m.probe_batch_size = require_field<std::uint32_t>(json, "probe_batch_size");
  const auto orientation = require_field<std::string>(json, "orientation");
  if (orientation == "higher_is_better") {
    m.orientation = select::Orientation::kHigherIsBetter;
  } else if (orientation == "lower_is_better") {
    m.orientation = select::Orientation::kLowerIsBetter;
  } else {
    throw Error(ErrorCode::kParse, "unknown orientation '" + orientation + "'");
  }
  if (!json.contains("checkpoints") || !json["checkpoints"].is_array()) {
    throw Error(ErrorCode::kParse, "manifest lacks a checkpoints array");
  }
  for (const auto& entry : json["checkpoints"]) {
    ManifestCheckpoint cp;
    cp.step = require_field<std::uint64_t>(entry, "step");
    cp.files = require_field<std::vector<std::string>>(entry, "files");
    if (cp.files.empty()) {
      throw Error(ErrorCode::kParse, "checkpoint at step " + std::to_string(cp.step) + " lists no files");
    }
    if (!m.checkpoints.empty() && cp.step <= m.checkpoints.back().step) {
      throw Error(ErrorCode::kNonMonotone,
                  "manifest step " + std::to_string(cp.step) + " does not increase");
    }
    m.checkpoints.push_back(std::move(cp));
  }
  if (json.contains("notes")) m.notes = json["notes"].get<std::string>();
  return m;
}

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path) {
  write_text_file(path, manifest_to_json(manifest).dump(2) + "\n");
}

RunManifest read_manifest(const std::filesystem::path& path) {
  Json json;
  try {
    json = Json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
  RunManifest manifest = manifest_from_json(json);
  const auto dir = path.parent_path();
  for (const auto& cp : manifest.checkpoints) {
    for (const auto& file : cp.files) {
      if (!std::filesystem::exists(dir / file)) {
        throw Error(ErrorCode::kIo, "manifest lists missing trace " + (dir / file).string());
      }
    }
  }
  return manifest;
}

// ---- CSV series ----

std::string format_number(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

namespace {

const std::vector<std::string> kFixedColumns = {"step", "score", "metric", "aux_loss"};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream stream(line);
  while (std::getline(stream, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char ch) { return !std::isspace(ch); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

bool is_absent(const std::string& cell) {
  if (cell.empty()) return true;
  std::string lower;
  for (const char ch : cell) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  return lower == "nan" || lower == "na";
}

double parse_double(const std::string& cell, std::size_t line, const std::string& column) {
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  if (!cell.empty() && *begin == '+') ++begin;
  const auto res = std::from_chars(begin, end, value);
  if (res.ec != std::errc() || res.ptr != end) {
    throw Error(ErrorCode::kParse, "row " + std::to_string(line) + ": column '" + column +
                                       "' has malformed number '" + cell + "'");
  }
  return value;
}

std::optional<double> parse_optional(const std::string& cell, std::size_t line,
                                     const std::string& column) {
  if (is_absent(cell)) return std::nullopt;
  const double v = parse_double(cell, line, column);
  if (std::isnan(v)) return std::nullopt;
  return v;
}

std::vector<std::string> read_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream stream(text);
  std::string line;
  while (std::getline(stream, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace

void SeriesTable::validate() const {
  for (const auto& name : extra_columns) {
    const auto it = extras.find(name);
    if (it == extras.end() || it->second.size() != rows.size()) {
      throw Error(ErrorCode::kShapeMismatch, "extra column '" + name + "' has the wrong length");
    }
  }
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].step <= rows[i - 1].step) {
      throw Error(ErrorCode::kNonMonotone, "step " + std::to_string(rows[i].step) + " at row " +
                                               std::to_string(i + 2) + " does not increase");
    }
  }
}

std::string write_series_string(const SeriesTable& table) {
  table.validate();
  std::string out = "step,score,metric,aux_loss";
  for (const auto& name : table.extra_columns) out += "," + name;
  out += "\n";
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& r = table.rows[i];
    out += std::to_string(r.step);
    out += "," + format_number(r.score);
    out += "," + format_number(optional_to_sentinel(r.metric));
    out += "," + format_number(optional_to_sentinel(r.aux_loss));
    for (const auto& name : table.extra_columns) out += "," + format_number(table.extras.at(name)[i]);
    out += "\n";
  }
  return out;
}

SeriesTable read_series_string(const std::string& text) {
  const std::vector<std::string> lines = read_lines(text);
  if (lines.empty()) throw Error(ErrorCode::kParse, "series CSV is empty");
  std::vector<std::string> header = split_csv_line(lines[0]);
  for (auto& h : header) h = trim(h);
  if (header.size() < 2) throw Error(ErrorCode::kParse, "series header needs at least step,score");
  for (std::size_t i = 0; i < std::min(header.size(), kFixedColumns.size()); ++i) {
    if (header[i] != kFixedColumns[i]) {
      throw Error(ErrorCode::kParse, "series header column " + std::to_string(i + 1) + " is '" +
                                         header[i] + "', expected '" + kFixedColumns[i] + "'");
    }
  }
  SeriesTable table;
  std::set<std::string> seen(header.begin(), header.end());
  if (seen.size() != header.size()) throw Error(ErrorCode::kParse, "series header repeats a column");
  for (std::size_t i = kFixedColumns.size(); i < header.size(); ++i) {
    table.extra_columns.push_back(header[i]);
    table.extras[header[i]];
  }

  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::size_t line_no = li + 1;
    if (trim(lines[li]).empty()) continue;
    std::vector<std::string> cells = split_csv_line(lines[li]);
    for (auto& c : cells) c = trim(c);
    if (cells.size() != header.size()) {
      throw Error(ErrorCode::kParse, "row " + std::to_string(line_no) + " has " +
                                         std::to_string(cells.size()) + " cells, header has " +
                                         std::to_string(header.size()));
    }
    select::TrajectoryRecord rec;
    {
      std::uint64_t step = 0;
      const auto res = std::from_chars(cells[0].data(), cells[0].data() + cells[0].size(), step);
      if (res.ec != std::errc() || res.ptr != cells[0].data() + cells[0].size()) {
        throw Error(ErrorCode::kParse, "row " + std::to_string(line_no) + ": step '" + cells[0] +
                                           "' is not a non-negative integer");
      }
      rec.step = step;
    }
    rec.score = parse_double(cells[1], line_no, "score");
    if (!std::isfinite(rec.score)) {
      throw Error(ErrorCode::kNonFinite, "row " + std::to_string(line_no) + ": score is not finite");
    }
    if (header.size() > 2) rec.metric = parse_optional(cells[2], line_no, "metric");
    if (header.size() > 3) rec.aux_loss = parse_optional(cells[3], line_no, "aux_loss");
    for (std::size_t c = kFixedColumns.size(); c < header.size(); ++c) {
      const auto v = parse_optional(cells[c], line_no, header[c]);
      table.extras[header[c]].push_back(v.value_or(std::numeric_limits<double>::quiet_NaN()));
    }
    if (!table.rows.empty() && rec.step <= table.rows.back().step) {
      throw Error(ErrorCode::kNonMonotone, "row " + std::to_string(line_no) + ": step " +
                                               std::to_string(rec.step) + " does not increase");
    }
    table.rows.push_back(rec);
  }
  return table;
}

void write_series(const SeriesTable& table, const std::filesystem::path& path) {
  write_text_file(path, write_series_string(table));
}

SeriesTable read_series(const std::filesystem::path& path) {
  try {
    return read_series_string(read_text_file(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kIo) throw;
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

std::vector<stats::ModelEntry> read_model_table(const std::filesystem::path& path) {
  const std::vector<std::string> lines = read_lines(read_text_file(path));
  if (lines.empty()) throw Error(ErrorCode::kParse, path.string() + ": model table is empty");
  std::vector<std::string> header = split_csv_line(lines[0]);
  for (auto& h : header) h = trim(h);
  if (header != std::vector<std::string>{"name", "score", "metric"}) {
    throw Error(ErrorCode::kParse, path.string() + ": model table header must be name,score,metric");
  }
  std::vector<stats::ModelEntry> entries;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    if (trim(lines[li]).empty()) continue;
    std::vector<std::string> cells = split_csv_line(lines[li]);
    for (auto& c : cells) c = trim(c);
    if (cells.size() != 3) {
      throw Error(ErrorCode::kParse, path.string() + ": row " + std::to_string(li + 1) +
                                         " needs 3 cells");
    }
    entries.push_back({cells[0], parse_double(cells[1], li + 1, "score"),
                       parse_double(cells[2], li + 1, "metric")});
  }
  return entries;
}

void write_model_table(std::span<const stats::ModelEntry> entries, const std::filesystem::path& path) {
  std::string out = "name,score,metric\n";
  for (const auto& e : entries) {
    out += e.name + "," + format_number(e.score) + "," + format_number(e.metric) + "\n";
  }
  write_text_file(path, out);
}

// ---- JSON reports ----

Json to_json(const probe::ProbeScore& score) {
  Json j;
  j["mode"] = mode_name(score.mode);
  j["grad_fro"] = number(score.grad_fro);
  j["grad_l1"] = number(score.grad_l1);
  j["grad_linf"] = number(score.grad_linf);
  j["fisher_trace"] = number(score.fisher_trace);
  j["score_z"] = number(score.score_z);
  j["score_w"] = number(score.score_w);
  j["loss"] = number(score.loss);
  if (score.readouts) {
    j["confidence"] = number(score.readouts->confidence);
    j["entropy"] = number(score.readouts->entropy);
    j["margin"] = number(score.readouts->margin);
  } else {
    j["confidence"] = nullptr;
    j["entropy"] = nullptr;
    j["margin"] = nullptr;
  }
  j["eps_z"] = score.eps_z;
  j["eps_w"] = score.eps_w;
  return j;
}

Json to_json(const select::SelectionConfig& config) {
  Json j;
  j["ema_span"] = config.ema_span ? Json(*config.ema_span) : Json(nullptr);
  j["ema_beta"] = number(config.ema_beta);
  j["tail_size"] = config.tail_size ? Json(*config.tail_size) : Json(nullptr);
  j["tail_fraction"] = number(config.tail_fraction);
  j["quantile"] = config.quantile;
  j["patience"] = config.patience;
  j["max_lag"] = config.max_lag;
  j["repeats"] = config.repeats;
  j["orientation"] = orientation_name(config.orientation);
  return j;
}

Json to_json(const select::SelectionResult& result) {
  Json j;
  j["strategy"] = result.strategy;
  j["chosen_step"] = result.chosen_step;
  j["chosen_index"] = result.chosen_index;
  if (!result.candidates.empty()) j["candidates"] = result.candidates;
  if (result.gap) j["gap"] = number(result.gap);
  if (result.global_gap) j["global_gap"] = number(result.global_gap);
  if (result.oracle_step) j["oracle_step"] = *result.oracle_step;
  if (result.lag) {
    j["lag"] = *result.lag;
    j["lag_warning"] = result.lag_warning;
  }
  return j;
}

Json to_json(const stats::BootstrapInterval& interval) {
  Json j;
  j["ci_low"] = number(interval.low);
  j["ci_high"] = number(interval.high);
  j["standard_error"] = number(interval.standard_error);
  j["n_resamples"] = interval.n_resamples;
  j["n_degenerate"] = interval.n_degenerate;
  j["seed"] = interval.seed;
  return j;
}

Json to_json(const stats::CorrelationReport& report) {
  Json j;
  j["n"] = report.n;
  j["pearson_r"] = number(report.pearson_r);
  j["ci_low"] = number(report.pearson_ci.low);
  j["ci_high"] = number(report.pearson_ci.high);
  j["standard_error"] = number(report.pearson_ci.standard_error);
  j["n_resamples"] = report.pearson_ci.n_resamples;
  j["seed"] = report.pearson_ci.seed;
  j["p_value_pearson"] = number(report.p_value_pearson);
  j["spearman_rho"] = number(report.spearman_rho);
  j["spearman_ci"] = to_json(report.spearman_ci);
  if (report.loo) {
    Json loo;
    Json deltas = Json::array();
    for (const auto& d : report.loo->deltas) deltas.push_back(number(d));
    loo["deltas"] = std::move(deltas);
    loo["flagged"] = report.loo->flagged;
    loo["max_abs_delta"] = number(report.loo->max_abs_delta);
    loo["max_index"] = report.loo->max_index;
    j["loo"] = std::move(loo);
  } else {
    j["loo"] = nullptr;
  }
  return j;
}

Json to_json(const stats::RegressionReport& report) {
  Json j;
  j["n"] = report.n;
  j["intercept"] = number(report.intercept);
  j["score_coefficient"] = number(report.score_coefficient);
  j["step_coefficient"] = number(report.step_coefficient);
  j["r_squared"] = number(report.r_squared);
  j["r_squared_score_only"] = number(report.r_squared_score_only);
  j["score_t_statistic"] = number(report.score_t_statistic);
  j["partial_correlation"] = number(report.partial_correlation);
  return j;
}

Json to_json(const stats::RankingReport& report) {
  Json j;
  j["order"] = report.order;
  j["spearman_rho"] = number(report.spearman_rho);
  j["argmin_is_best"] = report.argmin_is_best;
  return j;
}

Json to_json(const select::SweepTable& table) {
  Json j;
  Json cells = Json::array();
  for (const auto& c : table.cells) {
    Json cell;
    cell["ema_span"] = c.ema_span;
    cell["tail_size"] = c.tail_size;
    cell["chosen_step"] = c.chosen_step;
    cell["gap"] = number(c.gap);
    cells.push_back(std::move(cell));
  }
  j["cells"] = std::move(cells);
  j["universal_cell"] = table.universal_cell ? Json(*table.universal_cell) : Json(nullptr);
  j["best_cell"] = table.best_cell;
  return j;
}

Json make_report(const std::string& kind, std::uint64_t seed, const Json& config, Json body) {
  Json j;
  j["tool"] = "gradprobe";
  j["version"] = kToolVersion;
  j["kind"] = kind;
  j["seed"] = seed;
  j["config"] = config;
  j["result"] = std::move(body);
  return j;
}

std::string dump_report(const Json& report) { return report.dump(2) + "\n"; }

void write_report(const Json& report, const std::filesystem::path& path) {
  write_text_file(path, dump_report(report));
}

Json read_report(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
}

namespace {

void expect(bool ok, std::vector<std::string>& problems, const std::string& message) {
  if (!ok) problems.push_back(message);
}

bool is_number_or_null(const Json& j) { return j.is_number() || j.is_null(); }

void check_correlation(const Json& c, const std::string& where, std::vector<std::string>& problems) {
  expect(c.is_object(), problems, where + " must be an object");
  if (!c.is_object()) return;
  for (const char* key : {"pearson_r", "spearman_rho", "ci_low", "ci_high"}) {
    expect(c.contains(key) && c[key].is_number(), problems, where + "." + key + " must be a number");
  }
  for (const char* key : {"n", "n_resamples", "seed"}) {
    expect(c.contains(key) && c[key].is_number_unsigned(), problems,
           where + "." + key + " must be an unsigned integer");
  }
  if (c.contains("pearson_r") && c["pearson_r"].is_number()) {
    const double r = c["pearson_r"].get<double>();
    expect(r >= -1.0 && r <= 1.0, problems, where + ".pearson_r outside [-1, 1]");
  }
  if (c.contains("ci_low") && c.contains("ci_high") && c["ci_low"].is_number() &&
      c["ci_high"].is_number()) {
    expect(c["ci_low"].get<double>() <= c["ci_high"].get<double>(), problems,
           where + ".ci_low exceeds ci_high");
  }
  expect(c.contains("spearman_ci") && c["spearman_ci"].is_object(), problems,
         where + ".spearman_ci must be an object");
  expect(c.contains("loo"), problems, where + ".loo missing");
}

}  // namespace

std::vector<std::string> check_report_schema(const Json& report) {
  std::vector<std::string> problems;
  if (!report.is_object()) return {"report must be a JSON object"};
  expect(report.contains("tool") && report["tool"] == "gradprobe", problems, "tool must be \"gradprobe\"");
  expect(report.contains("version") && report["version"].is_string(), problems, "version must be a string");
  expect(report.contains("seed") && report["seed"].is_number_unsigned(), problems,
         "seed must be an unsigned integer");
  expect(report.contains("config") && report["config"].is_object(), problems, "config must be an object");
  expect(report.contains("result") && report["result"].is_object(), problems, "result must be an object");
  static const std::set<std::string> kinds = {"probe", "selection", "correlation", "sweep", "report"};
  const bool kind_ok = report.contains("kind") && report["kind"].is_string() &&
                       kinds.count(report["kind"].get<std::string>()) > 0;
  expect(kind_ok, problems, "kind must be one of probe/selection/correlation/sweep/report");
  if (!kind_ok || !problems.empty()) return problems;

  const std::string kind = report["kind"];
  const Json& result = report["result"];
  if (kind == "probe") {
    expect(result.contains("checkpoints") && result["checkpoints"].is_array(), problems,
           "result.checkpoints must be an array");
    if (problems.empty()) {
      for (const auto& cp : result["checkpoints"]) {
        expect(cp.contains("step") && cp["step"].is_number_unsigned(), problems,
               "checkpoint step must be an unsigned integer");
        expect(cp.contains("scores") && cp["scores"].is_array(), problems,
               "checkpoint scores must be an array");
        if (!cp.contains("scores") || !cp["scores"].is_array()) continue;
        for (const auto& s : cp["scores"]) {
          for (const char* key : {"grad_fro", "grad_l1", "grad_linf", "score_z", "score_w", "loss"}) {
            expect(s.contains(key) && is_number_or_null(s[key]), problems,
                   std::string("probe score field ") + key + " missing");
          }
        }
      }
    }
  } else if (kind == "selection") {
    expect(result.contains("strategies") && result["strategies"].is_object(), problems,
           "result.strategies must be an object");
    if (problems.empty()) {
      for (const auto& [name, s] : result["strategies"].items()) {
        expect(s.contains("chosen_step") && s["chosen_step"].is_number_unsigned(), problems,
               "strategy " + name + " lacks chosen_step");
        if (s.contains("gap")) {
          expect(s["gap"].is_number() && s["gap"].get<double>() >= 0.0, problems,
                 "strategy " + name + " has a negative or non-numeric gap");
        }
      }
    }
  } else if (kind == "correlation") {
    expect(result.contains("correlation"), problems, "result.correlation missing");
    if (result.contains("correlation")) check_correlation(result["correlation"], "result.correlation", problems);
    if (result.contains("regression") && !result["regression"].is_null()) {
      const Json& reg = result["regression"];
      expect(reg.contains("r_squared") && reg["r_squared"].is_number(), problems,
             "result.regression.r_squared must be a number");
    }
  } else if (kind == "sweep") {
    expect(result.contains("cells") && result["cells"].is_array(), problems, "result.cells must be an array");
    expect(result.contains("best_cell") && result["best_cell"].is_number_unsigned(), problems,
           "result.best_cell must be an unsigned integer");
  } else if (kind == "report") {
    expect(result.contains("correlation"), problems, "result.correlation missing");
    if (result.contains("correlation")) check_correlation(result["correlation"], "result.correlation", problems);
    expect(result.contains("fit") && result["fit"].is_object(), problems, "result.fit must be an object");
    expect(result.contains("plots") && result["plots"].is_array(), problems, "result.plots must be an array");
  }
  return problems;
}

// ---- SVG scatter ----

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (const char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(ch);
    }
  }
  return out;
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

ScatterPlot emit_scatter(const stats::PairedSample& sample, const ScatterOptions& options) {
  sample.validate(2);
  std::vector<double> xs = sample.x;
  if (options.log10_x) {
    std::string bad;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (!(xs[i] > 0.0)) bad += (bad.empty() ? "" : ", ") + std::to_string(i);
    }
    if (!bad.empty()) {
      throw Error(ErrorCode::kInvalidArgument, "log10 x-axis needs positive x; offending points: " + bad);
    }
    for (double& x : xs) x = std::log10(x);
  }
  const auto n = static_cast<double>(xs.size());
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += sample.y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0;
  double sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (sample.y[i] - my);
  }
  if (sxx == 0.0) throw Error(ErrorCode::kDegenerateSample, "all x values coincide; no fit line");
  ScatterPlot plot;
  plot.slope = sxy / sxx;
  plot.intercept = my - plot.slope * mx;

  const auto [xmin_it, xmax_it] = std::minmax_element(xs.begin(), xs.end());
  const auto [ymin_it, ymax_it] = std::minmax_element(sample.y.begin(), sample.y.end());
  double x0 = *xmin_it;
  double x1 = *xmax_it;
  double y0 = std::min(*ymin_it, plot.intercept + plot.slope * x0);
  double y1 = std::max(*ymax_it, plot.intercept + plot.slope * x1);
  y0 = std::min(y0, plot.intercept + plot.slope * x1);
  y1 = std::max(y1, plot.intercept + plot.slope * x0);
  if (y1 == y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double xpad = 0.05 * (x1 - x0);
  const double ypad = 0.05 * (y1 - y0);
  x0 -= xpad;
  x1 += xpad;
  y0 -= ypad;
  y1 += ypad;

  const double left = 70.0;
  const double right = static_cast<double>(options.width) - 20.0;
  const double top = 40.0;
  const double bottom = static_cast<double>(options.height) - 60.0;
  const auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * (right - left); };
  const auto sy = [&](double y) { return bottom - (y - y0) / (y1 - y0) * (bottom - top); };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(options.width) +
         "\" height=\"" + std::to_string(options.height) + "\" viewBox=\"0 0 " +
         std::to_string(options.width) + " " + std::to_string(options.height) + "\">\n";
  svg += "  <title>" + xml_escape(options.title) + "</title>\n";
  svg += "  <rect x=\"0\" y=\"0\" width=\"" + std::to_string(options.width) + "\" height=\"" +
         std::to_string(options.height) + "\" fill=\"white\"/>\n";
  svg += "  <text x=\"" + px(0.5 * (left + right)) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" +
         xml_escape(options.title) + "</text>\n";
  svg += "  <line class=\"axis\" x1=\"" + px(left) + "\" y1=\"" + px(bottom) + "\" x2=\"" + px(right) +
         "\" y2=\"" + px(bottom) + "\" stroke=\"black\"/>\n";
  svg += "  <line class=\"axis\" x1=\"" + px(left) + "\" y1=\"" + px(top) + "\" x2=\"" + px(left) +
         "\" y2=\"" + px(bottom) + "\" stroke=\"black\"/>\n";
  std::string x_label = options.log10_x ? "log10(" + options.x_label + ")" : options.x_label;
  x_label = xml_escape(x_label);
  if (options.x_lower_is_better) x_label += " &#8595; (lower is better)";
  svg += "  <text class=\"x-label\" x=\"" + px(0.5 * (left + right)) + "\" y=\"" +
         px(static_cast<double>(options.height) - 20.0) + "\" text-anchor=\"middle\" font-size=\"13\">" +
         x_label + "</text>\n";
  svg += "  <text class=\"y-label\" x=\"18\" y=\"" + px(0.5 * (top + bottom)) +
         "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 " +
         px(0.5 * (top + bottom)) + ")\">" + xml_escape(options.y_label) + "</text>\n";
  for (const auto& [value, anchor] : {std::pair{x0 + xpad, "start"}, std::pair{x1 - xpad, "end"}}) {
    svg += "  <text class=\"x-tick\" x=\"" + px(sx(value)) + "\" y=\"" + px(bottom + 16.0) +
           "\" text-anchor=\"" + anchor + "\" font-size=\"10\">" + format_number(value) + "</text>\n";
  }
  for (const double value : {y0 + ypad, y1 - ypad}) {
    svg += "  <text class=\"y-tick\" x=\"" + px(left - 4.0) + "\" y=\"" + px(sy(value)) +
           "\" text-anchor=\"end\" font-size=\"10\">" + format_number(value) + "</text>\n";
  }
  const double fx0 = x0 + xpad;
  const double fx1 = x1 - xpad;
  svg += "  <line class=\"fit\" data-slope=\"" + format_number(plot.slope) + "\" data-intercept=\"" +
         format_number(plot.intercept) + "\" x1=\"" + px(sx(fx0)) + "\" y1=\"" +
         px(sy(plot.intercept + plot.slope * fx0)) + "\" x2=\"" + px(sx(fx1)) + "\" y2=\"" +
         px(sy(plot.intercept + plot.slope * fx1)) + "\" stroke=\"#d62728\" stroke-dasharray=\"6 4\"/>\n";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    svg += "  <circle class=\"point\" data-x=\"" + format_number(sample.x[i]) + "\" data-y=\"" +
           format_number(sample.y[i]) + "\"";
    if (!sample.labels.empty()) svg += " data-label=\"" + xml_escape(sample.labels[i]) + "\"";
    svg += " cx=\"" + px(sx(xs[i])) + "\" cy=\"" + px(sy(sample.y[i])) +
           "\" r=\"4\" fill=\"#1f77b4\"/>\n";
  }
  svg += "</svg>\n";
  plot.svg = std::move(svg);
  return plot;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

}  // namespace gradprobe::io
