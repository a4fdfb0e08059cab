#include "gradprobe/probe_core.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gradprobe {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kLabelOutOfRange: return "label_out_of_range";
    case ErrorCode::kUnsupportedMode: return "unsupported_mode";
    case ErrorCode::kDivisionGuard: return "division_guard";
    case ErrorCode::kConfigConflict: return "config_conflict";
    case ErrorCode::kEmptyWindow: return "empty_window";
    case ErrorCode::kDegenerateSample: return "degenerate_sample";
    case ErrorCode::kUnstableInterval: return "unstable_interval";
    case ErrorCode::kCollinear: return "collinear";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kBadVersion: return "bad_version";
    case ErrorCode::kBadMode: return "bad_mode";
    case ErrorCode::kBadDtype: return "bad_dtype";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kTrailingBytes: return "trailing_bytes";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kNonMonotone: return "non_monotone";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kDiverged: return "diverged";
  }
  return "unknown";
}

namespace probe {
namespace {

std::string dims(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw Error(ErrorCode::kNonFinite, std::string(what) + " contains non-finite entries");
  }
}

void check_labels(std::span<const std::uint32_t> labels, Eigen::Index num_classes,
                  Eigen::Index batch) {
  if (static_cast<Eigen::Index>(labels.size()) != batch) {
    throw Error(ErrorCode::kShapeMismatch,
                "label count " + std::to_string(labels.size()) +
                    " does not match batch size " + std::to_string(batch));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (static_cast<Eigen::Index>(labels[i]) >= num_classes) {
      throw Error(ErrorCode::kLabelOutOfRange,
                  "label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                      " is outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

double frobenius(const Matrix& m) { return m.norm(); }

}  // namespace

void ProbeBatch::validate() const {
  const auto d = features.rows();
  const auto b = features.cols();
  const auto c = head.rows();
  if (d < 1 || b < 1) {
    throw Error(ErrorCode::kShapeMismatch, "features must be non-empty, got " + dims(features));
  }
  if (head.cols() != d) {
    throw Error(ErrorCode::kShapeMismatch,
                "head is " + dims(head) + " but features are " + dims(features) +
                    " (head columns must equal feature rows)");
  }
  require_finite(features, "features");
  require_finite(head, "head weights");
  if (mode == Mode::kClassification) {
    if (c < 2) {
      throw Error(ErrorCode::kShapeMismatch,
                  "classification needs at least 2 classes, head is " + dims(head));
    }
    check_labels(labels, c, b);
  } else {
    if (c < 1) {
      throw Error(ErrorCode::kShapeMismatch, "regression head has no outputs");
    }
    if (targets.rows() != c || targets.cols() != b) {
      throw Error(ErrorCode::kShapeMismatch,
                  "regression targets are " + dims(targets) + ", expected " +
                      std::to_string(c) + "x" + std::to_string(b));
    }
    require_finite(targets, "regression targets");
  }
}

ProbMatrix softmax_columns(const Matrix& logits) {
  Matrix probs(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const auto col = logits.col(j);
    if (!col.allFinite()) {
      throw Error(ErrorCode::kNonFinite,
                  "logit column " + std::to_string(j) + " contains non-finite entries");
    }
    const double shift = col.maxCoeff();
    auto out = probs.col(j);
    out = (col.array() - shift).exp().matrix();
    out /= out.sum();
  }
  return ProbMatrix(std::move(probs));
}

double cross_entropy_from_logits(const Matrix& logits,
                                 std::span<const std::uint32_t> labels) {
  check_labels(labels, logits.rows(), logits.cols());
  require_finite(logits, "logits");
  double total = 0.0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const auto col = logits.col(j);
    const double shift = col.maxCoeff();
    const double lse = shift + std::log((col.array() - shift).exp().sum());
    total += lse - col(labels[static_cast<std::size_t>(j)]);
  }
  return total / static_cast<double>(logits.cols());
}

double cross_entropy(const ProbMatrix& probs, std::span<const std::uint32_t> labels) {
  const Matrix& p = probs.values();
  check_labels(labels, p.rows(), p.cols());
  double total = 0.0;
  for (Eigen::Index j = 0; j < p.cols(); ++j) {
    total -= std::log(p(labels[static_cast<std::size_t>(j)], j));
  }
  return total / static_cast<double>(p.cols());
}

double half_mse(const Matrix& predictions, const Matrix& targets) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
    throw Error(ErrorCode::kShapeMismatch,
                "predictions are " + dims(predictions) + ", targets are " + dims(targets));
  }
  return 0.5 * (predictions - targets).squaredNorm() / static_cast<double>(targets.cols());
}

double batch_loss(const ProbeBatch& batch) {
  batch.validate();
  const Matrix logits = batch.head * batch.features;
  if (batch.mode == Mode::kClassification) {
    return cross_entropy_from_logits(logits, batch.labels);
  }
  return half_mse(logits, batch.targets);
}

namespace {

// Residual (P - Y) for classification or (W Z - Y) for regression, C x B.
Matrix output_residual(const ProbeBatch& batch, const Matrix& logits) {
  if (batch.mode == Mode::kClassification) {
    Matrix residual = softmax_columns(logits).values();
    for (Eigen::Index j = 0; j < residual.cols(); ++j) {
      residual(batch.labels[static_cast<std::size_t>(j)], j) -= 1.0;
    }
    return residual;
  }
  return logits - batch.targets;
}

}  // namespace

Matrix head_gradient(const ProbeBatch& batch) {
  batch.validate();
  const Matrix logits = batch.head * batch.features;
  const Matrix residual = output_residual(batch, logits);
  return residual * batch.features.transpose() / static_cast<double>(batch.batch_size());
}

GradientNorms gradient_norms(const Matrix& gradient) {
  require_finite(gradient, "gradient");
  if (gradient.size() == 0) return {};
  return {gradient.cwiseAbs().sum(), gradient.norm(), gradient.cwiseAbs().maxCoeff()};
}

double fisher_trace(const ProbeBatch& batch) {
  if (batch.mode != Mode::kClassification) {
    throw Error(ErrorCode::kUnsupportedMode, "Fisher trace is defined for classification only");
  }
  batch.validate();
  const Matrix logits = batch.head * batch.features;
  const Matrix residual = output_residual(batch, logits);
  // Each per-example gradient is rank one, so its squared Frobenius norm factorizes.
  const Eigen::ArrayXd per_example =
      residual.colwise().squaredNorm().array() * batch.features.colwise().squaredNorm().array();
  return per_example.mean();
}

NormalizedScores normalized_scores(double grad_fro, const Matrix& features, const Matrix& head,
                                   double eps_z, double eps_w) {
  if (!(eps_z >= 0.0) || !(eps_w >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "eps_z and eps_w must be non-negative");
  }
  const double z_norm = frobenius(features);
  const double w_norm = frobenius(head);
  if (eps_z == 0.0 && z_norm < 1e-12) {
    throw Error(ErrorCode::kDivisionGuard, "||Z||_F is below 1e-12 and eps_z is 0");
  }
  if (eps_w == 0.0 && w_norm < 1e-12) {
    throw Error(ErrorCode::kDivisionGuard, "||W||_F is below 1e-12 and eps_w is 0");
  }
  return {grad_fro / (z_norm + eps_z), grad_fro / (w_norm + eps_w)};
}

OutputReadouts output_readouts(const ProbMatrix& probs) {
  const Matrix& p = probs.values();
  OutputReadouts out;
  if (p.cols() == 0) return out;
  for (Eigen::Index j = 0; j < p.cols(); ++j) {
    double top1 = -1.0;
    double top2 = -1.0;
    double entropy = 0.0;
    for (Eigen::Index c = 0; c < p.rows(); ++c) {
      const double v = p(c, j);
      if (v > top1) {
        top2 = top1;
        top1 = v;
      } else if (v > top2) {
        top2 = v;
      }
      if (v > 0.0) entropy -= v * std::log(v);
    }
    if (top2 < 0.0) top2 = 0.0;
    out.confidence += top1;
    out.entropy += entropy;
    out.margin += top1 - top2;
  }
  const auto n = static_cast<double>(p.cols());
  out.confidence /= n;
  out.entropy /= n;
  out.margin /= n;
  return out;
}

ProbeScore probe(const ProbeBatch& batch, double eps_z, double eps_w) {
  batch.validate();
  const auto b = static_cast<double>(batch.batch_size());
  const Matrix logits = batch.head * batch.features;

  ProbeScore score;
  score.mode = batch.mode;
  score.eps_z = eps_z;
  score.eps_w = eps_w;

  Matrix residual;
  if (batch.mode == Mode::kClassification) {
    const ProbMatrix probs = softmax_columns(logits);
    score.loss = cross_entropy_from_logits(logits, batch.labels);
    score.readouts = output_readouts(probs);
    residual = probs.values();
    for (Eigen::Index j = 0; j < residual.cols(); ++j) {
      residual(batch.labels[static_cast<std::size_t>(j)], j) -= 1.0;
    }
    score.fisher_trace = (residual.colwise().squaredNorm().array() *
                          batch.features.colwise().squaredNorm().array())
                             .mean();
  } else {
    score.loss = half_mse(logits, batch.targets);
    residual = logits - batch.targets;
  }

  const Matrix gradient = residual * batch.features.transpose() / b;
  const GradientNorms norms = gradient_norms(gradient);
  score.grad_fro = norms.fro;
  score.grad_l1 = norms.l1;
  score.grad_linf = norms.linf;
  const NormalizedScores normalized =
      normalized_scores(norms.fro, batch.features, batch.head, eps_z, eps_w);
  score.score_z = normalized.score_z;
  score.score_w = normalized.score_w;
  return score;
}

}  // namespace probe
}  // namespace gradprobe
