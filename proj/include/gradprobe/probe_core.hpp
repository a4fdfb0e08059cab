#pragma once

// Head-only probe readouts for one exported checkpoint batch.
//
// Shapes follow the column-per-example convention:
//   features Z : d x B
//   head W     : C x d
//   logits     : C x B  (= W Z)
// All batch reductions are means, so duplicating a batch leaves every
// readout unchanged.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gradprobe/error.hpp"

namespace gradprobe::probe {

using Matrix = Eigen::MatrixXd;

enum class Mode : std::uint8_t { kClassification = 0, kRegression = 1 };

inline constexpr double kDefaultEps = 1e-12;

struct ProbeBatch {
  Matrix features;                    // d x B
  Matrix head;                        // C x d
  std::vector<std::uint32_t> labels;  // B entries, classification only
  Matrix targets;                     // C x B, regression only
  Mode mode = Mode::kClassification;

  Eigen::Index num_outputs() const { return head.rows(); }
  Eigen::Index feature_dim() const { return features.rows(); }
  Eigen::Index batch_size() const { return features.cols(); }

  /// Throws Error on any shape, range or finiteness violation.
  void validate() const;
};

/// Column-stochastic C x B matrix.
class ProbMatrix {
 public:
  explicit ProbMatrix(Matrix values) : values_(std::move(values)) {}
  const Matrix& values() const { return values_; }
  Eigen::Index num_classes() const { return values_.rows(); }
  Eigen::Index batch_size() const { return values_.cols(); }

 private:
  Matrix values_;
};

struct GradientNorms {
  double l1 = 0.0;
  double fro = 0.0;
  double linf = 0.0;
};

struct NormalizedScores {
  double score_z = 0.0;
  double score_w = 0.0;
};

struct OutputReadouts {
  double confidence = 0.0;
  double entropy = 0.0;
  double margin = 0.0;
};

struct ProbeScore {
  Mode mode = Mode::kClassification;
  double grad_fro = 0.0;
  double grad_l1 = 0.0;
  double grad_linf = 0.0;
  std::optional<double> fisher_trace;  // classification only
  double score_z = 0.0;
  double score_w = 0.0;
  double loss = 0.0;
  std::optional<OutputReadouts> readouts;  // classification only
  double eps_z = kDefaultEps;
  double eps_w = kDefaultEps;
};

ProbMatrix softmax_columns(const Matrix& logits);

/// Mean negative log-likelihood, evaluated with log-sum-exp on the logits.
double cross_entropy_from_logits(const Matrix& logits,
                                 std::span<const std::uint32_t> labels);

/// Mean negative log-likelihood of already-normalized probabilities.
double cross_entropy(const ProbMatrix& probs,
                     std::span<const std::uint32_t> labels);

/// (1/B) sum_i 1/2 ||(W Z)_i - y_i||^2.
double half_mse(const Matrix& predictions, const Matrix& targets);

/// Mean-reduced loss of the batch (cross-entropy or half-MSE).
double batch_loss(const ProbeBatch& batch);

/// Gradient of the mean-reduced loss with respect to the head only:
/// (1/B)(P - Y) Z^T for classification, (1/B)(W Z - Y) Z^T for regression.
Matrix head_gradient(const ProbeBatch& batch);

GradientNorms gradient_norms(const Matrix& gradient);

/// Empirical Fisher trace at the observed labels:
/// (1/B) sum_i ||(p_i - e_{y_i}) z_i^T||_F^2 = (1/B) sum_i ||p_i - e_{y_i}||^2 ||z_i||^2.
double fisher_trace(const ProbeBatch& batch);

NormalizedScores normalized_scores(double grad_fro, const Matrix& features,
                                   const Matrix& head, double eps_z = kDefaultEps,
                                   double eps_w = kDefaultEps);

OutputReadouts output_readouts(const ProbMatrix& probs);

ProbeScore probe(const ProbeBatch& batch, double eps_z = kDefaultEps,
                 double eps_w = kDefaultEps);

}  // namespace gradprobe::probe
