#pragma once

#include <array>
#include <cstddef>
#include <string>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "aad/core.hpp"

namespace aad {

struct ConfusionCounts {
  std::size_t tp = 0;  // predicted 1, label 1
  std::size_t fp = 0;  // predicted 1, label 0
  std::size_t fn = 0;  // predicted 0, label 1
  std::size_t tn = 0;  // predicted 0, label 0

  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct DimensionScore {
  ConfusionCounts counts;
  double f1_class0 = 0.0;
  double f1_class1 = 0.0;
  double macro_f1 = 0.0;
};

struct EvalResult {
  std::array<DimensionScore, kNumDimensions> dims;
  double average = 0.0;
  std::size_t n_users = 0;

  double operator[](Dimension m) const { return dims[index_of(m)].macro_f1; }
  /// {"IE":…, "SN":…, "TF":…, "PJ":…, "avg":…, "n_users":…, "confusion":{…}}
  nlohmann::json to_json() const;
};

/// F1 of one class from its confusion counts; 0 when the class has no support
/// and was never predicted.
double f1_score(std::size_t true_pos, std::size_t false_pos, std::size_t false_neg) noexcept;

/// predictions and labels: n x 4 with entries 0/1. Throws ValidationError on an
/// empty set and DimensionMismatch on shape disagreement. Empty-support classes
/// score 0 and log a warning.
EvalResult macro_f1(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& labels);

/// Thresholds probabilities at 0.5 (p >= 0.5 means label 1).
Eigen::MatrixXd threshold(const Eigen::MatrixXd& probabilities, double cut = 0.5);

}  // namespace aad
