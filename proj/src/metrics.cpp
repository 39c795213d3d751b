#include "aad/metrics.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace aad {

double f1_score(std::size_t true_pos, std::size_t false_pos, std::size_t false_neg) noexcept {
  const std::size_t denom = 2 * true_pos + false_pos + false_neg;
  if (denom == 0) return 0.0;
  return 2.0 * static_cast<double>(true_pos) / static_cast<double>(denom);
}

EvalResult macro_f1(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& labels) {
  if (predictions.rows() == 0) throw ValidationError("cannot score an empty set");
  if (predictions.rows() != labels.rows() || predictions.cols() != static_cast<Eigen::Index>(kNumDimensions) ||
      labels.cols() != static_cast<Eigen::Index>(kNumDimensions)) {
    throw DimensionMismatch("predictions and labels must both be n x 4");
  }
  EvalResult r;
  r.n_users = static_cast<std::size_t>(labels.rows());
  for (std::size_t m = 0; m < kNumDimensions; ++m) {
    const auto c = static_cast<Eigen::Index>(m);
    ConfusionCounts& k = r.dims[m].counts;
    for (Eigen::Index u = 0; u < labels.rows(); ++u) {
      const double y = labels(u, c);
      const double p = predictions(u, c);
      if ((y != 0.0 && y != 1.0) || (p != 0.0 && p != 1.0)) {
        throw ValidationError("predictions and labels must be 0/1");
      }
      if (p == 1.0) {
        (y == 1.0 ? k.tp : k.fp)++;
      } else {
        (y == 1.0 ? k.fn : k.tn)++;
      }
    }
    if (k.tp + k.fn == 0 || k.tn + k.fp == 0) {
      spdlog::warn("dimension {} has a class without support; its F1 counts as 0",
                   to_string(dimension_from_index(m)));
    }
    DimensionScore& s = r.dims[m];
    s.f1_class1 = (k.tp + k.fn == 0) ? 0.0 : f1_score(k.tp, k.fp, k.fn);
    s.f1_class0 = (k.tn + k.fp == 0) ? 0.0 : f1_score(k.tn, k.fn, k.fp);
    s.macro_f1 = 0.5 * (s.f1_class0 + s.f1_class1);
    r.average += s.macro_f1;
  }
  r.average /= static_cast<double>(kNumDimensions);
  return r;
}

Eigen::MatrixXd threshold(const Eigen::MatrixXd& probabilities, double cut) {
  return (probabilities.array() >= cut).cast<double>().matrix();
}

nlohmann::json EvalResult::to_json() const {
  nlohmann::json j;
  nlohmann::json confusion;
  for (std::size_t m = 0; m < kNumDimensions; ++m) {
    const std::string name(to_string(dimension_from_index(m)));
    j[name] = dims[m].macro_f1;
    const ConfusionCounts& k = dims[m].counts;
    confusion[name] = {{"tp", k.tp}, {"fp", k.fp}, {"fn", k.fn}, {"tn", k.tn}};
  }
  j["avg"] = average;
  j["n_users"] = n_users;
  j["confusion"] = confusion;
  return j;
}

}  // namespace aad
