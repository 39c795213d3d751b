#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aad/core.hpp"
#include "aad/model.hpp"
#include "aad/train.hpp"

namespace aad::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("aad-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// `n_items` items (ids Q1..) with constructs cycling IE SN TF PJ IE ...
inline Questionnaire small_questionnaire(std::size_t n_items) {
  std::vector<Item> items;
  for (std::size_t i = 0; i < n_items; ++i) {
    items.push_back({"Q" + std::to_string(i + 1), "item number " + std::to_string(i + 1),
                     dimension_from_index(i % kNumDimensions), 1, 7});
  }
  return Questionnaire("test-" + std::to_string(n_items), std::move(items));
}

/// A small model with every parameter drawn from N(0, scale) and random
/// features, targets and labels. One target is missing to exercise masking.
struct TinyProblem {
  Questionnaire questionnaire;
  Model model;
  TrainingData data;
  Eigen::VectorXd weights;
};

inline TinyProblem tiny_problem(std::uint64_t seed, std::size_t d = 8, std::size_t k = 3, std::size_t n_items = 6,
                                std::size_t n_users = 4, double scale = 0.5) {
  TinyProblem p;
  p.questionnaire = small_questionnaire(n_items);
  MoeConfig moe;
  moe.embed_dim = d;
  moe.n_experts = k;
  moe.expert_hidden = 5;
  moe.router_hidden = 6;
  moe.init_seed = seed;
  p.model = Model(ModelConfig::for_questionnaire(moe, p.questionnaire, "hashing"));
  std::mt19937_64 rng(seed * 7919 + 1);
  std::normal_distribution<double> normal(0.0, scale);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (double& x : p.model.params()) x = normal(rng);

  const auto n = static_cast<Eigen::Index>(n_users);
  const auto q = static_cast<Eigen::Index>(n_items);
  const auto dd = static_cast<Eigen::Index>(d);
  p.data.users = Eigen::MatrixXd(n, dd);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < dd; ++c) p.data.users(r, c) = normal(rng);
    p.data.users.row(r).normalize();
  }
  Eigen::MatrixXd item_emb(q, dd);
  for (Eigen::Index r = 0; r < q; ++r) {
    for (Eigen::Index c = 0; c < dd; ++c) item_emb(r, c) = normal(rng);
    item_emb.row(r).normalize();
  }
  p.data.items = item_features(item_emb, p.questionnaire);
  p.data.targets = Eigen::MatrixXd(n, q);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < q; ++c) p.data.targets(r, c) = unit(rng);
  }
  p.data.targets(n - 1, q - 1) = std::numeric_limits<double>::quiet_NaN();
  p.data.labels = Eigen::MatrixXd(n, 4);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < 4; ++c) p.data.labels(r, c) = static_cast<double>((r + c) % 2);
  }
  for (Eigen::Index r = 0; r < n; ++r) {
    p.data.user_ids.push_back("u" + std::to_string(r));
    p.data.train.push_back(r);
  }
  p.weights = Eigen::VectorXd(q);
  for (Eigen::Index i = 0; i < q; ++i) p.weights[i] = 0.2 + 0.8 * unit(rng);
  return p;
}

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Central differences of `loss` around `params`, compared with `analytic`.
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline FdReport finite_difference_check(std::span<double> params, const std::vector<double>& analytic,
                                        const std::function<double()>& loss, double h = 1e-5,
                                        double floor = 1e-6) {
  FdReport r;
  for (std::size_t j = 0; j < params.size(); ++j) {
    const double saved = params[j];
    params[j] = saved + h;
    const double up = loss();
    params[j] = saved - h;
    const double down = loss();
    params[j] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), floor});
    const double rel = std::abs(analytic[j] - numeric) / denom;
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = j;
    }
    ++r.checked;
  }
  return r;
}

}  // namespace aad::testing
