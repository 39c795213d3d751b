#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "aad/core.hpp"
#include "aad/detect.hpp"
#include "aad/encode.hpp"
#include "aad/metrics.hpp"
#include "aad/model.hpp"

namespace aad {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct Stage1Config {
  double lr = 5e-4;
  std::size_t batch = 64;
  std::size_t epochs = 100;
};

struct Stage2Config {
  double lr = 1e-4;
  std::size_t batch = 32;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
};

struct TrainConfig {
  Stage1Config stage1;
  Stage2Config stage2;
  double lambda_q = 1.0;
  double lambda_cls = 0.05;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::optional<double> grad_clip;  // max global L2 norm of the stepped range

  void validate() const;
};

/// Per-user features and supervision, rows aligned with the dataset order.
struct TrainingData {
  std::vector<std::string> user_ids;
  Eigen::MatrixXd users;    // n x d
  Eigen::MatrixXd items;    // |Q| x (d + 4), [q_i; one_hot]
  Eigen::MatrixXd targets;  // n x |Q| normalized answer means; NaN where missing
  Eigen::MatrixXd labels;   // n x 4; NaN for unlabeled users
  std::vector<Eigen::Index> train, validation, test;

  Eigen::Index n_items() const noexcept { return items.rows(); }
  /// Rows `rows` of `m`, in order.
  static Eigen::MatrixXd gather(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& rows);
};

/// Embeds users and items and lays out targets and labels. Every training-split
/// user must be labeled and fully covered by the store (ValidationError lists the
/// first gaps otherwise).
TrainingData prepare_training_data(const std::vector<UserRecord>& dataset, const Questionnaire& questionnaire,
                                   const EmbeddingProvider& provider, const AnswerStore& store);

/// Copy of `data` whose training split keeps `fraction` of its users, chosen
/// uniformly with `seed`; validation and test are untouched.
TrainingData subsample_train(const TrainingData& data, double fraction, std::uint64_t seed);

/// Copy of `data` restricted to the given item columns.
TrainingData select_items(const TrainingData& data, const std::vector<std::size_t>& items);

struct EpochRecord {
  int stage = 1;
  std::size_t epoch = 0;  // 1-based within the stage
  double answer_loss = 0.0;
  std::optional<double> cls_loss;
  double joint_loss = 0.0;
  std::optional<EvalResult> validation;
  double lr = 0.0;
  double seconds = 0.0;
  bool rolled_back = false;  // stage 1: the epoch increased the loss and was undone

  nlohmann::json to_json() const;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::optional<std::size_t> best_epoch;  // stage 2
  std::optional<double> best_validation;
  std::string best_checkpoint;            // empty when no checkpoint was written

  void append(const TrainReport& other);
};

/// Receives each epoch as soon as it completes (e.g. to append JSON Lines).
using EpochSink = std::function<void(const EpochRecord&)>;

/// Bias-corrected Adam over a contiguous range of the flat parameter vector.
class Adam {
 public:
  Adam(AdamConfig config, ParamRange range);
  void step(std::span<double> params, std::span<const double> grad, double lr);
  std::size_t steps() const noexcept { return t_; }

  friend bool operator==(const Adam&, const Adam&) = default;

 private:
  AdamConfig config_;
  ParamRange range_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

/// Scales grad[range] so its L2 norm is at most max_norm. Returns the norm before clipping.
double clip_gradient(std::span<double> grad, ParamRange range, double max_norm);

/// Mean answer loss over every (user, item) pair of `rows` with a target.
double answer_loss_over(const Model& model, const TrainingData& data, const std::vector<Eigen::Index>& rows);

/// Mean |a_hat - normalized target| over the same pairs.
double answer_mae(const Model& model, const TrainingData& data, const std::vector<Eigen::Index>& rows);

/// Stage 1: answer regression over the training pairs, MoE parameters only.
/// After each epoch the full training loss is measured; an epoch that raises it
/// is undone (parameters and optimizer state) and the learning rate is halved.
TrainReport pretrain_answer_module(Model& model, const TrainingData& data, const TrainConfig& config,
                                   const EpochSink& sink = {});

struct JointBatchLoss {
  double answer = 0.0;          // L_q over the batch users' answered items
  double classification = 0.0;  // L_cls over the batch users
  double joint = 0.0;           // lambda_q * L_q + lambda_cls * L_cls
};

/// One stage-2 step's objective over the users `rows` (every item of each user is
/// predicted). Adds the gradient of the joint loss into `grad` unless it is empty.
JointBatchLoss joint_batch_loss(const Model& model, const TrainingData& data, const std::vector<Eigen::Index>& rows,
                                const Eigen::VectorXd& weights, double lambda_q, double lambda_cls, FusionMode fusion,
                                std::span<double> grad);

struct JointOptions {
  FusionMode fusion = FusionMode::gated;
  /// Written whenever validation improves; empty to skip.
  std::filesystem::path checkpoint_path;
};

/// Stage 2: lambda_q * L_q + lambda_cls * L_cls over user batches, all parameters.
/// Early-stops on validation average macro-F1 and leaves the best parameters in `model`.
TrainReport joint_train(Model& model, const TrainingData& data, const Eigen::VectorXd& weights,
                        const TrainConfig& config, const JointOptions& options = {}, const EpochSink& sink = {});

/// Probabilities and macro-F1 for the given rows.
EvalResult evaluate(const Model& model, const TrainingData& data, const std::vector<Eigen::Index>& rows,
                    const InferenceOptions& options, Eigen::MatrixXd* probabilities = nullptr);

}  // namespace aad
