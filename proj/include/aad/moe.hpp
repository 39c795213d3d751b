#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aad/core.hpp"
#include "aad/params.hpp"

namespace aad {

enum class Activation : std::uint8_t { relu, tanh };
enum class AnswerLossKind : std::uint8_t { l1, huber };

std::string_view to_string(Activation a) noexcept;
Activation parse_activation(std::string_view name);

struct MoeConfig {
  std::size_t n_experts = 32;
  std::size_t expert_hidden = 1024;
  std::size_t router_hidden = 256;
  std::size_t embed_dim = 256;  // d; the routing input has 2d + 4 entries
  Activation activation = Activation::relu;
  std::uint64_t init_seed = 0;
  AnswerLossKind loss = AnswerLossKind::l1;
  double huber_delta = 0.25;
  // Reserved name; no auxiliary load-balancing term is implemented or applied.
  bool load_balancing = false;

  std::size_t input_dim() const noexcept { return 2 * embed_dim + kNumDimensions; }
  void validate() const;

  friend bool operator==(const MoeConfig&, const MoeConfig&) = default;
};

/// [v_u; q_i; one_hot(construct)]. Throws DimensionMismatch when v and q differ in length.
Eigen::VectorXd build_routing_input(const Eigen::VectorXd& user, const Eigen::VectorXd& item,
                                    Dimension construct);

/// One-hot of the construct, as a row of length 4.
Eigen::RowVectorXd construct_one_hot(Dimension construct);

struct RoutingOutput {
  Eigen::VectorXd gate;            // softmax over experts, sums to 1
  Eigen::VectorXd expert_outputs;  // sigmoid-squashed expert answers in [0, 1]
  double prediction = 0.0;         // gate . expert_outputs
};

/// Pairs of (user row, item row) referencing the `users` and `items` matrices.
/// `items` rows are item-side features [q_i; one_hot]; `users` rows are v_u.
struct PairIndex {
  Eigen::Index user = 0;
  Eigen::Index item = 0;
};

struct PairBatch {
  const Eigen::MatrixXd& users;  // n_users x d
  const Eigen::MatrixXd& items;  // n_items x (d + 4)
  std::span<const PairIndex> pairs;
};

/// Item-side feature rows [q_i; one_hot(construct_i)] for a whole questionnaire.
Eigen::MatrixXd item_features(const Eigen::MatrixXd& item_embeddings, const Questionnaire& questionnaire);

enum class InitMode : std::uint8_t { standard, zeros };

/// Question-conditioned mixture of experts with a dense softmax router. Holds
/// the block layout only; parameters live in a caller-owned flat vector.
class AnswerMoe {
 public:
  AnswerMoe() = default;
  AnswerMoe(const MoeConfig& config, ParamLayout& layout);

  const MoeConfig& config() const noexcept { return config_; }
  ParamRange range() const noexcept { return range_; }

  void initialize(std::span<double> params, InitMode mode, std::mt19937_64& rng) const;

  RoutingOutput forward(std::span<const double> params, const Eigen::VectorXd& x) const;

  /// Predictions for every pair. When `gates` is given it receives the B x K gate matrix.
  Eigen::VectorXd predict(std::span<const double> params, const PairBatch& batch,
                          Eigen::MatrixXd* gates = nullptr) const;

  /// Accumulates d(sum_b d_pred[b] * pred[b]) / d(params) into `grad`.
  void backward(std::span<const double> params, const PairBatch& batch,
                std::span<const double> d_pred, std::span<double> grad) const;

  /// Mean answer loss over the batch; adds `scale` times its gradient into `grad`
  /// (pass an empty span to skip gradients). Targets are normalized answers.
  double loss_and_gradient(std::span<const double> params, const PairBatch& batch,
                           std::span<const double> targets, std::span<double> grad,
                           double scale = 1.0, Eigen::VectorXd* predictions = nullptr) const;

  /// Pointwise loss and its derivative with respect to the prediction.
  double pair_loss(double prediction, double target, double* d_prediction) const;

 private:
  struct Chunk;
  double accumulate(std::span<const double> params, const PairBatch& batch, std::span<const double> values,
                    bool raw_backward, double scale, std::span<double> grad, Eigen::VectorXd* predictions) const;
  void run_chunk(std::span<const double> params, const PairBatch& batch, std::size_t begin,
                 std::size_t end, const RowMatrixXd& user_router, const RowMatrixXd& item_router,
                 const RowMatrixXd& user_expert, const RowMatrixXd& item_expert,
                 const std::vector<Eigen::Index>& user_slot, const std::vector<Eigen::Index>& item_slot,
                 Chunk& out) const;
  void check_finite(std::span<const double> params, const Eigen::Ref<const Eigen::MatrixXd>& values,
                    const char* stage) const;

  MoeConfig config_;
  ParamRange range_;
  BlockSpec router_w1_, router_b1_, router_w2_, router_b2_;
  BlockSpec expert_w1_, expert_b1_, expert_w2_, expert_b2_;
};

/// Mean answer loss over (x, target) rows built with build_routing_input.
/// Gradient (same layout as `params`) is written to `grad` when non-empty.
double answer_loss(const AnswerMoe& moe, std::span<const double> params, const Eigen::MatrixXd& inputs,
                   std::span<const double> targets, std::span<double> grad);

}  // namespace aad
