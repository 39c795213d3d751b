#pragma once

#include <array>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aad/core.hpp"
#include "aad/moe.hpp"
#include "aad/params.hpp"

namespace aad {

// ---------------------------------------------------------------------------
// Evidence weights (corpus statistics, frozen before joint training)
// ---------------------------------------------------------------------------

/// Min-max scaling to [0, 1]. When all values are equal the result is all zeros
/// and `degenerate` (if given) is set.
Eigen::VectorXd minmax_normalize(const Eigen::VectorXd& values, bool* degenerate = nullptr);

struct EvidenceWeights {
  std::vector<std::string> item_ids;
  Eigen::VectorXd q_unc;     // mean per-pair sample variance over training users
  Eigen::VectorXd q_rel;     // 1 - minmax(q_unc)
  Eigen::VectorXd imp_raw;   // |mu+ - mu-| on the item's own construct
  Eigen::VectorXd q_imp;     // minmax(imp_raw), uniform 1 when degenerate
  Eigen::VectorXd w;         // q_imp * q_rel

  /// All-ones weights (the no-weighting ablation).
  static EvidenceWeights uniform(const Questionnaire& questionnaire);

  void save_json(const std::filesystem::path& path) const;
  static EvidenceWeights load_json(const std::filesystem::path& path, const Questionnaire& questionnaire);
};

/// q_rel per item from training users only. Throws ValidationError on an empty store
/// or a missing (user, item) pair.
Eigen::VectorXd compute_reliability(const AnswerStore& store, const std::vector<const UserRecord*>& train_users,
                                    const Questionnaire& questionnaire, Eigen::VectorXd* q_unc = nullptr);

/// q_imp per item from class-conditional means of the answer means. Throws
/// ValidationError when a user lacks labels or a class is empty for a dimension.
Eigen::VectorXd compute_importance(const AnswerStore& store, const std::vector<const UserRecord*>& train_users,
                                   const Questionnaire& questionnaire, Eigen::VectorXd* raw = nullptr);

EvidenceWeights compute_evidence_weights(const AnswerStore& store,
                                         const std::vector<const UserRecord*>& train_users,
                                         const Questionnaire& questionnaire);

/// s_u = w (*) a_u.
Eigen::VectorXd weight_evidence(const Eigen::VectorXd& answers, const Eigen::VectorXd& weights);

/// Binary per-construct item masks; together they partition the items.
struct ConstructMask {
  std::array<Eigen::VectorXd, kNumDimensions> masks;

  static ConstructMask from(const Questionnaire& questionnaire);
  static ConstructMask from(const std::vector<Dimension>& item_constructs);
  const Eigen::VectorXd& operator[](Dimension m) const { return masks[index_of(m)]; }
};

Eigen::VectorXd mask_evidence(const Eigen::VectorXd& evidence, const ConstructMask& mask, Dimension m);

// ---------------------------------------------------------------------------
// Gated fusion and per-dimension classifiers
// ---------------------------------------------------------------------------

enum class FusionMode : std::uint8_t {
  gated,          // learned gamma
  average,        // gamma fixed at 0.5
  posts_only,     // z = v_u
  evidence_only,  // z = P s^(m)
};

struct DetectConfig {
  std::size_t embed_dim = 256;
  std::vector<Dimension> item_constructs;  // one per questionnaire item

  std::size_t n_items() const noexcept { return item_constructs.size(); }
  std::size_t gate_hidden() const noexcept { return embed_dim; }
  std::size_t cls_hidden() const noexcept { return std::max<std::size_t>(16, embed_dim / 2); }
};

struct FusionOutput {
  Eigen::VectorXd gamma;
  Eigen::VectorXd projected;  // P^(m) s^(m)
  Eigen::VectorXd z;
  double probability = 0.5;
};

/// Mean binary cross-entropy with log arguments clamped at 1e-12.
double binary_cross_entropy(const Eigen::MatrixXd& probabilities, const Eigen::MatrixXd& labels);

inline double joint_loss(double lambda_q, double lambda_cls, double answer_loss, double classification_loss) {
  return lambda_q * answer_loss + lambda_cls * classification_loss;
}

class DetectHead {
 public:
  DetectHead() = default;
  DetectHead(DetectConfig config, ParamLayout& layout);

  const DetectConfig& config() const noexcept { return config_; }
  const ConstructMask& mask() const noexcept { return mask_; }
  ParamRange range() const noexcept { return range_; }

  void initialize(std::span<double> params, InitMode mode, std::mt19937_64& rng) const;

  /// One user, one dimension. `masked_evidence` is s^(m), length |Q|.
  FusionOutput fuse_and_classify(std::span<const double> params, const Eigen::VectorXd& user,
                                 const Eigen::VectorXd& masked_evidence, Dimension m,
                                 FusionMode mode = FusionMode::gated) const;

  /// users: B x d; evidence: B x |Q| weighted evidence s_u (masking is applied
  /// internally per dimension). Returns B x 4 probabilities.
  Eigen::MatrixXd predict(std::span<const double> params, const Eigen::MatrixXd& users,
                          const Eigen::MatrixXd& evidence, FusionMode mode) const;

  /// Mean BCE over B x 4 terms. Adds `scale` times the parameter gradient into
  /// `grad` and writes d(scale * loss)/d(evidence) into `d_evidence` (B x |Q|).
  double loss_and_gradient(std::span<const double> params, const Eigen::MatrixXd& users,
                           const Eigen::MatrixXd& evidence, const Eigen::MatrixXd& labels, FusionMode mode,
                           double scale, std::span<double> grad, Eigen::MatrixXd* d_evidence,
                           Eigen::MatrixXd* probabilities = nullptr) const;

  /// Block names of one dimension's parameters, for inspection.
  std::vector<const BlockSpec*> blocks_of(Dimension m) const;

 private:
  struct Blocks {
    BlockSpec proj, gate_w1, gate_b1, gate_w2, gate_b2, cls_w1, cls_b1, cls_w2, cls_b2;
  };
  struct Cache;
  void forward_dim(std::span<const double> params, const Eigen::MatrixXd& users, const Eigen::MatrixXd& evidence,
                   Dimension m, FusionMode mode, Cache& c) const;

  DetectConfig config_;
  ConstructMask mask_;
  ParamRange range_;
  std::array<Blocks, kNumDimensions> blocks_;
};

}  // namespace aad
