#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aad/core.hpp"
#include "aad/detect.hpp"
#include "aad/encode.hpp"
#include "aad/moe.hpp"
#include "aad/params.hpp"

namespace aad {

struct ModelConfig {
  MoeConfig moe;
  std::string provider_name = "hashing";
  std::string questionnaire_version;
  std::vector<std::string> item_ids;
  std::vector<Dimension> item_constructs;

  static ModelConfig for_questionnaire(const MoeConfig& moe, const Questionnaire& questionnaire,
                                       std::string provider_name);
  std::size_t n_items() const noexcept { return item_ids.size(); }
};

/// The complete trainable state: mixture-of-experts answer module plus the
/// per-dimension fusion/classifier heads, in one flat parameter vector.
class Model {
 public:
  static constexpr std::uint32_t kCheckpointVersion = 1;

  Model() = default;
  /// Builds the layout and initializes parameters from config.moe.init_seed.
  explicit Model(ModelConfig config, InitMode init = InitMode::standard);

  const ModelConfig& config() const noexcept { return config_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  const AnswerMoe& moe() const noexcept { return moe_; }
  const DetectHead& detect() const noexcept { return detect_; }

  std::span<double> params() noexcept { return params_; }
  std::span<const double> params() const noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  /// Binary container: magic, version, JSON header (config + layout), raw little-endian doubles.
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

  /// Throws DimensionMismatch / ValidationError when the checkpoint cannot serve
  /// this questionnaire and embedding provider.
  void check_compatible(const Questionnaire& questionnaire, const EmbeddingProvider& provider) const;

 private:
  ModelConfig config_;
  ParamLayout layout_;
  AnswerMoe moe_;
  DetectHead detect_;
  std::vector<double> params_;
};

inline Model load_checkpoint(const std::filesystem::path& path) { return Model::load(path); }
inline void save_checkpoint(const Model& model, const std::filesystem::path& path) { model.save(path); }

/// How evidence is formed and fused at inference.
struct InferenceOptions {
  FusionMode fusion = FusionMode::gated;
  Eigen::VectorXd weights;    // per-item w; empty means all ones
  Eigen::VectorXd item_keep;  // per-item 0/1 multiplier for removal studies; empty means keep all
};

/// a_hat for every (user row, item): returns n_users x |Q|.
Eigen::MatrixXd predict_answer_matrix(const Model& model, const Eigen::MatrixXd& user_embeddings,
                                      const Eigen::MatrixXd& item_features, Eigen::MatrixXd* gates = nullptr);

/// a_hat for one user over the questionnaire, in questionnaire order.
Eigen::VectorXd predict_answers(const Model& model, const Eigen::VectorXd& user_embedding,
                                const Questionnaire& questionnaire, const Eigen::MatrixXd& item_embeddings);

/// Evidence s = w (*) keep (*) a_hat, row-wise.
Eigen::MatrixXd form_evidence(const Eigen::MatrixXd& answers, const InferenceOptions& options);

/// Per-dimension probabilities, n_users x 4.
Eigen::MatrixXd predict_probabilities(const Model& model, const Eigen::MatrixXd& user_embeddings,
                                      const Eigen::MatrixXd& item_features, const InferenceOptions& options);

}  // namespace aad
