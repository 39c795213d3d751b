#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "aad/core.hpp"
#include "aad/detect.hpp"
#include "aad/metrics.hpp"
#include "aad/model.hpp"
#include "aad/train.hpp"

namespace aad {

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

enum class AblationVariant : std::uint8_t {
  full,
  no_q_weighting,
  no_gated_fusion,
  posts_only,
  evidence_only,
  no_pretrain,
  drop_max_item,
  drop_min_item,
  drop_rand_item,
};

inline constexpr std::array<AblationVariant, 9> kAllVariants = {
    AblationVariant::full,          AblationVariant::no_q_weighting, AblationVariant::no_gated_fusion,
    AblationVariant::posts_only,    AblationVariant::evidence_only,  AblationVariant::no_pretrain,
    AblationVariant::drop_max_item, AblationVariant::drop_min_item,  AblationVariant::drop_rand_item,
};

std::string_view to_string(AblationVariant v) noexcept;
/// Throws ValidationError for an unknown name.
AblationVariant parse_variant(std::string_view name);

/// True for variants that need their own stage-2 training run.
bool retrains(AblationVariant v) noexcept;

struct AblationSpec {
  AblationVariant variant = AblationVariant::full;
  std::uint64_t seed = 0;
};

/// Everything one training run reads. Rows of `data` follow `dataset`.
struct Pipeline {
  const std::vector<UserRecord>& dataset;
  const Questionnaire& questionnaire;
  const AnswerStore& store;
  const TrainingData& data;
  MoeConfig moe;
  TrainConfig train;
  std::string provider_name = "hashing";
};

struct TrainedArtifacts {
  Model pretrained;  // after stage 1
  Model model;       // after stage 2
  EvidenceWeights weights;
  TrainReport report;
};

struct PipelineHooks {
  EpochSink sink;
  std::filesystem::path checkpoint_dir;  // stage1.ckpt / best.ckpt when set
};

/// Evidence weights from the pipeline's training users.
EvidenceWeights pipeline_weights(const Pipeline& p);

/// Stage 1 then stage 2 with the given seed (model init and shuffling).
TrainedArtifacts train_pipeline(const Pipeline& p, std::uint64_t seed, const PipelineHooks& hooks = {});

/// Per-item keep mask with one item per dimension zeroed: the largest weight,
/// the smallest, or a uniformly random one (drawn once from `seed`). Ties go to the
/// earliest item. All ones for non-drop variants.
Eigen::VectorXd drop_item_mask(AblationVariant v, const Eigen::VectorXd& weights,
                               const std::vector<Dimension>& constructs, std::uint64_t seed);

/// Evaluates one variant on `rows` (normally the test split). Retraining variants
/// start stage 2 from `trained.pretrained` (no_pretrain from a fresh model);
/// drop variants alter only the evidence of the frozen full model.
EvalResult run_ablation(const AblationSpec& spec, const Pipeline& p, const TrainedArtifacts& trained,
                        const std::vector<Eigen::Index>& rows, TrainReport* report = nullptr);

/// One-sided exact sign test: P(at least `wins` successes out of wins + losses) under p = 0.5.
/// Ties are discarded.
double sign_test_p(std::size_t wins, std::size_t losses);

// ---------------------------------------------------------------------------
// Expert activation
// ---------------------------------------------------------------------------

struct ActivationMatrix {
  Eigen::MatrixXd matrix;        // K x 4, rows normalized to sum 1
  std::vector<bool> zero_rows;   // experts that received no gate mass
};

/// Gate probabilities summed over every (user, item) pair of `rows`, grouped by the
/// item's construct.
ActivationMatrix expert_activation_matrix(const Model& model, const TrainingData& data,
                                          const std::vector<Eigen::Index>& rows);

/// Mean Shannon entropy (natural log) of the rows; zero rows are skipped.
double mean_row_entropy(const Eigen::MatrixXd& matrix);

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepPoint {
  double x = 0.0;
  EvalResult result;
};

/// Train on a fraction of the training users.
std::vector<SweepPoint> sweep_data_fraction(const Pipeline& p, const std::vector<double>& fractions,
                                            std::uint64_t seed);
/// Questionnaire size: keep `k` items per dimension, chosen at random per dimension.
std::vector<SweepPoint> sweep_questions(const Pipeline& p, const std::vector<std::size_t>& per_dimension,
                                        std::uint64_t seed);
/// Number of experts.
std::vector<SweepPoint> sweep_experts(const Pipeline& p, const std::vector<std::size_t>& experts,
                                      std::uint64_t seed);

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// {"kind":"activation", ...} and {"kind":"sweep", ...} result documents.
nlohmann::json activation_to_json(const ActivationMatrix& a, double entropy);
nlohmann::json sweep_to_json(std::string_view name, std::string_view x_label, const std::vector<SweepPoint>& points);

/// expert,IE,SN,TF,PJ with one row per expert.
void write_activation_csv(const std::filesystem::path& path, const Eigen::MatrixXd& matrix);
/// <x_label>,IE,SN,TF,PJ,avg with one row per point.
void write_sweep_csv(const std::filesystem::path& path, std::string_view x_label, const std::vector<SweepPoint>& points);
void write_activation_svg(const std::filesystem::path& path, const Eigen::MatrixXd& matrix);
void write_sweep_svg(const std::filesystem::path& path, std::string_view x_label, const std::vector<SweepPoint>& points);

/// Reads result documents and writes CSV (and SVG when `svg`) next to `out_dir`.
/// Returns the written paths. Throws on a missing or empty report.
std::vector<std::filesystem::path> emit_plots(const std::vector<std::filesystem::path>& reports,
                                              const std::filesystem::path& out_dir, bool svg = true);

}  // namespace aad
