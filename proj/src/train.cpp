#include "aad/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace aad {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::uint64_t kStage1Stream = 0x51a9e1ULL;
constexpr std::uint64_t kStage2Stream = 0x51a9e2ULL;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct PairSet {
  std::vector<PairIndex> pairs;
  std::vector<double> targets;
};

PairSet answer_pairs(const TrainingData& data, const std::vector<Eigen::Index>& rows) {
  PairSet s;
  for (Eigen::Index u : rows) {
    for (Eigen::Index i = 0; i < data.n_items(); ++i) {
      const double t = data.targets(u, i);
      if (std::isnan(t)) continue;
      s.pairs.push_back({u, i});
      s.targets.push_back(t);
    }
  }
  return s;
}

void zero_range(std::span<double> v, ParamRange r) {
  std::fill(v.begin() + static_cast<std::ptrdiff_t>(r.begin), v.begin() + static_cast<std::ptrdiff_t>(r.end), 0.0);
}

std::vector<double> copy_range(std::span<const double> v, ParamRange r) {
  return {v.begin() + static_cast<std::ptrdiff_t>(r.begin), v.begin() + static_cast<std::ptrdiff_t>(r.end)};
}

void restore_range(std::span<double> v, ParamRange r, const std::vector<double>& saved) {
  std::copy(saved.begin(), saved.end(), v.begin() + static_cast<std::ptrdiff_t>(r.begin));
}

Eigen::MatrixXd labels_of(const TrainingData& data, const std::vector<Eigen::Index>& rows) {
  Eigen::MatrixXd y = TrainingData::gather(data.labels, rows);
  if (y.hasNaN()) throw ValidationError("evaluation rows include unlabeled users");
  return y;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(stage1.lr > 0) || !(stage2.lr > 0)) throw ValidationError("learning rates must be positive");
  if (stage1.batch == 0 || stage2.batch == 0) throw ValidationError("batch sizes must be positive");
  if (stage2.patience == 0) throw ValidationError("patience must be positive");
  if (lambda_q < 0 || lambda_cls < 0) throw ValidationError("loss weights must be non-negative");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1) || !(adam.epsilon > 0)) {
    throw ValidationError("invalid Adam hyper-parameters");
  }
  if (grad_clip && !(*grad_clip > 0)) throw ValidationError("grad_clip must be positive");
}

// ---------------------------------------------------------------------------
// Data

Eigen::MatrixXd TrainingData::gather(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(rows[k]);
  return out;
}

TrainingData prepare_training_data(const std::vector<UserRecord>& dataset, const Questionnaire& questionnaire,
                                   const EmbeddingProvider& provider, const AnswerStore& store) {
  TrainingData d;
  const auto n = static_cast<Eigen::Index>(dataset.size());
  const auto q = static_cast<Eigen::Index>(questionnaire.size());
  std::vector<const UserRecord*> ptrs;
  for (const UserRecord& u : dataset) ptrs.push_back(&u);
  d.users = provider.embed_users(ptrs);
  d.items = item_features(provider.embed_items(questionnaire), questionnaire);
  d.targets = Eigen::MatrixXd::Constant(n, q, kNaN);
  d.labels = Eigen::MatrixXd::Constant(n, static_cast<Eigen::Index>(kNumDimensions), kNaN);
  for (Eigen::Index u = 0; u < n; ++u) {
    const UserRecord& rec = dataset[static_cast<std::size_t>(u)];
    d.user_ids.push_back(rec.user_id);
    if (!rec.split) throw ValidationError("user " + rec.user_id + " has no split assignment");
    switch (*rec.split) {
      case Split::train: d.train.push_back(u); break;
      case Split::validation: d.validation.push_back(u); break;
      case Split::test: d.test.push_back(u); break;
    }
    if (rec.labels) {
      for (std::size_t m = 0; m < kNumDimensions; ++m) d.labels(u, static_cast<Eigen::Index>(m)) = (*rec.labels)[m];
    } else if (*rec.split != Split::test) {
      throw ValidationError("user " + rec.user_id + " in the " + std::string(to_string(*rec.split)) +
                            " split has no labels");
    }
    for (Eigen::Index i = 0; i < q; ++i) {
      const Item& item = questionnaire[static_cast<std::size_t>(i)];
      if (const AnswerRecord* a = store.find(rec.user_id, item.item_id)) d.targets(u, i) = item.normalize(a->mean);
    }
  }
  if (d.train.empty()) throw ValidationError("training split is empty");
  std::vector<const UserRecord*> train_users;
  for (Eigen::Index u : d.train) train_users.push_back(&dataset[static_cast<std::size_t>(u)]);
  const auto gaps = coverage_gaps(store, train_users, questionnaire);
  if (!gaps.empty()) {
    std::string msg = std::to_string(gaps.size()) + " training pairs have no answers, e.g.";
    for (std::size_t k = 0; k < std::min<std::size_t>(3, gaps.size()); ++k) {
      msg += " (" + gaps[k].user_id + ", " + gaps[k].item_id + ")";
    }
    throw ValidationError(msg);
  }
  return d;
}

TrainingData subsample_train(const TrainingData& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("fraction must lie in (0, 1]");
  TrainingData out = data;
  std::vector<Eigen::Index> rows = data.train;
  std::mt19937_64 rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fraction * rows.size() + 1e-9)));
  rows.resize(keep);
  std::sort(rows.begin(), rows.end());
  out.train = std::move(rows);
  return out;
}

TrainingData select_items(const TrainingData& data, const std::vector<std::size_t>& items) {
  TrainingData out = data;
  const auto k = static_cast<Eigen::Index>(items.size());
  out.items.resize(k, data.items.cols());
  out.targets.resize(data.targets.rows(), k);
  for (Eigen::Index j = 0; j < k; ++j) {
    const auto src = static_cast<Eigen::Index>(items[static_cast<std::size_t>(j)]);
    if (src >= data.n_items()) throw DimensionMismatch("item index out of range");
    out.items.row(j) = data.items.row(src);
    out.targets.col(j) = data.targets.col(src);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json j;
  j["stage"] = stage;
  j["epoch"] = epoch;
  j["L_q"] = answer_loss;
  j["L_cls"] = cls_loss ? nlohmann::json(*cls_loss) : nlohmann::json(nullptr);
  j["L"] = joint_loss;
  j["val"] = validation ? validation->to_json() : nlohmann::json(nullptr);
  j["lr"] = lr;
  j["seconds"] = seconds;
  j["rolled_back"] = rolled_back;
  return j;
}

void TrainReport::append(const TrainReport& other) {
  epochs.insert(epochs.end(), other.epochs.begin(), other.epochs.end());
  if (other.best_epoch) {
    best_epoch = other.best_epoch;
    best_validation = other.best_validation;
  }
  if (!other.best_checkpoint.empty()) best_checkpoint = other.best_checkpoint;
}

// ---------------------------------------------------------------------------
// Optimizer

Adam::Adam(AdamConfig config, ParamRange range)
    : config_(config), range_(range), m_(range.end - range.begin, 0.0), v_(range.end - range.begin, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grad, double lr) {
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < m_.size(); ++k) {
    const std::size_t p = range_.begin + k;
    const double g = grad[p];
    m_[k] = b1 * m_[k] + (1.0 - b1) * g;
    v_[k] = b2 * v_[k] + (1.0 - b2) * g * g;
    params[p] -= lr * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + config_.epsilon);
  }
}

double clip_gradient(std::span<double> grad, ParamRange range, double max_norm) {
  double sq = 0.0;
  for (std::size_t k = range.begin; k < range.end; ++k) sq += grad[k] * grad[k];
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (std::size_t k = range.begin; k < range.end; ++k) grad[k] *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Losses over row sets

double answer_loss_over(const Model& model, const TrainingData& data, const std::vector<Eigen::Index>& rows) {
  const PairSet s = answer_pairs(data, rows);
  if (s.pairs.empty()) throw ValidationError("no answered pairs among the given users");
  return model.moe().loss_and_gradient(model.params(), PairBatch{data.users, data.items, s.pairs}, s.targets, {});
}

double answer_mae(const Model& model, const TrainingData& data, const std::vector<Eigen::Index>& rows) {
  const PairSet s = answer_pairs(data, rows);
  if (s.pairs.empty()) throw ValidationError("no answered pairs among the given users");
  const Eigen::VectorXd pred = model.moe().predict(model.params(), PairBatch{data.users, data.items, s.pairs});
  double total = 0.0;
  for (std::size_t k = 0; k < s.targets.size(); ++k) total += std::abs(pred[static_cast<Eigen::Index>(k)] - s.targets[k]);
  return total / static_cast<double>(s.targets.size());
}

EvalResult evaluate(const Model& model, const TrainingData& data, const std::vector<Eigen::Index>& rows,
                    const InferenceOptions& options, Eigen::MatrixXd* probabilities) {
  if (rows.empty()) throw ValidationError("cannot evaluate an empty user set");
  const Eigen::MatrixXd users = TrainingData::gather(data.users, rows);
  const Eigen::MatrixXd probs = predict_probabilities(model, users, data.items, options);
  if (probabilities) *probabilities = probs;
  return macro_f1(threshold(probs), labels_of(data, rows));
}

// ---------------------------------------------------------------------------
// Stage 1

TrainReport pretrain_answer_module(Model& model, const TrainingData& data, const TrainConfig& config,
                                   const EpochSink& sink) {
  config.validate();
  TrainReport report;
  if (config.stage1.epochs == 0) return report;

  const AnswerMoe& moe = model.moe();
  const ParamRange range = moe.range();
  PairSet all = answer_pairs(data, data.train);
  if (all.pairs.empty()) throw ValidationError("no training pairs for stage 1");
  std::vector<std::size_t> order(all.pairs.size());
  std::iota(order.begin(), order.end(), 0);

  std::mt19937_64 rng(config.seed ^ kStage1Stream);
  Adam adam(config.adam, range);
  std::vector<double> grad(model.size(), 0.0);
  std::vector<PairIndex> batch_pairs;
  std::vector<double> batch_targets;
  double lr = config.stage1.lr;

  double best_loss = answer_loss_over(model, data, data.train);
  std::vector<double> snapshot = copy_range(model.params(), range);
  Adam adam_snapshot = adam;
  spdlog::info("stage 1: {} pairs, initial L_q {:.6f}", all.pairs.size(), best_loss);

  for (std::size_t epoch = 1; epoch <= config.stage1.epochs; ++epoch) {
    const auto start = Clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += config.stage1.batch) {
      const std::size_t end = std::min(order.size(), begin + config.stage1.batch);
      batch_pairs.clear();
      batch_targets.clear();
      for (std::size_t k = begin; k < end; ++k) {
        batch_pairs.push_back(all.pairs[order[k]]);
        batch_targets.push_back(all.targets[order[k]]);
      }
      zero_range(grad, range);
      const double loss =
          moe.loss_and_gradient(model.params(), PairBatch{data.users, data.items, batch_pairs}, batch_targets, grad);
      if (!std::isfinite(loss)) {
        throw NumericalError("stage 1 epoch " + std::to_string(epoch) + ": non-finite loss in batch starting at " +
                             std::to_string(begin));
      }
      if (config.grad_clip) clip_gradient(grad, range, *config.grad_clip);
      adam.step(model.params(), grad, lr);
    }

    EpochRecord rec;
    rec.stage = 1;
    rec.epoch = epoch;
    rec.lr = lr;
    const double loss = answer_loss_over(model, data, data.train);
    if (!std::isfinite(loss)) throw NumericalError("stage 1 epoch " + std::to_string(epoch) + ": non-finite loss");
    if (loss > best_loss) {
      restore_range(model.params(), range, snapshot);
      adam = adam_snapshot;
      lr *= 0.5;
      rec.rolled_back = true;
      rec.answer_loss = best_loss;
      spdlog::info("stage 1 epoch {}: L_q rose to {:.6f}; undone, lr -> {:.3g}", epoch, loss, lr);
    } else {
      best_loss = loss;
      snapshot = copy_range(model.params(), range);
      adam_snapshot = adam;
      rec.answer_loss = loss;
    }
    rec.joint_loss = config.lambda_q * rec.answer_loss;
    rec.seconds = seconds_since(start);
    spdlog::debug("stage 1 epoch {}: L_q {:.6f} ({:.2f}s)", epoch, rec.answer_loss, rec.seconds);
    report.epochs.push_back(rec);
    if (sink) sink(rec);
  }
  spdlog::info("stage 1 done: L_q {:.6f}", best_loss);
  return report;
}

// ---------------------------------------------------------------------------
// Stage 2

JointBatchLoss joint_batch_loss(const Model& model, const TrainingData& data, const std::vector<Eigen::Index>& rows,
                                const Eigen::VectorXd& weights, double lambda_q, double lambda_cls, FusionMode fusion,
                                std::span<double> grad) {
  const AnswerMoe& moe = model.moe();
  const Eigen::Index q = data.n_items();
  const auto b = static_cast<Eigen::Index>(rows.size());
  if (b == 0) throw ValidationError("joint loss needs a non-empty batch");
  if (weights.size() != q) throw DimensionMismatch("weights length must equal |Q|");
  std::vector<PairIndex> pairs;
  pairs.reserve(rows.size() * static_cast<std::size_t>(q));
  for (Eigen::Index u : rows) {
    for (Eigen::Index i = 0; i < q; ++i) pairs.push_back({u, i});
  }
  const PairBatch batch{data.users, data.items, pairs};
  const Eigen::VectorXd pred = moe.predict(model.params(), batch);

  // Answer term over the batch users' answered items.
  std::size_t n_q = 0;
  for (Eigen::Index u : rows) n_q += static_cast<std::size_t>((!data.targets.row(u).array().isNaN()).count());
  std::vector<double> d_pred(pairs.size(), 0.0);
  JointBatchLoss out;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const double t = data.targets(pairs[k].user, pairs[k].item);
    if (std::isnan(t)) continue;
    double dl = 0.0;
    out.answer += moe.pair_loss(pred[static_cast<Eigen::Index>(k)], t, &dl);
    d_pred[k] = lambda_q * dl / static_cast<double>(n_q);
  }
  out.answer /= static_cast<double>(std::max<std::size_t>(n_q, 1));

  // Classification term on the weighted evidence; its evidence gradient flows back into the MoE.
  Eigen::MatrixXd answers(b, q);
  for (Eigen::Index r = 0; r < b; ++r) answers.row(r) = pred.segment(r * q, q).transpose();
  const InferenceOptions infer{fusion, weights, {}};
  const Eigen::MatrixXd evidence = form_evidence(answers, infer);
  const Eigen::MatrixXd users = TrainingData::gather(data.users, rows);
  const Eigen::MatrixXd labels = TrainingData::gather(data.labels, rows);
  Eigen::MatrixXd d_evidence;
  out.classification = model.detect().loss_and_gradient(model.params(), users, evidence, labels, fusion, lambda_cls,
                                                         grad, grad.empty() ? nullptr : &d_evidence);
  out.joint = joint_loss(lambda_q, lambda_cls, out.answer, out.classification);
  if (grad.empty()) return out;
  for (Eigen::Index r = 0; r < b; ++r) {
    for (Eigen::Index i = 0; i < q; ++i) d_pred[static_cast<std::size_t>(r * q + i)] += d_evidence(r, i) * weights[i];
  }
  moe.backward(model.params(), batch, d_pred, grad);
  return out;
}

TrainReport joint_train(Model& model, const TrainingData& data, const Eigen::VectorXd& weights,
                        const TrainConfig& config, const JointOptions& options, const EpochSink& sink) {
  config.validate();
  const Eigen::Index q = data.n_items();
  if (weights.size() != q) throw DimensionMismatch("weights length must equal |Q|");
  if (data.validation.empty()) throw ValidationError("joint training needs a validation split");
  TrainReport report;

  const ParamRange all{0, model.size()};
  Adam adam(config.adam, all);
  std::vector<double> grad(model.size(), 0.0);
  std::mt19937_64 rng(config.seed ^ kStage2Stream);
  std::vector<Eigen::Index> order = data.train;
  const InferenceOptions infer{options.fusion, weights, {}};

  std::vector<double> best_params(model.params().begin(), model.params().end());
  double best_score = -1.0;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= config.stage2.max_epochs; ++epoch) {
    const auto start = Clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double sum_q = 0.0, sum_cls = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.stage2.batch) {
      const std::size_t end = std::min(order.size(), begin + config.stage2.batch);
      const std::vector<Eigen::Index> rows(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
      std::fill(grad.begin(), grad.end(), 0.0);
      const JointBatchLoss l = joint_batch_loss(model, data, rows, weights, config.lambda_q, config.lambda_cls,
                                                options.fusion, grad);
      if (!std::isfinite(l.joint)) {
        throw NumericalError("stage 2 epoch " + std::to_string(epoch) + ": non-finite loss in batch starting at " +
                             std::to_string(begin));
      }
      if (config.grad_clip) clip_gradient(grad, all, *config.grad_clip);
      adam.step(model.params(), grad, config.stage2.lr);
      sum_q += l.answer;
      sum_cls += l.classification;
      ++n_batches;
    }

    EpochRecord rec;
    rec.stage = 2;
    rec.epoch = epoch;
    rec.lr = config.stage2.lr;
    rec.answer_loss = sum_q / static_cast<double>(n_batches);
    rec.cls_loss = sum_cls / static_cast<double>(n_batches);
    rec.joint_loss = joint_loss(config.lambda_q, config.lambda_cls, rec.answer_loss, *rec.cls_loss);
    rec.validation = evaluate(model, data, data.validation, infer);
    rec.seconds = seconds_since(start);
    const double score = rec.validation->average;
    spdlog::debug("stage 2 epoch {}: L {:.6f} (L_q {:.6f}, L_cls {:.6f}), val avg {:.4f}", epoch, rec.joint_loss,
                  rec.answer_loss, *rec.cls_loss, score);
    report.epochs.push_back(rec);
    if (sink) sink(rec);

    if (score > best_score) {
      best_score = score;
      best_params.assign(model.params().begin(), model.params().end());
      report.best_epoch = epoch;
      report.best_validation = score;
      since_best = 0;
      if (!options.checkpoint_path.empty()) {
        model.save(options.checkpoint_path);
        report.best_checkpoint = options.checkpoint_path.string();
      }
    } else if (++since_best >= config.stage2.patience) {
      spdlog::info("stage 2: no validation gain for {} epochs; stopping at epoch {}", since_best, epoch);
      break;
    }
  }
  std::copy(best_params.begin(), best_params.end(), model.params().begin());
  if (report.best_epoch) {
    spdlog::info("stage 2 done: best validation avg macro-F1 {:.4f} at epoch {}", best_score, *report.best_epoch);
  }
  return report;
}

}  // namespace aad
