#include "aad/detect.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace aad {

using nlohmann::json;

namespace {

constexpr double kLogClamp = 1e-12;

inline double sigmoid(double x) noexcept { return 1.0 / (1.0 + std::exp(-x)); }

// log(1 + e^x) without overflow.
inline double softplus(double x) noexcept { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// -log(max(p, 1e-12)) with p = sigmoid(x), taken from the logit so that p near 1
// does not lose the 1 - p digits.
inline double clamped_nll(double x) noexcept { return std::min(softplus(-x), -std::log(kLogClamp)); }

const AnswerRecord& require_answer(const AnswerStore& store, const UserRecord& user, const Item& item) {
  const AnswerRecord* r = store.find(user.user_id, item.item_id);
  if (r == nullptr) {
    throw ValidationError("answer store has no record for (" + user.user_id + ", " + item.item_id + ")");
  }
  return *r;
}

}  // namespace

Eigen::VectorXd minmax_normalize(const Eigen::VectorXd& values, bool* degenerate) {
  if (degenerate) *degenerate = false;
  if (values.size() == 0) return values;
  const double lo = values.minCoeff();
  const double hi = values.maxCoeff();
  if (!(hi > lo)) {
    if (degenerate) *degenerate = true;
    return Eigen::VectorXd::Zero(values.size());
  }
  return ((values.array() - lo) / (hi - lo)).matrix();
}

Eigen::VectorXd compute_reliability(const AnswerStore& store, const std::vector<const UserRecord*>& train_users,
                                    const Questionnaire& questionnaire, Eigen::VectorXd* q_unc) {
  if (store.empty()) throw ValidationError("reliability needs a non-empty answer store");
  if (train_users.empty()) throw ValidationError("reliability needs at least one training user");
  const auto n_items = static_cast<Eigen::Index>(questionnaire.size());
  Eigen::VectorXd unc = Eigen::VectorXd::Zero(n_items);
  for (Eigen::Index i = 0; i < n_items; ++i) {
    const Item& item = questionnaire[static_cast<std::size_t>(i)];
    double total = 0.0;
    for (const UserRecord* u : train_users) total += require_answer(store, *u, item).variance;
    unc[i] = total / static_cast<double>(train_users.size());
  }
  if (q_unc) *q_unc = unc;
  // Degenerate min-max gives zeros, so every item is fully trusted.
  return (1.0 - minmax_normalize(unc).array()).matrix();
}

Eigen::VectorXd compute_importance(const AnswerStore& store, const std::vector<const UserRecord*>& train_users,
                                   const Questionnaire& questionnaire, Eigen::VectorXd* raw) {
  if (store.empty()) throw ValidationError("importance needs a non-empty answer store");
  const auto n_items = static_cast<Eigen::Index>(questionnaire.size());
  Eigen::VectorXd gap = Eigen::VectorXd::Zero(n_items);
  for (Eigen::Index i = 0; i < n_items; ++i) {
    const Item& item = questionnaire[static_cast<std::size_t>(i)];
    const std::size_t m = index_of(item.construct);
    double sum_pos = 0.0, sum_neg = 0.0;
    std::size_t n_pos = 0, n_neg = 0;
    for (const UserRecord* u : train_users) {
      if (!u->labels) throw ValidationError("user " + u->user_id + " has no labels; importance needs labels");
      const double mean = require_answer(store, *u, item).mean;
      if ((*u->labels)[m]) {
        sum_pos += mean;
        ++n_pos;
      } else {
        sum_neg += mean;
        ++n_neg;
      }
    }
    if (n_pos == 0 || n_neg == 0) {
      throw ValidationError("dimension " + std::string(to_string(item.construct)) +
                            " has an empty class among training users; importance is undefined");
    }
    gap[i] = std::abs(sum_pos / static_cast<double>(n_pos) - sum_neg / static_cast<double>(n_neg));
  }
  if (raw) *raw = gap;
  bool degenerate = false;
  Eigen::VectorXd imp = minmax_normalize(gap, &degenerate);
  if (degenerate) {
    spdlog::warn("all items have equal class separation; falling back to uniform importance 1");
    imp.setOnes();
  }
  return imp;
}

EvidenceWeights compute_evidence_weights(const AnswerStore& store,
                                         const std::vector<const UserRecord*>& train_users,
                                         const Questionnaire& questionnaire) {
  EvidenceWeights w;
  for (const Item& item : questionnaire.items()) w.item_ids.push_back(item.item_id);
  w.q_rel = compute_reliability(store, train_users, questionnaire, &w.q_unc);
  w.q_imp = compute_importance(store, train_users, questionnaire, &w.imp_raw);
  w.w = w.q_imp.cwiseProduct(w.q_rel);
  return w;
}

EvidenceWeights EvidenceWeights::uniform(const Questionnaire& questionnaire) {
  EvidenceWeights w;
  const auto n = static_cast<Eigen::Index>(questionnaire.size());
  for (const Item& item : questionnaire.items()) w.item_ids.push_back(item.item_id);
  w.q_unc = Eigen::VectorXd::Zero(n);
  w.q_rel = Eigen::VectorXd::Ones(n);
  w.imp_raw = Eigen::VectorXd::Ones(n);
  w.q_imp = Eigen::VectorXd::Ones(n);
  w.w = Eigen::VectorXd::Ones(n);
  return w;
}

void EvidenceWeights::save_json(const std::filesystem::path& path) const {
  json j = json::object();
  for (std::size_t i = 0; i < item_ids.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    j[item_ids[i]] = {{"q_unc", q_unc[k]}, {"q_rel", q_rel[k]}, {"q_imp", q_imp[k]},
                      {"imp_raw", imp_raw[k]}, {"w", w[k]}};
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

EvidenceWeights EvidenceWeights::load_json(const std::filesystem::path& path, const Questionnaire& questionnaire) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  EvidenceWeights w = uniform(questionnaire);
  for (std::size_t i = 0; i < questionnaire.size(); ++i) {
    const std::string& id = questionnaire[i].item_id;
    if (!j.contains(id)) throw ValidationError("weights file has no entry for item " + id);
    const auto k = static_cast<Eigen::Index>(i);
    const json& e = j[id];
    w.q_unc[k] = e.at("q_unc").get<double>();
    w.q_rel[k] = e.at("q_rel").get<double>();
    w.q_imp[k] = e.at("q_imp").get<double>();
    w.imp_raw[k] = e.value("imp_raw", w.q_imp[k]);
    w.w[k] = e.at("w").get<double>();
  }
  return w;
}

Eigen::VectorXd weight_evidence(const Eigen::VectorXd& answers, const Eigen::VectorXd& weights) {
  if (answers.size() != weights.size()) {
    throw DimensionMismatch("answers have length " + std::to_string(answers.size()) + " but weights have " +
                            std::to_string(weights.size()));
  }
  return answers.cwiseProduct(weights);
}

ConstructMask ConstructMask::from(const std::vector<Dimension>& item_constructs) {
  ConstructMask mask;
  const auto n = static_cast<Eigen::Index>(item_constructs.size());
  for (auto& m : mask.masks) m = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) mask.masks[index_of(item_constructs[static_cast<std::size_t>(i)])][i] = 1.0;
  return mask;
}

ConstructMask ConstructMask::from(const Questionnaire& questionnaire) {
  std::vector<Dimension> constructs;
  for (const Item& item : questionnaire.items()) constructs.push_back(item.construct);
  return from(constructs);
}

Eigen::VectorXd mask_evidence(const Eigen::VectorXd& evidence, const ConstructMask& mask, Dimension m) {
  const Eigen::VectorXd& mu = mask[m];
  if (mu.size() != evidence.size()) throw DimensionMismatch("evidence length does not match the mask");
  return evidence.cwiseProduct(mu);
}

double binary_cross_entropy(const Eigen::MatrixXd& probabilities, const Eigen::MatrixXd& labels) {
  if (probabilities.size() == 0) throw ValidationError("classification loss needs a non-empty batch");
  if (probabilities.rows() != labels.rows() || probabilities.cols() != labels.cols()) {
    throw DimensionMismatch("probabilities and labels differ in shape");
  }
  double total = 0.0;
  for (Eigen::Index r = 0; r < probabilities.rows(); ++r) {
    for (Eigen::Index c = 0; c < probabilities.cols(); ++c) {
      const double p = probabilities(r, c);
      const double y = labels(r, c);
      total -= y * std::log(std::max(p, kLogClamp)) + (1.0 - y) * std::log(std::max(1.0 - p, kLogClamp));
    }
  }
  return total / static_cast<double>(probabilities.size());
}

// ---------------------------------------------------------------------------

struct DetectHead::Cache {
  Eigen::MatrixXd masked;  // B x Q
  Eigen::MatrixXd projected;  // B x d
  Eigen::MatrixXd gate_in, gate_pre, gate_hidden, gamma;
  Eigen::MatrixXd z;
  Eigen::MatrixXd cls_pre, cls_hidden;
  Eigen::VectorXd logit, prob;
};

DetectHead::DetectHead(DetectConfig config, ParamLayout& layout) : config_(std::move(config)) {
  if (config_.embed_dim == 0 || config_.n_items() == 0) throw ValidationError("detect head sizes must be positive");
  mask_ = ConstructMask::from(config_.item_constructs);
  const auto q = static_cast<Eigen::Index>(config_.n_items());
  const auto d = static_cast<Eigen::Index>(config_.embed_dim);
  const auto gh = static_cast<Eigen::Index>(config_.gate_hidden());
  const auto ch = static_cast<Eigen::Index>(config_.cls_hidden());
  range_.begin = layout.total();
  for (Dimension m : kAllDimensions) {
    const std::string p = "detect." + std::string(to_string(m)) + ".";
    Blocks& b = blocks_[index_of(m)];
    b.proj = layout.add(p + "proj", q, d);
    b.gate_w1 = layout.add(p + "gate.w1", 2 * d, gh);
    b.gate_b1 = layout.add(p + "gate.b1", 1, gh);
    b.gate_w2 = layout.add(p + "gate.w2", gh, d);
    b.gate_b2 = layout.add(p + "gate.b2", 1, d);
    b.cls_w1 = layout.add(p + "cls.w1", d, ch);
    b.cls_b1 = layout.add(p + "cls.b1", 1, ch);
    b.cls_w2 = layout.add(p + "cls.w2", ch, 1);
    b.cls_b2 = layout.add(p + "cls.b2", 1, 1);
  }
  range_.end = layout.total();
}

std::vector<const BlockSpec*> DetectHead::blocks_of(Dimension m) const {
  const Blocks& b = blocks_[index_of(m)];
  return {&b.proj, &b.gate_w1, &b.gate_b1, &b.gate_w2, &b.gate_b2, &b.cls_w1, &b.cls_b1, &b.cls_w2, &b.cls_b2};
}

void DetectHead::initialize(std::span<double> params, InitMode mode, std::mt19937_64& rng) const {
  for (Dimension m : kAllDimensions) {
    for (const BlockSpec* b : blocks_of(m)) view(params, *b).setZero();
  }
  if (mode == InitMode::zeros) return;
  auto fill = [&rng](MatrixMap mat, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index c = 0; c < mat.cols(); ++c) {
      for (Eigen::Index r = 0; r < mat.rows(); ++r) mat(r, c) = dist(rng);
    }
  };
  for (Dimension m : kAllDimensions) {
    const Blocks& b = blocks_[index_of(m)];
    // The projection only ever sees this construct's items, so fan-in is their count.
    const double proj_fan_in = std::max(1.0, mask_[m].sum());
    fill(view(params, b.proj), std::sqrt(3.0 / proj_fan_in));
    fill(view(params, b.gate_w1), std::sqrt(6.0 / static_cast<double>(b.gate_w1.rows)));
    fill(view(params, b.gate_w2), 1.0 / std::sqrt(static_cast<double>(b.gate_w2.rows)));
    fill(view(params, b.cls_w1), std::sqrt(6.0 / static_cast<double>(b.cls_w1.rows)));
    fill(view(params, b.cls_w2), 1.0 / std::sqrt(static_cast<double>(b.cls_w2.rows)));
  }
}

void DetectHead::forward_dim(std::span<const double> params, const Eigen::MatrixXd& users,
                             const Eigen::MatrixXd& evidence, Dimension m, FusionMode mode, Cache& c) const {
  const Blocks& b = blocks_[index_of(m)];
  const auto d = static_cast<Eigen::Index>(config_.embed_dim);
  const Eigen::Index n = users.rows();

  c.masked = evidence.array().rowwise() * mask_[m].transpose().array();
  c.projected = c.masked * view(params, b.proj);

  switch (mode) {
    case FusionMode::gated: {
      c.gate_in.resize(n, 2 * d);
      c.gate_in << users, c.projected;
      c.gate_pre = c.gate_in * view(params, b.gate_w1);
      c.gate_pre.rowwise() += view(params, b.gate_b1).row(0);
      c.gate_hidden = c.gate_pre.cwiseMax(0.0);
      Eigen::MatrixXd logits = c.gate_hidden * view(params, b.gate_w2);
      logits.rowwise() += view(params, b.gate_b2).row(0);
      c.gamma = logits.unaryExpr([](double x) { return sigmoid(x); });
      break;
    }
    case FusionMode::average:
      c.gamma = Eigen::MatrixXd::Constant(n, d, 0.5);
      break;
    case FusionMode::posts_only:
      c.gamma = Eigen::MatrixXd::Ones(n, d);
      break;
    case FusionMode::evidence_only:
      c.gamma = Eigen::MatrixXd::Zero(n, d);
      break;
  }
  if (mode == FusionMode::posts_only) {
    c.z = users;
  } else if (mode == FusionMode::evidence_only) {
    c.z = c.projected;
  } else {
    c.z = c.gamma.cwiseProduct(users) + (1.0 - c.gamma.array()).matrix().cwiseProduct(c.projected);
  }

  c.cls_pre = c.z * view(params, b.cls_w1);
  c.cls_pre.rowwise() += view(params, b.cls_b1).row(0);
  c.cls_hidden = c.cls_pre.cwiseMax(0.0);
  c.logit = c.cls_hidden * view(params, b.cls_w2);
  c.logit.array() += view(params, b.cls_b2)(0, 0);
  c.prob = c.logit.unaryExpr([](double x) { return sigmoid(x); });
  if (!c.prob.allFinite() || !c.z.allFinite()) {
    throw NumericalError("non-finite output in detect head for dimension " + std::string(to_string(m)));
  }
}

FusionOutput DetectHead::fuse_and_classify(std::span<const double> params, const Eigen::VectorXd& user,
                                           const Eigen::VectorXd& masked_evidence, Dimension m,
                                           FusionMode mode) const {
  if (user.size() != static_cast<Eigen::Index>(config_.embed_dim) ||
      masked_evidence.size() != static_cast<Eigen::Index>(config_.n_items())) {
    throw DimensionMismatch("fuse_and_classify inputs do not match the detect configuration");
  }
  Cache c;
  forward_dim(params, user.transpose(), masked_evidence.transpose(), m, mode, c);
  FusionOutput out;
  out.gamma = c.gamma.row(0).transpose();
  out.projected = c.projected.row(0).transpose();
  out.z = c.z.row(0).transpose();
  out.probability = c.prob[0];
  return out;
}

Eigen::MatrixXd DetectHead::predict(std::span<const double> params, const Eigen::MatrixXd& users,
                                    const Eigen::MatrixXd& evidence, FusionMode mode) const {
  if (users.rows() != evidence.rows()) throw DimensionMismatch("users and evidence differ in row count");
  Eigen::MatrixXd probs(users.rows(), static_cast<Eigen::Index>(kNumDimensions));
  Cache c;
  for (Dimension m : kAllDimensions) {
    forward_dim(params, users, evidence, m, mode, c);
    probs.col(static_cast<Eigen::Index>(index_of(m))) = c.prob;
  }
  return probs;
}

double DetectHead::loss_and_gradient(std::span<const double> params, const Eigen::MatrixXd& users,
                                     const Eigen::MatrixXd& evidence, const Eigen::MatrixXd& labels,
                                     FusionMode mode, double scale, std::span<double> grad,
                                     Eigen::MatrixXd* d_evidence, Eigen::MatrixXd* probabilities) const {
  const Eigen::Index n = users.rows();
  if (n == 0) throw ValidationError("classification loss needs a non-empty batch");
  if (labels.rows() != n || labels.cols() != static_cast<Eigen::Index>(kNumDimensions)) {
    throw DimensionMismatch("labels must be B x 4");
  }
  const auto d = static_cast<Eigen::Index>(config_.embed_dim);
  const double norm = scale / static_cast<double>(n * static_cast<Eigen::Index>(kNumDimensions));
  if (d_evidence) *d_evidence = Eigen::MatrixXd::Zero(n, evidence.cols());
  Eigen::MatrixXd probs(n, static_cast<Eigen::Index>(kNumDimensions));
  double total = 0.0;

  Cache c;
  for (Dimension m : kAllDimensions) {
    const auto col = static_cast<Eigen::Index>(index_of(m));
    forward_dim(params, users, evidence, m, mode, c);
    probs.col(col) = c.prob;
    for (Eigen::Index r = 0; r < n; ++r) {
      const double y = labels(r, col);
      total += y * clamped_nll(c.logit[r]) + (1.0 - y) * clamped_nll(-c.logit[r]);
    }
    if (grad.empty()) continue;
    const Blocks& b = blocks_[index_of(m)];

    // d BCE / d logit = p - y, except where the log clamp is active.
    Eigen::VectorXd d_logit(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      const double x = c.logit[r];
      const double y = labels(r, col);
      double g = 0.0;
      if (y > 0.0 && softplus(-x) < -std::log(kLogClamp)) g -= y * sigmoid(-x);
      if (y < 1.0 && softplus(x) < -std::log(kLogClamp)) g += (1.0 - y) * sigmoid(x);
      d_logit[r] = norm * g;
    }
    view(grad, b.cls_b2)(0, 0) += d_logit.sum();
    view(grad, b.cls_w2).noalias() += c.cls_hidden.transpose() * d_logit;
    Eigen::MatrixXd d_cls = d_logit * view(params, b.cls_w2).transpose();
    d_cls = (c.cls_pre.array() > 0.0).select(d_cls, 0.0);
    view(grad, b.cls_w1).noalias() += c.z.transpose() * d_cls;
    view(grad, b.cls_b1).row(0) += d_cls.colwise().sum();
    const Eigen::MatrixXd d_z = d_cls * view(params, b.cls_w1).transpose();

    Eigen::MatrixXd d_proj;
    switch (mode) {
      case FusionMode::gated: {
        d_proj = d_z.cwiseProduct((1.0 - c.gamma.array()).matrix());
        const Eigen::MatrixXd d_gamma = d_z.cwiseProduct(users - c.projected);
        const Eigen::MatrixXd d_glogit = d_gamma.cwiseProduct(c.gamma.cwiseProduct((1.0 - c.gamma.array()).matrix()));
        view(grad, b.gate_w2).noalias() += c.gate_hidden.transpose() * d_glogit;
        view(grad, b.gate_b2).row(0) += d_glogit.colwise().sum();
        Eigen::MatrixXd d_gh = d_glogit * view(params, b.gate_w2).transpose();
        d_gh = (c.gate_pre.array() > 0.0).select(d_gh, 0.0);
        view(grad, b.gate_w1).noalias() += c.gate_in.transpose() * d_gh;
        view(grad, b.gate_b1).row(0) += d_gh.colwise().sum();
        const Eigen::MatrixXd d_gate_in = d_gh * view(params, b.gate_w1).transpose();
        d_proj += d_gate_in.rightCols(d);
        break;
      }
      case FusionMode::average:
        d_proj = 0.5 * d_z;
        break;
      case FusionMode::evidence_only:
        d_proj = d_z;
        break;
      case FusionMode::posts_only:
        d_proj = Eigen::MatrixXd::Zero(n, d);
        break;
    }
    view(grad, b.proj).noalias() += c.masked.transpose() * d_proj;
    if (d_evidence) {
      const Eigen::MatrixXd d_masked = d_proj * view(params, b.proj).transpose();
      d_evidence->array() += d_masked.array().rowwise() * mask_[m].transpose().array();
    }
  }
  if (probabilities) *probabilities = probs;
  return total / static_cast<double>(probs.size());
}

}  // namespace aad
