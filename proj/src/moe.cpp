#include "aad/moe.hpp"

#include <algorithm>
#include <cmath>

namespace aad {

namespace {

using RowMatrix = RowMatrixXd;

constexpr std::size_t kChunkPairs = 512;

inline double sigmoid(double x) noexcept { return 1.0 / (1.0 + std::exp(-x)); }

/// Maps the rows referenced by a batch onto a compact 0..n-1 numbering.
struct RowCompaction {
  std::vector<Eigen::Index> rows;  // compact slot -> source row
  std::vector<Eigen::Index> slot;  // source row -> compact slot, -1 when unused

  RowCompaction(Eigen::Index n_source, std::span<const PairIndex> pairs, bool user_side)
      : slot(static_cast<std::size_t>(n_source), -1) {
    for (const PairIndex& p : pairs) {
      const Eigen::Index r = user_side ? p.user : p.item;
      if (r < 0 || r >= n_source) throw DimensionMismatch("pair index out of range");
      auto& s = slot[static_cast<std::size_t>(r)];
      if (s < 0) {
        s = static_cast<Eigen::Index>(rows.size());
        rows.push_back(r);
      }
    }
  }

  Eigen::MatrixXd gather(const Eigen::MatrixXd& source) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), source.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = source.row(rows[k]);
    return out;
  }
};

void apply_activation(Activation a, const RowMatrix& pre, RowMatrix& out) {
  if (a == Activation::relu) {
    out = pre.cwiseMax(0.0);
  } else {
    out = pre.array().tanh().matrix();
  }
}

/// Multiplies `grad_hidden` in place by the activation derivative.
void activation_backward(Activation a, const RowMatrix& pre, const RowMatrix& hidden, RowMatrix& grad_hidden) {
  if (a == Activation::relu) {
    grad_hidden = (pre.array() > 0.0).select(grad_hidden, 0.0);
  } else {
    grad_hidden.array() *= 1.0 - hidden.array().square();
  }
}

}  // namespace

std::string_view to_string(Activation a) noexcept { return a == Activation::relu ? "relu" : "tanh"; }

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw ValidationError("unknown activation '" + std::string(name) + "'");
}

void MoeConfig::validate() const {
  if (n_experts == 0 || expert_hidden == 0 || router_hidden == 0 || embed_dim == 0) {
    throw ValidationError("MoE sizes must be positive");
  }
  if (huber_delta <= 0.0) throw ValidationError("huber_delta must be positive");
}

Eigen::RowVectorXd construct_one_hot(Dimension construct) {
  Eigen::RowVectorXd e = Eigen::RowVectorXd::Zero(kNumDimensions);
  e[static_cast<Eigen::Index>(index_of(construct))] = 1.0;
  return e;
}

Eigen::VectorXd build_routing_input(const Eigen::VectorXd& user, const Eigen::VectorXd& item,
                                    Dimension construct) {
  if (user.size() != item.size()) {
    throw DimensionMismatch("user embedding has dimension " + std::to_string(user.size()) +
                            " but item embedding has " + std::to_string(item.size()));
  }
  const Eigen::Index d = user.size();
  Eigen::VectorXd x(2 * d + static_cast<Eigen::Index>(kNumDimensions));
  x << user, item, construct_one_hot(construct).transpose();
  return x;
}

Eigen::MatrixXd item_features(const Eigen::MatrixXd& item_embeddings, const Questionnaire& questionnaire) {
  if (item_embeddings.rows() != static_cast<Eigen::Index>(questionnaire.size())) {
    throw DimensionMismatch("item embedding rows do not match questionnaire size");
  }
  const Eigen::Index d = item_embeddings.cols();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(item_embeddings.rows(), d + static_cast<Eigen::Index>(kNumDimensions));
  out.leftCols(d) = item_embeddings;
  for (std::size_t i = 0; i < questionnaire.size(); ++i) {
    out(static_cast<Eigen::Index>(i), d + static_cast<Eigen::Index>(index_of(questionnaire[i].construct))) = 1.0;
  }
  return out;
}

// ---------------------------------------------------------------------------

struct AnswerMoe::Chunk {
  RowMatrix router_pre, router_hidden;
  RowMatrix gate;  // B x K
  RowMatrix expert_pre, expert_hidden;
  RowMatrix squashed;  // B x K
  Eigen::VectorXd prediction;
};

AnswerMoe::AnswerMoe(const MoeConfig& config, ParamLayout& layout) : config_(config) {
  config_.validate();
  const auto in = static_cast<Eigen::Index>(config_.input_dim());
  const auto r = static_cast<Eigen::Index>(config_.router_hidden);
  const auto k = static_cast<Eigen::Index>(config_.n_experts);
  const auto kh = static_cast<Eigen::Index>(config_.n_experts * config_.expert_hidden);
  range_.begin = layout.total();
  router_w1_ = layout.add("moe.router.w1", in, r);
  router_b1_ = layout.add("moe.router.b1", 1, r);
  router_w2_ = layout.add("moe.router.w2", r, k);
  router_b2_ = layout.add("moe.router.b2", 1, k);
  expert_w1_ = layout.add("moe.expert.w1", in, kh);
  expert_b1_ = layout.add("moe.expert.b1", 1, kh);
  expert_w2_ = layout.add("moe.expert.w2", 1, kh);
  expert_b2_ = layout.add("moe.expert.b2", 1, k);
  range_.end = layout.total();
}

void AnswerMoe::initialize(std::span<double> params, InitMode mode, std::mt19937_64& rng) const {
  for (const BlockSpec* b : {&router_w1_, &router_b1_, &router_w2_, &router_b2_, &expert_w1_, &expert_b1_,
                             &expert_w2_, &expert_b2_}) {
    view(params, *b).setZero();
  }
  if (mode == InitMode::zeros) return;
  const double fan_in = static_cast<double>(config_.input_dim());
  const double hidden_bound =
      config_.activation == Activation::relu ? std::sqrt(6.0 / fan_in) : std::sqrt(3.0 / fan_in);
  auto fill = [&rng](MatrixMap m, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = dist(rng);
    }
  };
  fill(view(params, router_w1_), hidden_bound);
  fill(view(params, expert_w1_), hidden_bound);
  fill(view(params, expert_w2_), 1.0 / std::sqrt(static_cast<double>(config_.expert_hidden)));
}

void AnswerMoe::check_finite(std::span<const double> params, const Eigen::Ref<const Eigen::MatrixXd>& values,
                             const char* stage) const {
  if (values.allFinite()) return;
  for (const BlockSpec* b : {&router_w1_, &router_b1_, &router_w2_, &router_b2_, &expert_w1_, &expert_b1_,
                             &expert_w2_, &expert_b2_}) {
    if (!view(params, *b).allFinite()) {
      throw NumericalError(std::string("non-finite values in ") + stage + "; parameter block " + b->name +
                           " contains NaN/Inf");
    }
  }
  throw NumericalError(std::string("non-finite values in ") + stage + " (inputs or overflow)");
}

void AnswerMoe::run_chunk(std::span<const double> params, const PairBatch& batch, std::size_t begin,
                          std::size_t end, const RowMatrix& user_router,
                          const RowMatrix& item_router, const RowMatrix& user_expert,
                          const RowMatrix& item_expert, const std::vector<Eigen::Index>& user_slot,
                          const std::vector<Eigen::Index>& item_slot, Chunk& out) const {
  const auto n = static_cast<Eigen::Index>(end - begin);
  const auto k_experts = static_cast<Eigen::Index>(config_.n_experts);
  const auto h = static_cast<Eigen::Index>(config_.expert_hidden);

  out.router_pre.resize(n, user_router.cols());
  out.expert_pre.resize(n, user_expert.cols());
  for (Eigen::Index b = 0; b < n; ++b) {
    const PairIndex& p = batch.pairs[begin + static_cast<std::size_t>(b)];
    const Eigen::Index us = user_slot[static_cast<std::size_t>(p.user)];
    const Eigen::Index is = item_slot[static_cast<std::size_t>(p.item)];
    out.router_pre.row(b) = user_router.row(us) + item_router.row(is);
    out.expert_pre.row(b) = user_expert.row(us) + item_expert.row(is);
  }

  out.router_hidden = out.router_pre.cwiseMax(0.0);
  const ConstMatrixMap w2 = view(params, router_w2_);
  const ConstMatrixMap b2 = view(params, router_b2_);
  RowMatrix logits = out.router_hidden * w2;
  logits.rowwise() += b2.row(0);
  check_finite(params, logits, "router logits");
  out.gate.resize(n, k_experts);
  for (Eigen::Index b = 0; b < n; ++b) {
    const double mx = logits.row(b).maxCoeff();
    out.gate.row(b) = (logits.row(b).array() - mx).exp().matrix();
    out.gate.row(b) /= out.gate.row(b).sum();
  }

  apply_activation(config_.activation, out.expert_pre, out.expert_hidden);
  const ConstMatrixMap ew2 = view(params, expert_w2_);
  const ConstMatrixMap eb2 = view(params, expert_b2_);
  out.squashed.resize(n, k_experts);
  for (Eigen::Index b = 0; b < n; ++b) {
    for (Eigen::Index k = 0; k < k_experts; ++k) {
      const double o = out.expert_hidden.row(b).segment(k * h, h).dot(ew2.row(0).segment(k * h, h)) + eb2(0, k);
      out.squashed(b, k) = sigmoid(o);
    }
  }
  check_finite(params, out.squashed, "expert outputs");
  out.prediction = (out.gate.array() * out.squashed.array()).rowwise().sum();
}

RoutingOutput AnswerMoe::forward(std::span<const double> params, const Eigen::VectorXd& x) const {
  if (x.size() != static_cast<Eigen::Index>(config_.input_dim())) {
    throw DimensionMismatch("routing input has dimension " + std::to_string(x.size()) + ", expected " +
                            std::to_string(config_.input_dim()));
  }
  if (!x.allFinite()) throw NumericalError("routing input contains NaN/Inf");
  const auto d = static_cast<Eigen::Index>(config_.embed_dim);
  const Eigen::MatrixXd users = x.head(d).transpose();
  const Eigen::MatrixXd items = x.tail(d + static_cast<Eigen::Index>(kNumDimensions)).transpose();
  const PairIndex pair{0, 0};
  Eigen::MatrixXd gates;
  const Eigen::VectorXd pred = predict(params, PairBatch{users, items, std::span(&pair, 1)}, &gates);

  // Recover the squashed expert outputs for inspection.
  RoutingOutput out;
  out.gate = gates.row(0).transpose();
  out.prediction = pred[0];
  const ConstMatrixMap w1 = view(params, expert_w1_);
  const ConstMatrixMap b1 = view(params, expert_b1_);
  const ConstMatrixMap w2 = view(params, expert_w2_);
  const ConstMatrixMap b2 = view(params, expert_b2_);
  const auto h = static_cast<Eigen::Index>(config_.expert_hidden);
  Eigen::RowVectorXd pre = users.row(0) * w1.topRows(d) + items.row(0) * w1.bottomRows(items.cols()) + b1.row(0);
  Eigen::RowVectorXd hidden =
      config_.activation == Activation::relu ? Eigen::RowVectorXd(pre.cwiseMax(0.0)) : Eigen::RowVectorXd(pre.array().tanh());
  out.expert_outputs.resize(static_cast<Eigen::Index>(config_.n_experts));
  for (Eigen::Index k = 0; k < out.expert_outputs.size(); ++k) {
    out.expert_outputs[k] = sigmoid(hidden.segment(k * h, h).dot(w2.row(0).segment(k * h, h)) + b2(0, k));
  }
  return out;
}

Eigen::VectorXd AnswerMoe::predict(std::span<const double> params, const PairBatch& batch,
                                   Eigen::MatrixXd* gates) const {
  const auto d = static_cast<Eigen::Index>(config_.embed_dim);
  if (batch.users.cols() != d || batch.items.cols() != d + static_cast<Eigen::Index>(kNumDimensions)) {
    throw DimensionMismatch("pair batch feature widths do not match the MoE configuration");
  }
  const std::size_t n = batch.pairs.size();
  RowCompaction uc(batch.users.rows(), batch.pairs, true);
  RowCompaction ic(batch.items.rows(), batch.pairs, false);
  const Eigen::MatrixXd users_c = uc.gather(batch.users);
  const Eigen::MatrixXd items_c = ic.gather(batch.items);
  const ConstMatrixMap rw1 = view(params, router_w1_);
  const ConstMatrixMap ew1 = view(params, expert_w1_);
  const RowMatrix user_router = users_c * rw1.topRows(d);
  RowMatrix item_router = items_c * rw1.bottomRows(items_c.cols());
  item_router.rowwise() += view(params, router_b1_).row(0);
  const RowMatrix user_expert = users_c * ew1.topRows(d);
  RowMatrix item_expert = items_c * ew1.bottomRows(items_c.cols());
  item_expert.rowwise() += view(params, expert_b1_).row(0);

  Eigen::VectorXd pred(static_cast<Eigen::Index>(n));
  if (gates) gates->resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(config_.n_experts));
  Chunk chunk;
  for (std::size_t begin = 0; begin < n; begin += kChunkPairs) {
    const std::size_t end = std::min(n, begin + kChunkPairs);
    run_chunk(params, batch, begin, end, user_router, item_router, user_expert, item_expert, uc.slot, ic.slot,
              chunk);
    const auto b0 = static_cast<Eigen::Index>(begin);
    const auto len = static_cast<Eigen::Index>(end - begin);
    pred.segment(b0, len) = chunk.prediction;
    if (gates) gates->middleRows(b0, len) = chunk.gate;
  }
  return pred;
}

void AnswerMoe::backward(std::span<const double> params, const PairBatch& batch, std::span<const double> d_pred,
                         std::span<double> grad) const {
  if (d_pred.size() != batch.pairs.size()) throw DimensionMismatch("d_pred length must equal batch size");
  if (batch.pairs.empty()) return;
  accumulate(params, batch, d_pred, true, 1.0, grad, nullptr);
}

double AnswerMoe::pair_loss(double prediction, double target, double* d_prediction) const {
  const double r = prediction - target;
  if (config_.loss == AnswerLossKind::huber) {
    const double delta = config_.huber_delta;
    if (std::abs(r) <= delta) {
      if (d_prediction) *d_prediction = r;
      return 0.5 * r * r;
    }
    if (d_prediction) *d_prediction = r > 0 ? delta : -delta;
    return delta * (std::abs(r) - 0.5 * delta);
  }
  if (d_prediction) *d_prediction = r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
  return std::abs(r);
}

double AnswerMoe::loss_and_gradient(std::span<const double> params, const PairBatch& batch,
                                    std::span<const double> targets, std::span<double> grad, double scale,
                                    Eigen::VectorXd* predictions) const {
  const std::size_t n = batch.pairs.size();
  if (n == 0) throw ValidationError("answer loss needs a non-empty batch");
  if (targets.size() != n) throw DimensionMismatch("targets length must equal batch size");

  if (grad.empty()) {
    const Eigen::VectorXd pred = predict(params, batch);
    double total = 0.0;
    for (std::size_t b = 0; b < n; ++b) total += pair_loss(pred[static_cast<Eigen::Index>(b)], targets[b], nullptr);
    if (predictions) *predictions = pred;
    return total / static_cast<double>(n);
  }
  return accumulate(params, batch, targets, false, scale, grad, predictions);
}

double AnswerMoe::accumulate(std::span<const double> params, const PairBatch& batch,
                             std::span<const double> values, bool raw_backward, double scale,
                             std::span<double> grad, Eigen::VectorXd* predictions) const {
  // raw_backward: `values` holds d(objective)/d(prediction); otherwise targets.
  const std::size_t n = batch.pairs.size();

  const auto d = static_cast<Eigen::Index>(config_.embed_dim);
  const auto k_experts = static_cast<Eigen::Index>(config_.n_experts);
  const auto h = static_cast<Eigen::Index>(config_.expert_hidden);
  RowCompaction uc(batch.users.rows(), batch.pairs, true);
  RowCompaction ic(batch.items.rows(), batch.pairs, false);
  const Eigen::MatrixXd users_c = uc.gather(batch.users);
  const Eigen::MatrixXd items_c = ic.gather(batch.items);
  const Eigen::Index item_w = items_c.cols();

  const ConstMatrixMap rw1 = view(params, router_w1_);
  const ConstMatrixMap ew1 = view(params, expert_w1_);
  const RowMatrix user_router = users_c * rw1.topRows(d);
  RowMatrix item_router = items_c * rw1.bottomRows(item_w);
  item_router.rowwise() += view(params, router_b1_).row(0);
  const RowMatrix user_expert = users_c * ew1.topRows(d);
  RowMatrix item_expert = items_c * ew1.bottomRows(item_w);
  item_expert.rowwise() += view(params, expert_b1_).row(0);

  RowMatrix d_user_router = RowMatrix::Zero(users_c.rows(), user_router.cols());
  RowMatrix d_item_router = RowMatrix::Zero(items_c.rows(), user_router.cols());
  RowMatrix d_user_expert = RowMatrix::Zero(users_c.rows(), user_expert.cols());
  RowMatrix d_item_expert = RowMatrix::Zero(items_c.rows(), user_expert.cols());

  MatrixMap g_rw2 = view(grad, router_w2_);
  MatrixMap g_rb2 = view(grad, router_b2_);
  MatrixMap g_ew2 = view(grad, expert_w2_);
  MatrixMap g_eb2 = view(grad, expert_b2_);
  const ConstMatrixMap rw2 = view(params, router_w2_);
  const ConstMatrixMap ew2 = view(params, expert_w2_);

  if (predictions) predictions->resize(static_cast<Eigen::Index>(n));
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  Chunk c;
  Eigen::VectorXd d_pred;
  RowMatrix d_gate, d_logits, d_router_hidden, d_expert_hidden;
  for (std::size_t begin = 0; begin < n; begin += kChunkPairs) {
    const std::size_t end = std::min(n, begin + kChunkPairs);
    const auto len = static_cast<Eigen::Index>(end - begin);
    run_chunk(params, batch, begin, end, user_router, item_router, user_expert, item_expert, uc.slot, ic.slot, c);
    if (predictions) predictions->segment(static_cast<Eigen::Index>(begin), len) = c.prediction;

    d_pred.resize(len);
    for (Eigen::Index b = 0; b < len; ++b) {
      const double t = values[begin + static_cast<std::size_t>(b)];
      if (raw_backward) {
        d_pred[b] = t;
      } else {
        double dl = 0.0;
        total += pair_loss(c.prediction[b], t, &dl);
        d_pred[b] = scale * inv_n * dl;
      }
    }

    // prediction = sum_k gate_k * squashed_k
    d_gate = c.squashed.array().colwise() * d_pred.array();
    RowMatrix d_out = (c.gate.array().colwise() * d_pred.array()) * c.squashed.array() * (1.0 - c.squashed.array());

    // Experts, second layer.
    d_expert_hidden.resize(len, k_experts * h);
    for (Eigen::Index b = 0; b < len; ++b) {
      for (Eigen::Index k = 0; k < k_experts; ++k) {
        const double g = d_out(b, k);
        d_expert_hidden.row(b).segment(k * h, h) = g * ew2.row(0).segment(k * h, h);
        g_ew2.row(0).segment(k * h, h) += g * c.expert_hidden.row(b).segment(k * h, h);
      }
    }
    g_eb2.row(0) += d_out.colwise().sum();
    activation_backward(config_.activation, c.expert_pre, c.expert_hidden, d_expert_hidden);

    // Router softmax.
    const Eigen::VectorXd inner = (c.gate.array() * d_gate.array()).rowwise().sum();
    d_logits = c.gate.array() * (d_gate.array().colwise() - inner.array());
    g_rw2.noalias() += c.router_hidden.transpose() * d_logits;
    g_rb2.row(0) += d_logits.colwise().sum();
    d_router_hidden = d_logits * rw2.transpose();
    d_router_hidden = (c.router_pre.array() > 0.0).select(d_router_hidden, 0.0);

    for (Eigen::Index b = 0; b < len; ++b) {
      const PairIndex& p = batch.pairs[begin + static_cast<std::size_t>(b)];
      const Eigen::Index us = uc.slot[static_cast<std::size_t>(p.user)];
      const Eigen::Index is = ic.slot[static_cast<std::size_t>(p.item)];
      d_user_router.row(us) += d_router_hidden.row(b);
      d_item_router.row(is) += d_router_hidden.row(b);
      d_user_expert.row(us) += d_expert_hidden.row(b);
      d_item_expert.row(is) += d_expert_hidden.row(b);
    }
  }

  MatrixMap g_rw1 = view(grad, router_w1_);
  MatrixMap g_ew1 = view(grad, expert_w1_);
  g_rw1.topRows(d).noalias() += users_c.transpose() * d_user_router;
  g_rw1.bottomRows(item_w).noalias() += items_c.transpose() * d_item_router;
  view(grad, router_b1_).row(0) += d_item_router.colwise().sum();
  g_ew1.topRows(d).noalias() += users_c.transpose() * d_user_expert;
  g_ew1.bottomRows(item_w).noalias() += items_c.transpose() * d_item_expert;
  view(grad, expert_b1_).row(0) += d_item_expert.colwise().sum();

  return raw_backward ? 0.0 : total * inv_n;
}

double answer_loss(const AnswerMoe& moe, std::span<const double> params, const Eigen::MatrixXd& inputs,
                   std::span<const double> targets, std::span<double> grad) {
  const auto d = static_cast<Eigen::Index>(moe.config().embed_dim);
  if (inputs.cols() != static_cast<Eigen::Index>(moe.config().input_dim())) {
    throw DimensionMismatch("routing inputs have the wrong width");
  }
  const Eigen::MatrixXd users = inputs.leftCols(d);
  const Eigen::MatrixXd items = inputs.rightCols(inputs.cols() - d);
  std::vector<PairIndex> pairs(static_cast<std::size_t>(inputs.rows()));
  for (std::size_t b = 0; b < pairs.size(); ++b) {
    pairs[b] = {static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(b)};
  }
  if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  return moe.loss_and_gradient(params, PairBatch{users, items, pairs}, targets, grad);
}

}  // namespace aad
