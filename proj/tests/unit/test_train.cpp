#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "aad/train.hpp"
#include "fixtures.hpp"

using namespace aad;
using aad::testing::finite_difference_check;
using aad::testing::tiny_problem;

namespace {

TrainConfig quick_config(std::size_t e1, std::size_t e2) {
  TrainConfig c;
  c.seed = 7;
  c.stage1 = {1e-2, 5, e1};
  c.stage2 = {1e-2, 2, e2, 3};
  return c;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

bool range_equal(std::span<const double> a, std::span<const double> b, ParamRange r) {
  return bitwise_equal(a.subspan(r.begin, r.end - r.begin), b.subspan(r.begin, r.end - r.begin));
}

}  // namespace

TEST_CASE("joint batch gradient matches central differences for L_q, L_cls and the joint loss") {
  struct Lambdas {
    double q, cls;
  };
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (Lambdas l : {Lambdas{1.0, 0.0}, Lambdas{0.0, 1.0}, Lambdas{1.0, 0.05}}) {
      auto p = tiny_problem(seed);
      for (FusionMode fusion : {FusionMode::gated, FusionMode::average}) {
        std::vector<double> grad(p.model.size(), 0.0);
        joint_batch_loss(p.model, p.data, p.data.train, p.weights, l.q, l.cls, fusion, grad);
        const auto r = finite_difference_check(p.model.params(), grad, [&] {
          return joint_batch_loss(p.model, p.data, p.data.train, p.weights, l.q, l.cls, fusion, {}).joint;
        });
        INFO("seed " << seed << " lambda " << l.q << "/" << l.cls << " worst " << r.worst_index);
        CHECK(r.max_rel_error < 1e-4);
        CHECK(r.checked == p.model.size());
      }
    }
  }
}

TEST_CASE("joint batch loss parts") {
  auto p = tiny_problem(4);
  const JointBatchLoss l = joint_batch_loss(p.model, p.data, p.data.train, p.weights, 1.0, 0.05, FusionMode::gated, {});
  CHECK(l.answer == doctest::Approx(answer_loss_over(p.model, p.data, p.data.train)).epsilon(1e-12));
  CHECK(l.joint == doctest::Approx(l.answer + 0.05 * l.classification).epsilon(1e-15));
  CHECK_THROWS_AS(joint_batch_loss(p.model, p.data, {}, p.weights, 1, 1, FusionMode::gated, {}), ValidationError);
  CHECK_THROWS_AS(joint_batch_loss(p.model, p.data, p.data.train, Eigen::VectorXd::Ones(2), 1, 1, FusionMode::gated, {}),
                  DimensionMismatch);
}

TEST_CASE("lambda_cls = 0 leaves the classifier without gradient") {
  auto p = tiny_problem(5);
  std::vector<double> grad(p.model.size(), 0.0);
  joint_batch_loss(p.model, p.data, p.data.train, p.weights, 1.0, 0.0, FusionMode::gated, grad);
  const ParamRange d = p.model.detect().range();
  for (std::size_t j = d.begin; j < d.end; ++j) CHECK(grad[j] == 0.0);
  const ParamRange m = p.model.moe().range();
  double norm = 0;
  for (std::size_t j = m.begin; j < m.end; ++j) norm += grad[j] * grad[j];
  CHECK(norm > 0.0);
}

TEST_CASE("stage 1 with zero epochs is a bitwise no-op") {
  auto p = tiny_problem(6);
  const std::vector<double> before(p.model.params().begin(), p.model.params().end());
  const TrainReport r = pretrain_answer_module(p.model, p.data, quick_config(0, 1));
  CHECK(r.epochs.empty());
  CHECK(bitwise_equal(before, p.model.params()));
}

TEST_CASE("stage 1 only moves answer-module parameters and never raises the loss") {
  auto p = tiny_problem(7);
  const std::vector<double> before(p.model.params().begin(), p.model.params().end());
  const double initial = answer_loss_over(p.model, p.data, p.data.train);
  std::vector<EpochRecord> seen;
  const TrainReport r =
      pretrain_answer_module(p.model, p.data, quick_config(12, 1), [&](const EpochRecord& e) { seen.push_back(e); });
  REQUIRE(r.epochs.size() == 12);
  CHECK(seen.size() == 12);
  CHECK(range_equal(before, p.model.params(), p.model.detect().range()));
  CHECK_FALSE(range_equal(before, p.model.params(), p.model.moe().range()));
  double prev = initial;
  for (const EpochRecord& e : r.epochs) {
    CHECK(e.stage == 1);
    CHECK(e.answer_loss <= prev);
    CHECK_FALSE(e.cls_loss.has_value());
    prev = e.answer_loss;
  }
  CHECK(answer_loss_over(p.model, p.data, p.data.train) == prev);
  CHECK(prev < initial);
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto a = tiny_problem(8);
  auto b = tiny_problem(8);
  for (auto* p : {&a, &b}) {
    p->data.validation = {0, 1};
    pretrain_answer_module(p->model, p->data, quick_config(3, 3));
    joint_train(p->model, p->data, p->weights, quick_config(3, 3));
  }
  CHECK(bitwise_equal(a.model.params(), b.model.params()));
}

TEST_CASE("joint training reports stage 2 and keeps the best validation epoch") {
  auto p = tiny_problem(9);
  p.data.validation = {0, 1, 2, 3};
  TrainReport report = pretrain_answer_module(p.model, p.data, quick_config(2, 6));
  const TrainReport stage2 = joint_train(p.model, p.data, p.weights, quick_config(2, 6));
  report.append(stage2);
  REQUIRE(report.epochs.size() >= 3);
  CHECK(report.epochs[0].stage == 1);
  CHECK(report.epochs[1].stage == 1);
  CHECK(report.epochs[2].stage == 2);
  CHECK(report.epochs[2].epoch == 1);
  REQUIRE(stage2.best_epoch.has_value());
  double best = -1;
  for (const auto& e : stage2.epochs) {
    REQUIRE(e.validation.has_value());
    CHECK(e.cls_loss.has_value());
    best = std::max(best, e.validation->average);
  }
  CHECK(*stage2.best_validation == best);
  const InferenceOptions infer{FusionMode::gated, p.weights, {}};
  CHECK(evaluate(p.model, p.data, p.data.validation, infer).average == best);

  auto q = tiny_problem(9);
  CHECK_THROWS_AS(joint_train(q.model, q.data, q.weights, quick_config(1, 1)), ValidationError);
}

TEST_CASE("Adam and gradient clipping") {
  const ParamRange r{1, 3};
  Adam adam({}, r);
  std::vector<double> params = {5.0, 1.0, -1.0, 9.0};
  adam.step(params, std::vector<double>{100.0, 0.5, -2.0, 100.0}, 0.1);
  // First bias-corrected step moves each coordinate by lr * sign(g) (up to epsilon).
  CHECK(params[0] == 5.0);
  CHECK(params[3] == 9.0);
  CHECK(params[1] == doctest::Approx(0.9).epsilon(1e-7));
  CHECK(params[2] == doctest::Approx(-0.9).epsilon(1e-7));
  CHECK(adam.steps() == 1);

  std::vector<double> g = {7.0, 3.0, 4.0, 7.0};
  CHECK(clip_gradient(g, r, 1.0) == 5.0);
  CHECK(g[1] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(g[2] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(g[0] == 7.0);
  std::vector<double> small = {0.0, 0.3, 0.4, 0.0};
  clip_gradient(small, r, 1.0);
  CHECK(small[1] == 0.3);

  TrainConfig bad;
  bad.stage2.patience = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = {};
  bad.grad_clip = -1.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("checkpoint round trip is bitwise and checks compatibility") {
  aad::testing::TempDir dir("ckpt");
  auto p = tiny_problem(10);
  save_checkpoint(p.model, dir / "m.ckpt");
  const Model back = load_checkpoint(dir / "m.ckpt");
  CHECK(bitwise_equal(p.model.params(), back.params()));
  CHECK(back.config().moe == p.model.config().moe);
  CHECK(back.config().item_ids == p.model.config().item_ids);
  const Eigen::MatrixXd a = predict_answer_matrix(p.model, p.data.users, p.data.items);
  const Eigen::MatrixXd b = predict_answer_matrix(back, p.data.users, p.data.items);
  CHECK(a == b);

  CHECK_NOTHROW(back.check_compatible(p.questionnaire, EmbeddingProvider::hashing(8)));
  CHECK_THROWS_AS(back.check_compatible(p.questionnaire, EmbeddingProvider::hashing(16)), DimensionMismatch);
  CHECK_THROWS_AS(back.check_compatible(aad::testing::small_questionnaire(7), EmbeddingProvider::hashing(8)),
                  DimensionMismatch);

  {
    std::ofstream junk(dir / "junk.ckpt", std::ios::binary);
    junk << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), Error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), Error);
}

TEST_CASE("subsample_train and select_items") {
  auto p = tiny_problem(11, 8, 3, 8, 10);
  const TrainingData half = subsample_train(p.data, 0.5, 3);
  CHECK(half.train.size() == 5);
  CHECK(half.users == p.data.users);
  for (Eigen::Index r : half.train) CHECK(std::find(p.data.train.begin(), p.data.train.end(), r) != p.data.train.end());
  CHECK(subsample_train(p.data, 0.5, 3).train == half.train);
  const TrainingData few = select_items(p.data, {0, 5});
  CHECK(few.n_items() == 2);
  CHECK(few.items.row(1) == p.data.items.row(5));
  CHECK(few.targets.col(1).head(3) == p.data.targets.col(5).head(3));
}
