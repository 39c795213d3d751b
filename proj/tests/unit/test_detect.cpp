#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "aad/detect.hpp"
#include "fixtures.hpp"

using namespace aad;
using aad::testing::small_questionnaire;

namespace {

UserRecord labeled(const std::string& id, Labels l) {
  UserRecord u;
  u.user_id = id;
  u.labels = l;
  return u;
}

struct Head {
  ParamLayout layout;
  DetectHead head;
  std::vector<double> params;
};

Head make_head(std::size_t d, const Questionnaire& q, std::uint64_t seed, double perturb) {
  Head h;
  DetectConfig c;
  c.embed_dim = d;
  for (const Item& it : q.items()) c.item_constructs.push_back(it.construct);
  h.head = DetectHead(c, h.layout);
  h.params.assign(h.layout.total(), 0.0);
  std::mt19937_64 rng(seed);
  h.head.initialize(h.params, InitMode::standard, rng);
  std::normal_distribution<double> n(0.0, perturb);
  for (double& x : h.params) x += n(rng);
  return h;
}

double at(const Head& h, const std::string& name, std::size_t r, std::size_t c) {
  const BlockSpec& b = h.layout.blocks()[*h.layout.find(name)];
  return h.params[b.offset + r + c * static_cast<std::size_t>(b.rows)];
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Loop-only gated fusion and classifier for one user and one dimension.
double scalar_probability(const Head& h, const std::vector<double>& v, const std::vector<double>& s,
                          Dimension m, std::vector<double>* gamma_out) {
  const std::string p = "detect." + std::string(to_string(m)) + ".";
  const std::size_t d = v.size(), q = s.size(), gh = d, ch = std::max<std::size_t>(16, d / 2);
  std::vector<double> proj(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < q; ++i) proj[j] += s[i] * at(h, p + "proj", i, j);
  }
  std::vector<double> hidden(gh);
  for (std::size_t k = 0; k < gh; ++k) {
    double a = at(h, p + "gate.b1", 0, k);
    for (std::size_t j = 0; j < d; ++j) a += v[j] * at(h, p + "gate.w1", j, k);
    for (std::size_t j = 0; j < d; ++j) a += proj[j] * at(h, p + "gate.w1", d + j, k);
    hidden[k] = std::max(a, 0.0);
  }
  std::vector<double> z(d), gamma(d);
  for (std::size_t j = 0; j < d; ++j) {
    double a = at(h, p + "gate.b2", 0, j);
    for (std::size_t k = 0; k < gh; ++k) a += hidden[k] * at(h, p + "gate.w2", k, j);
    gamma[j] = sig(a);
    z[j] = gamma[j] * v[j] + (1.0 - gamma[j]) * proj[j];
  }
  if (gamma_out) *gamma_out = gamma;
  double logit = at(h, p + "cls.b2", 0, 0);
  for (std::size_t k = 0; k < ch; ++k) {
    double a = at(h, p + "cls.b1", 0, k);
    for (std::size_t j = 0; j < d; ++j) a += z[j] * at(h, p + "cls.w1", j, k);
    logit += std::max(a, 0.0) * at(h, p + "cls.w2", k, 0);
  }
  return sig(logit);
}

}  // namespace

TEST_CASE("reliability: highest-variance item gets 0, lowest gets 1") {
  const Questionnaire q = small_questionnaire(4);
  AnswerStore store;
  std::vector<UserRecord> users = {labeled("a", {1, 0, 0, 0}), labeled("b", {0, 1, 1, 1})};
  // Per-item population variances: Q1 {0,0}, Q2 {1,1}, Q3 {0.25, 0.25}, Q4 {0, 1}.
  for (const auto& u : users) {
    store.insert(AnswerRecord::from_samples(u.user_id, "Q1", {4, 4}));
    store.insert(AnswerRecord::from_samples(u.user_id, "Q2", {3, 5}));
    store.insert(AnswerRecord::from_samples(u.user_id, "Q3", {4, 5}));
  }
  store.insert(AnswerRecord::from_samples("a", "Q4", {2, 2}));
  store.insert(AnswerRecord::from_samples("b", "Q4", {1, 3}));
  std::vector<const UserRecord*> ptrs = {&users[0], &users[1]};
  Eigen::VectorXd unc;
  const Eigen::VectorXd rel = compute_reliability(store, ptrs, q, &unc);
  CHECK(unc[0] == 0.0);
  CHECK(unc[1] == 1.0);
  CHECK(unc[2] == 0.25);
  CHECK(rel[0] == 1.0);
  CHECK(rel[1] == 0.0);
  CHECK(rel[2] == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(unc[3] == 0.5);
  CHECK(rel[3] == doctest::Approx(0.5).epsilon(1e-15));

  AnswerStore flat;
  for (const auto& u : users) {
    for (const char* id : {"Q1", "Q2", "Q3", "Q4"}) flat.insert(AnswerRecord::from_samples(u.user_id, id, {2, 6}));
  }
  CHECK(compute_reliability(flat, ptrs, q) == Eigen::VectorXd::Ones(4));

  CHECK_THROWS_AS(compute_reliability(AnswerStore{}, ptrs, q), ValidationError);
  AnswerStore partial;
  partial.insert(AnswerRecord::from_samples("a", "Q1", {4}));
  CHECK_THROWS_AS(compute_reliability(partial, ptrs, q), ValidationError);
}

TEST_CASE("importance: class-mean gap on the item's own construct") {
  // Q1..Q4 cycle IE SN TF PJ. Users a, b are I; c is E. a, c are S; b is N.
  // a is T, the rest F; c is P, the rest J.
  const Questionnaire q = small_questionnaire(4);
  std::vector<UserRecord> users = {labeled("a", {1, 1, 1, 0}), labeled("b", {1, 0, 0, 0}),
                                   labeled("c", {0, 1, 0, 1})};
  AnswerStore store;
  const double answers[3][4] = {{6, 4, 5, 3}, {5, 3, 5, 3}, {2, 5, 5, 4}};
  // Gaps: Q1 |5.5 - 2| = 3.5, Q2 |4.5 - 3| = 1.5, Q3 |5 - 5| = 0, Q4 |4 - 3| = 1.
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      store.insert(AnswerRecord::from_samples(users[i].user_id, "Q" + std::to_string(k + 1), {answers[i][k]}));
    }
  }
  std::vector<const UserRecord*> ptrs = {&users[0], &users[1], &users[2]};
  Eigen::VectorXd raw;
  const Eigen::VectorXd imp = compute_importance(store, ptrs, q, &raw);
  CHECK(raw[0] == doctest::Approx(3.5).epsilon(1e-15));
  CHECK(raw[1] == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(raw[2] == 0.0);
  CHECK(raw[3] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(imp[0] == 1.0);
  CHECK(imp[1] == doctest::Approx(1.5 / 3.5).epsilon(1e-15));
  CHECK(imp[2] == 0.0);
  CHECK(imp[3] == doctest::Approx(1.0 / 3.5).epsilon(1e-15));

  const EvidenceWeights w = compute_evidence_weights(store, ptrs, q);
  CHECK(w.w == w.q_imp.cwiseProduct(w.q_rel));

  // Equal gaps everywhere (2.0 on each item): uniform importance.
  AnswerStore same;
  const double flat[3][4] = {{6, 5, 6, 4}, {6, 3, 4, 4}, {4, 5, 4, 6}};
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      same.insert(AnswerRecord::from_samples(users[i].user_id, "Q" + std::to_string(k + 1), {flat[i][k]}));
    }
  }
  CHECK(compute_importance(same, ptrs, q) == Eigen::VectorXd::Ones(4));

  // All users I: the E class is empty.
  std::vector<const UserRecord*> only_i = {&users[0], &users[1]};
  CHECK_THROWS_AS(compute_importance(store, only_i, q), ValidationError);
  UserRecord bare;
  bare.user_id = "a";
  std::vector<const UserRecord*> unlabeled = {&bare};
  CHECK_THROWS_AS(compute_importance(store, unlabeled, q), ValidationError);
}

TEST_CASE("minmax_normalize") {
  bool degenerate = true;
  CHECK(minmax_normalize(Eigen::Vector3d(2, 4, 3), &degenerate) == Eigen::Vector3d(0, 1, 0.5));
  CHECK_FALSE(degenerate);
  CHECK(minmax_normalize(Eigen::Vector2d(3, 3), &degenerate) == Eigen::Vector2d(0, 0));
  CHECK(degenerate);
}

TEST_CASE("weight_evidence and construct masks") {
  CHECK(weight_evidence(Eigen::Vector3d(0.5, 1, 0.2), Eigen::Vector3d(2, 0, 1)) == Eigen::Vector3d(1, 0, 0.2));
  CHECK_THROWS_AS(weight_evidence(Eigen::Vector3d(1, 1, 1), Eigen::Vector2d(1, 1)), DimensionMismatch);

  const Questionnaire q = small_questionnaire(10);
  const ConstructMask mask = ConstructMask::from(q);
  Eigen::VectorXd total = Eigen::VectorXd::Zero(10);
  for (Dimension m : kAllDimensions) {
    total += mask[m];
    for (Eigen::Index i = 0; i < 10; ++i) {
      CHECK(mask[m][i] == (q[static_cast<std::size_t>(i)].construct == m ? 1.0 : 0.0));
    }
  }
  CHECK(total == Eigen::VectorXd::Ones(10));
  const Eigen::VectorXd e = Eigen::VectorXd::LinSpaced(10, 1, 10);
  CHECK(mask_evidence(e, mask, Dimension::SN)[1] == 2.0);
  CHECK(mask_evidence(e, mask, Dimension::SN)[0] == 0.0);
  CHECK_THROWS_AS(mask_evidence(Eigen::VectorXd::Ones(3), mask, Dimension::IE), DimensionMismatch);
}

TEST_CASE("fusion modes pin gamma") {
  const Questionnaire q = small_questionnaire(8);
  const Head h = make_head(4, q, 5, 0.3);
  const Eigen::VectorXd v = Eigen::Vector4d(0.5, -0.5, 0.5, 0.5);
  const Eigen::VectorXd s = mask_evidence(Eigen::VectorXd::LinSpaced(8, 0.1, 0.8), h.head.mask(), Dimension::TF);
  const FusionOutput posts = h.head.fuse_and_classify(h.params, v, s, Dimension::TF, FusionMode::posts_only);
  CHECK(posts.z == v);
  CHECK(posts.gamma == Eigen::VectorXd::Ones(4));
  const FusionOutput ev = h.head.fuse_and_classify(h.params, v, s, Dimension::TF, FusionMode::evidence_only);
  CHECK(ev.z == ev.projected);
  const FusionOutput avg = h.head.fuse_and_classify(h.params, v, s, Dimension::TF, FusionMode::average);
  CHECK((avg.z - 0.5 * (v + avg.projected)).norm() < 1e-15);
  CHECK_THROWS_AS(h.head.fuse_and_classify(h.params, v, Eigen::VectorXd::Ones(3), Dimension::TF), DimensionMismatch);
}

TEST_CASE("gate saturation: large positive bias keeps posts, large negative keeps evidence") {
  const Questionnaire q = small_questionnaire(8);
  Head h = make_head(4, q, 6, 0.3);
  const Eigen::VectorXd v = Eigen::Vector4d(0.1, 0.2, -0.3, 0.4);
  const Eigen::VectorXd s = mask_evidence(Eigen::VectorXd::Constant(8, 0.7), h.head.mask(), Dimension::IE);
  const BlockSpec& b2 = h.layout.blocks()[*h.layout.find("detect.IE.gate.b2")];
  for (double bias : {60.0, -60.0}) {
    for (std::size_t j = 0; j < 4; ++j) h.params[b2.offset + j] = bias;
    const FusionOutput out = h.head.fuse_and_classify(h.params, v, s, Dimension::IE);
    const Eigen::VectorXd expected = bias > 0 ? v : out.projected;
    CHECK((out.z - expected).norm() < 1e-12);
  }
}

TEST_CASE("gated fusion agrees with a loop-only oracle at d=8") {
  const Questionnaire q = small_questionnaire(12);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Head h = make_head(8, q, seed, 0.4);
    std::mt19937_64 rng(seed + 50);
    std::normal_distribution<double> n;
    std::vector<double> v(8), a(12);
    for (auto& x : v) x = n(rng);
    for (auto& x : a) x = std::abs(n(rng));
    for (Dimension m : kAllDimensions) {
      const Eigen::VectorXd s = mask_evidence(Eigen::Map<Eigen::VectorXd>(a.data(), 12), h.head.mask(), m);
      std::vector<double> sv(s.data(), s.data() + s.size()), gamma;
      const double p = scalar_probability(h, v, sv, m, &gamma);
      const FusionOutput out = h.head.fuse_and_classify(h.params, Eigen::Map<Eigen::VectorXd>(v.data(), 8), s, m);
      CHECK(std::abs(out.probability - p) < 1e-10);
      for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(out.gamma[static_cast<Eigen::Index>(j)] - gamma[j]) < 1e-10);
    }
  }
}

TEST_CASE("predict masks evidence per dimension") {
  const Questionnaire q = small_questionnaire(8);
  const Head h = make_head(4, q, 8, 0.4);
  Eigen::MatrixXd users(2, 4), ev(2, 8);
  users.setRandom();
  ev.setRandom();
  const Eigen::MatrixXd p = h.head.predict(h.params, users, ev, FusionMode::gated);
  for (Eigen::Index r = 0; r < 2; ++r) {
    for (Dimension m : kAllDimensions) {
      const double one = h.head.fuse_and_classify(h.params, users.row(r).transpose(),
                                                  mask_evidence(ev.row(r).transpose(), h.head.mask(), m), m)
                             .probability;
      CHECK(p(r, static_cast<Eigen::Index>(index_of(m))) == doctest::Approx(one).epsilon(1e-14));
    }
  }
}

TEST_CASE("binary cross-entropy and joint loss arithmetic") {
  CHECK(binary_cross_entropy(Eigen::MatrixXd::Constant(3, 4, 0.5), Eigen::MatrixXd::Ones(3, 4)) ==
        doctest::Approx(0.6931471805599453).epsilon(1e-15));
  Eigen::MatrixXd p(1, 2), y(1, 2);
  p << 0.0, 1.0;
  y << 1.0, 0.0;
  CHECK(std::isfinite(binary_cross_entropy(p, y)));
  CHECK(binary_cross_entropy(p, y) == doctest::Approx(-std::log(1e-12)).epsilon(1e-12));
  CHECK(joint_loss(1.0, 0.05, 0.2, 0.7) == doctest::Approx(0.235).epsilon(1e-15));
  CHECK_THROWS_AS(binary_cross_entropy(Eigen::MatrixXd(0, 4), Eigen::MatrixXd(0, 4)), ValidationError);
}

TEST_CASE("classification gradients match central differences, parameters and evidence") {
  const Questionnaire q = small_questionnaire(6);
  for (std::uint64_t seed : {21u, 22u}) {
    Head h = make_head(6, q, seed, 0.5);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    Eigen::MatrixXd users(3, 6), ev(3, 6), labels(3, 4);
    for (Eigen::Index i = 0; i < users.size(); ++i) users.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < ev.size(); ++i) ev.data()[i] = std::abs(n(rng));
    for (Eigen::Index i = 0; i < labels.size(); ++i) labels.data()[i] = static_cast<double>(i % 3 == 0);
    std::vector<double> grad(h.params.size(), 0.0);
    Eigen::MatrixXd d_ev;
    h.head.loss_and_gradient(h.params, users, ev, labels, FusionMode::gated, 1.0, grad, &d_ev);
    auto loss = [&] {
      return h.head.loss_and_gradient(h.params, users, ev, labels, FusionMode::gated, 1.0, {}, nullptr);
    };
    const auto r = aad::testing::finite_difference_check(h.params, grad, loss);
    CHECK(r.max_rel_error < 1e-4);
    std::vector<double> d_ev_flat(d_ev.data(), d_ev.data() + d_ev.size());
    CHECK(aad::testing::finite_difference_check(std::span<double>(ev.data(), static_cast<std::size_t>(ev.size())),
                                                d_ev_flat, loss)
              .max_rel_error < 1e-4);
  }
}

TEST_CASE("evidence weights JSON round trip") {
  aad::testing::TempDir dir("weights");
  const Questionnaire q = small_questionnaire(4);
  EvidenceWeights w = EvidenceWeights::uniform(q);
  w.q_unc << 0.1, 0.2, 0.3, 0.0;
  w.q_rel << 1.0, 0.5, 0.0, 1.0;
  w.q_imp << 0.25, 1.0, 0.0, 1.0;
  w.w = w.q_imp.cwiseProduct(w.q_rel);
  w.save_json(dir / "w.json");
  std::ifstream in(dir / "w.json");
  const nlohmann::json j = nlohmann::json::parse(in);
  CHECK(j.size() == 4);
  CHECK(j["Q2"]["w"].get<double>() == 0.5);
  for (const char* key : {"q_unc", "q_rel", "q_imp", "w"}) CHECK(j["Q1"].contains(key));
  const EvidenceWeights back = EvidenceWeights::load_json(dir / "w.json", q);
  CHECK(back.w == w.w);
  CHECK(back.q_unc == w.q_unc);
  CHECK_THROWS_AS(EvidenceWeights::load_json(dir / "w.json", small_questionnaire(5)), ValidationError);
}
