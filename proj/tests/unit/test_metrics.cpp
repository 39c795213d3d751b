#include <doctest.h>

#include <random>

#include <nlohmann/json.hpp>

#include "aad/metrics.hpp"

using namespace aad;

namespace {

Eigen::MatrixXd column(const std::vector<int>& v) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(v.size()), 4);
  for (std::size_t i = 0; i < v.size(); ++i) m.row(static_cast<Eigen::Index>(i)).setConstant(v[i]);
  return m;
}

// Naive per-class confusion oracle.
double naive_macro(const std::vector<int>& pred, const std::vector<int>& label) {
  double total = 0;
  for (int cls : {0, 1}) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      tp += pred[i] == cls && label[i] == cls;
      fp += pred[i] == cls && label[i] != cls;
      fn += pred[i] != cls && label[i] == cls;
    }
    total += (2 * tp + fp + fn) == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  }
  return total / 2;
}

}  // namespace

TEST_CASE("perfect predictions score 1") {
  const auto m = column({1, 0, 1, 0, 1});
  const EvalResult r = macro_f1(m, m);
  for (Dimension d : kAllDimensions) CHECK(r[d] == 1.0);
  CHECK(r.average == 1.0);
}

TEST_CASE("constant predictor on a balanced dimension scores 1/3") {
  std::vector<int> labels(100);
  for (int i = 0; i < 100; ++i) labels[static_cast<std::size_t>(i)] = i < 50;
  const EvalResult r = macro_f1(column(std::vector<int>(100, 1)), column(labels));
  // Hand confusion table: tp 50, fp 50, fn 0, tn 0.
  CHECK(r.dims[0].counts == ConfusionCounts{50, 50, 0, 0});
  CHECK(r.dims[0].macro_f1 == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("all-class-1 predictor on the Kaggle I/E test counts 1314/421") {
  std::vector<int> labels(1735, 0);
  for (int i = 0; i < 1314; ++i) labels[static_cast<std::size_t>(i)] = 1;
  const EvalResult r = macro_f1(column(std::vector<int>(1735, 1)), column(labels));
  // Frozen from tests/oracles/oracles.py: 0.5 * 2628/3049.
  CHECK(r.dims[0].macro_f1 == doctest::Approx(0.43096097081010165).epsilon(1e-15));
  CHECK(r.dims[0].f1_class0 == 0.0);
}

TEST_CASE("macro_f1 matches the naive oracle on random data, exactly") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 1000;
    std::vector<int> p(n), y(n);
    Eigen::MatrixXd P(static_cast<Eigen::Index>(n), 4), Y(static_cast<Eigen::Index>(n), 4);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<int>(rng() % 2);
      y[i] = static_cast<int>(rng() % 2);
      P.row(static_cast<Eigen::Index>(i)).setConstant(p[i]);
      Y.row(static_cast<Eigen::Index>(i)).setConstant(y[i]);
    }
    CHECK(macro_f1(P, Y).dims[2].macro_f1 == doctest::Approx(naive_macro(p, y)).epsilon(1e-15));
  }
}

TEST_CASE("macro_f1 errors and JSON shape") {
  CHECK_THROWS_AS(macro_f1(Eigen::MatrixXd(0, 4), Eigen::MatrixXd(0, 4)), ValidationError);
  CHECK_THROWS_AS(macro_f1(column({1}), column({1, 0})), DimensionMismatch);
  CHECK_THROWS_AS(macro_f1(column({2}), column({1})), ValidationError);
  const auto j = macro_f1(column({1, 0}), column({1, 1})).to_json();
  for (const char* k : {"IE", "SN", "TF", "PJ", "avg"}) CHECK(j.contains(k));
}

TEST_CASE("threshold at 0.5 is inclusive") {
  Eigen::MatrixXd p(1, 4);
  p << 0.5, 0.49, 0.99, 0.0;
  const Eigen::MatrixXd t = threshold(p);
  CHECK(t(0, 0) == 1);
  CHECK(t(0, 1) == 0);
  CHECK(t(0, 2) == 1);
  CHECK(t(0, 3) == 0);
}
