#include <rigtune/fitting.hpp>

#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"

using namespace rigtune;
using rigtune::testing::close_rel;

namespace {

Mat example_controls() {
  Mat c(3, 4);
  c << 1, 2, 3, 1, 2, -1, 1, 1, 3, -1, -2, 1;
  return c;
}

Mat example_geometry() {
  Mat v(3, 4);
  v << -1, -2, -3, -1, 4, -2, 2, 2, -2, 2.0 / 3.0, 4.0 / 3.0, -2.0 / 3.0;
  return v;
}

Mat example_rig_matrix() {
  Vec d(3);
  d << -1.0, 2.0, -2.0 / 3.0;
  return Mat(d.asDiagonal());
}

std::vector<ExpressionPair> column_pairs(const Mat& c, const Mat& v, int count) {
  std::vector<ExpressionPair> pairs;
  for (int k = 0; k < count; ++k) {
    ExpressionPair p;
    p.name = "pair" + std::to_string(k);
    p.c = c.col(k);
    p.v = v.col(k);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace

TEST_CASE("scalar rig is exactly determined by one pair", "[fitting]") {
  LinearRig rig(1, 1);
  ExpressionPair p;
  p.c = Vec::Ones(1);
  p.v = -Vec::Ones(1);
  Vec theta = fit_rig_params(rig, {p});
  REQUIRE(theta.size() == 1);
  REQUIRE(theta[0] == Catch::Approx(-1.0).margin(1e-14));
}

TEST_CASE("four consistent pairs recover the generating matrix", "[fitting]") {
  LinearRig rig(3, 3);
  Vec theta = fit_rig_params(rig, column_pairs(example_controls(), example_geometry(), 4));
  LinearRig fitted(3, 3);
  fitted.set_theta(theta);
  REQUIRE((fitted.matrix() - example_rig_matrix()).norm() <= 1e-8);
}

TEST_CASE("regularized fit of a rank-deficient system stays near the prior",
          "[fitting]") {
  const Mat a_true = example_rig_matrix();
  LinearRig rig(3, 3);
  CalibrationConfig config;
  config.epsilon_reg = 1e-4;
  config.theta_prior = LinearRig::from_matrix(a_true).theta();
  auto pairs = column_pairs(example_controls(), example_geometry(), 2);
  Vec theta = fit_rig_params(rig, pairs, config);
  LinearRig fitted(3, 3);
  fitted.set_theta(theta);
  REQUIRE((fitted.matrix() - a_true).norm() <= 1e-3);

  // Independent closed-form oracle: each row of A solves the regularized
  // normal equations (B^T B + eps^2 I) x = B^T y + eps^2 a_r with B the
  // stacked control vectors.
  Mat b(2, 3);
  b.row(0) = pairs[0].c.transpose();
  b.row(1) = pairs[1].c.transpose();
  const double e2 = config.epsilon_reg * config.epsilon_reg;
  for (int r = 0; r < 3; ++r) {
    Vec y(2);
    y << pairs[0].v[r], pairs[1].v[r];
    Vec expected = (b.transpose() * b + e2 * Mat::Identity(3, 3))
                       .ldlt()
                       .solve(b.transpose() * y + e2 * a_true.row(r).transpose());
    REQUIRE(close_rel(Vec(fitted.matrix().row(r).transpose()), expected, 1e-10));
  }
}

TEST_CASE("rank-deficient fit without regularization names the free parameters",
          "[fitting]") {
  LinearRig rig(3, 3);
  auto pairs = column_pairs(example_controls(), example_geometry(), 2);
  try {
    fit_rig_params(rig, pairs);
    FAIL("expected UnderdeterminedError");
  } catch (const UnderdeterminedError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("underdetermined") != std::string::npos);
    REQUIRE(msg.find("row 0") != std::string::npos);
    REQUIRE(msg.find("null dimension") != std::string::npos);
    REQUIRE(msg.find("parameter") != std::string::npos);
  }
}

TEST_CASE("inactive parameters stay at the prior", "[fitting]") {
  LinearRig rig(3, 3);
  CalibrationConfig config;
  config.theta_prior = Vec::Constant(9, 7.0);
  config.active_param_set = {0, 1, 2};  // row 0 of the matrix only
  Vec theta =
      fit_rig_params(rig, column_pairs(example_controls(), example_geometry(), 4), config);
  LinearRig fitted(3, 3);
  fitted.set_theta(theta);
  REQUIRE(close_rel(Vec(fitted.matrix().row(0).transpose()),
                    Vec(example_rig_matrix().row(0).transpose()), 1e-8));
  for (int j = 3; j < 9; ++j) REQUIRE(theta[j] == 7.0);
}

TEST_CASE("geometry masks restrict the fit to their rows", "[fitting]") {
  LinearRig rig(3, 3);
  auto pairs = column_pairs(example_controls(), example_geometry(), 4);

  SECTION("full mask equals unmasked") {
    auto masked = pairs;
    for (auto& p : masked) p = mask_geometry(p, {0, 1, 2});
    Vec a = fit_rig_params(rig, pairs);
    Vec b = fit_rig_params(rig, masked);
    REQUIRE(close_rel(a, b, 1e-14));
  }

  SECTION("row-0 mask leaves other rows at the prior") {
    CalibrationConfig config;
    config.theta_prior = Vec::Constant(9, 3.0);
    config.epsilon_reg = 1e-10;
    auto masked = pairs;
    for (auto& p : masked) p = mask_geometry(p, {0});
    Vec theta = fit_rig_params(rig, masked, config);
    LinearRig fitted(3, 3);
    fitted.set_theta(theta);
    REQUIRE(close_rel(Vec(fitted.matrix().row(0).transpose()),
                      Vec(example_rig_matrix().row(0).transpose()), 1e-6));
    for (int j = 3; j < 9; ++j) REQUIRE(theta[j] == Catch::Approx(3.0).margin(1e-12));
  }

  SECTION("empty mask is rejected") {
    REQUIRE_THROWS_AS(mask_geometry(pairs[0], {}), DimensionError);
  }
}

TEST_CASE("augment_controls keeps activated entries", "[fitting]") {
  Vec c(3), t(3);
  c << 1.0, 0.0, 0.0;
  t << 0.9, 0.2, -0.1;
  Vec out = augment_controls(c, t);
  Vec expected(3);
  expected << 1.0, 0.2, -0.1;
  REQUIRE(close_rel(out, expected, 1e-15));

  Vec all(3);
  all << 0.5, -0.5, 2.0;
  REQUIRE(close_rel(augment_controls(all, t), all, 1e-15));
  REQUIRE(close_rel(augment_controls(Vec::Zero(3), t), t, 1e-15));

  // Idempotence.
  REQUIRE(close_rel(augment_controls(out, t), out, 1e-15));
}

TEST_CASE("full-rank noise-free fits reproduce the generating parameters",
          "[fitting][property]") {
  Rng rng(77);
  for (int trial = 0; trial < 25; ++trial) {
    const int n = 2 + rng.uniform_int(4);
    const int m = 2 + rng.uniform_int(4);
    Mat a(m, n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) a(i, j) = rng.normal();
    LinearRig truth = LinearRig::from_matrix(a);
    std::vector<ExpressionPair> pairs;
    for (int k = 0; k < n + 2; ++k) {
      ExpressionPair p;
      p.c = rng.normal_vec(n);
      p.v = truth.eval(p.c);
      pairs.push_back(std::move(p));
    }
    LinearRig rig(n, m);
    Vec theta = fit_rig_params(rig, pairs);
    REQUIRE(close_rel(theta, truth.theta(), 1e-8));
  }
}

TEST_CASE("already-satisfied constraint pairs leave the fit unchanged",
          "[fitting][property]") {
  LinearRig rig(3, 3);
  auto pairs = column_pairs(example_controls(), example_geometry(), 4);
  Vec base = fit_rig_params(rig, pairs);
  LinearRig fitted(3, 3);
  fitted.set_theta(base);

  ExpressionPair extra = constraint_pair_sum("seal", 3, 0, 1, Vec::Zero(3));
  extra.v = fitted.eval(extra.c);  // exactly satisfied by the fit
  auto with_constraint = pairs;
  with_constraint.push_back(extra);
  Vec again = fit_rig_params(rig, with_constraint);
  REQUIRE((again - base).norm() <= 1e-10);
}

TEST_CASE("vanishing-weight surrogate pairs leave the fit unchanged",
          "[fitting][property]") {
  Rng rng(123);
  LinearRig rig(3, 3);
  auto pairs = column_pairs(example_controls(), example_geometry(), 4);
  Vec base = fit_rig_params(rig, pairs);

  ExpressionPair surrogate;
  surrogate.name = "surrogate";
  surrogate.kind = PairKind::surrogate;
  surrogate.c = rng.normal_vec(3);
  surrogate.v = rng.normal_vec(3);  // inconsistent on purpose
  surrogate.weight = 1e-16;
  auto with_surrogate = pairs;
  with_surrogate.push_back(surrogate);
  Vec again = fit_rig_params(rig, with_surrogate);
  REQUIRE((again - base).norm() <= 1e-8);
}

TEST_CASE("joint rigs calibrate through their product columns", "[fitting]") {
  std::vector<std::vector<int>> spec = {{0}, {1}, {2}, {0, 1}, {0, 2}};
  std::vector<int> rows = {0, 1, 1, 2, 3, 0, 3};
  std::vector<int> cols = {0, 0, 1, 2, 3, 4, 4};
  Vec vals(7);
  vals << 1.5, -0.5, 2.0, 0.75, -1.25, 0.6, 1.1;
  JointPsdRig truth(3, 4, spec, rows, cols, vals);

  Rng rng(31);
  std::vector<ExpressionPair> pairs;
  for (int k = 0; k < 9; ++k) {
    ExpressionPair p;
    p.c = rng.normal_vec(3);
    p.v = truth.eval(p.c);
    pairs.push_back(std::move(p));
  }
  JointPsdRig rig(3, 4, spec, rows, cols, Vec::Zero(7));
  Vec theta = fit_rig_params(rig, pairs);
  REQUIRE(close_rel(theta, vals, 1e-8));
}

TEST_CASE("expression template sets match their rosters", "[fitting]") {
  auto person = make_expression_set(ExpressionSetKind::person19);
  REQUIRE(person.size() == 19);
  auto has = [&](const std::vector<ExpressionTemplate>& set, const std::string& name) {
    return std::any_of(set.begin(), set.end(),
                       [&](const ExpressionTemplate& t) { return t.name == name; });
  };
  REQUIRE(has(person, "neutral"));
  REQUIRE(has(person, "jaw open"));
  REQUIRE(has(person, "jaw open extreme"));
  REQUIRE(has(person, "brows down"));
  REQUIRE(has(person, "lip bite"));

  auto puppet = make_expression_set(ExpressionSetKind::puppet15);
  REQUIRE(puppet.size() == 15);
  for (const char* phoneme : {"OO", "CH", "M/B/P", "F/V"}) REQUIRE(has(puppet, phoneme));

  // The only control shared between two expressions is the jaw-open pair.
  for (const auto& set : {person}) {
    for (std::size_t i = 0; i < set.size(); ++i) {
      for (std::size_t j = i + 1; j < set.size(); ++j) {
        for (const auto& [ci, vi] : set[i].controls) {
          for (const auto& [cj, vj] : set[j].controls) {
            if (ci == cj) {
              REQUIRE(set[i].name == "jaw open");
              REQUIRE(set[j].name == "jaw open extreme");
            }
          }
        }
      }
    }
  }
}

TEST_CASE("synthetic expression sets are deterministic", "[fitting]") {
  auto a = make_expression_set(ExpressionSetKind::synthetic, 7);
  auto b = make_expression_set(ExpressionSetKind::synthetic, 7);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].name == b[i].name);
    REQUIRE(a[i].controls == b[i].controls);
  }
  auto c = make_expression_set(ExpressionSetKind::synthetic, 8);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size() && !any_diff; ++i)
    if (a[i].controls != c[i].controls) any_diff = true;
  REQUIRE(any_diff);
}

TEST_CASE("templates resolve against rig control names", "[fitting]") {
  auto set = make_expression_set(ExpressionSetKind::person19);
  auto names = template_control_names(set);
  REQUIRE(names.size() == 17);  // jaw-open pair shares one control
  Vec c = resolve_controls(set[16], names);  // jaw open extreme
  REQUIRE(c.sum() == Catch::Approx(1.4));

  ExpressionTemplate bogus;
  bogus.controls = {{"no such control", 1.0}};
  REQUIRE_THROWS_AS(resolve_controls(bogus, names), ConfigError);
}
