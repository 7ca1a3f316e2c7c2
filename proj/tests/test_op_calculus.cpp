#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "opcal/expr.hpp"
#include "opcal/oracle.hpp"
#include "opcal/verify.hpp"

using namespace opcal;

namespace {

GaussianParams fixed_gaussian2() {
  Eigen::VectorXd m(2);
  m << 0.5, -0.3;
  Eigen::MatrixXd d(2, 2);
  d << 0.25, 0.1, 0.1, 0.4;
  return GaussianParams(m, d);
}

}  // namespace

TEST_CASE("constructor contracts") {
  const IndexSet is(2);
  CHECK(phi(is, 0).terms().size() == 2);
  CHECK_THROWS_AS(phi(is, 2), std::out_of_range);
  CHECK_THROWS_AS(creator(is, -1), std::out_of_range);
  CHECK_THROWS_AS(exp_phi(is, Eigen::VectorXd::Ones(3)), std::invalid_argument);
  CHECK_THROWS_AS(IndexSet(0), std::invalid_argument);
  CHECK(constant_expr(is, 0.0).terms().empty());

  // exp of a zero exponent is the constant 1
  CHECK(structurally_equal(exp_phi(is, Eigen::VectorXd::Zero(2)), constant_expr(is, 1.0)));
}

TEST_CASE("multiplicative identity and idempotent normal order") {
  const IndexSet is(2);
  const OperatorExpr one = constant_expr(is, 1.0);
  const OperatorExpr e = multiply(phi(is, 0), exp_phi(is, Eigen::Vector2d(0.3, -0.2)));
  CHECK(structurally_equal(multiply(e, one), e));
  CHECK(structurally_equal(multiply(one, e), e));
  CHECK(structurally_equal(normal_order(e), e));
  CHECK(structurally_equal(normal_order(phi(is, 1)), phi(is, 1)));
}

TEST_CASE("first moment is the mean") {
  const IndexSet is(2);
  const GaussianParams g = fixed_gaussian2();
  CHECK(expectation(phi(is, 0), g) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(expectation(moment(is, {1}), g) == doctest::Approx(-0.3).epsilon(1e-14));
}

TEST_CASE("second moment carries the covariance") {
  const IndexSet is(2);
  const GaussianParams g = fixed_gaussian2();
  // phi^2 at m = .5, D = .25 -> .5
  CHECK(expectation(multiply(phi(is, 0), phi(is, 0)), g) ==
        doctest::Approx(0.5).epsilon(1e-14));
  CHECK(expectation(multiply(phi(is, 0), phi(is, 1)), g) ==
        doctest::Approx(0.5 * -0.3 + 0.1).epsilon(1e-14));
}

TEST_CASE("annihilator past creator produces the commutator term") {
  const IndexSet is(2);
  const OperatorExpr lhs = multiply(annihilator(is, 0), creator(is, 1));
  // b_1 c_0 + D_01
  REQUIRE(lhs.terms().size() == 2);
  bool saw_reordered = false;
  bool saw_contraction = false;
  for (const auto& t : lhs.terms()) {
    if (t.b_powers == std::vector<int>{1} && t.c_powers == std::vector<int>{0} &&
        t.scalar_factors.empty()) {
      saw_reordered = true;
    }
    if (t.b_powers.empty() && t.c_powers.empty() && t.scalar_factors.size() == 1) {
      saw_contraction = true;
    }
  }
  CHECK(saw_reordered);
  CHECK(saw_contraction);
}

TEST_CASE("derivation rule: annihilator past a creator exponential") {
  const IndexSet is(2);
  const Eigen::VectorXd e1 = Eigen::VectorXd::Unit(2, 1);
  const OperatorExpr lhs = multiply(annihilator(is, 0), exp_creators(is, e1));
  // exp(b_1) c_0 + D_01 exp(b_1)
  const OperatorExpr d01 = multiply(annihilator(is, 0), creator(is, 1)) +
                           (-1.0 * multiply(creator(is, 1), annihilator(is, 0)));
  const OperatorExpr rhs =
      multiply(exp_creators(is, e1), annihilator(is, 0)) + multiply(d01, exp_creators(is, e1));
  CHECK(structurally_equal(lhs, rhs));

  const GaussianParams g = fixed_gaussian2();
  CHECK(expectation(lhs, g) ==
        doctest::Approx(g.cov(0, 1) * std::exp(g.mean[1])).epsilon(1e-14));
}

TEST_CASE("exponential swap keeps a single term with the deferred factor") {
  const IndexSet is(2);
  const OperatorExpr swapped =
      multiply(exp_annihilators(is, Eigen::VectorXd::Unit(2, 0)),
               exp_creators(is, Eigen::VectorXd::Unit(2, 1)));
  REQUIRE(swapped.terms().size() == 1);
  const NormalTerm& t = swapped.terms().front();
  CHECK(t.exp_quadratic.size() == 1);
  CHECK(t.exp_quadratic[0].weight == 1.0);
  const GaussianParams g = fixed_gaussian2();
  CHECK(expectation(swapped, g) ==
        doctest::Approx(std::exp(g.mean[1] + g.cov(0, 1))).epsilon(1e-14));
}

TEST_CASE("exp_phi evaluates to the log-normal mean") {
  const IndexSet is(2);
  const GaussianParams g = fixed_gaussian2();
  const double got = expectation(exp_phi(is, Eigen::VectorXd::Unit(2, 0)), g);
  CHECK(got == doctest::Approx(std::exp(0.5 + 0.5 * 0.25)).epsilon(1e-14));

  // two-component exponent exercises the cross term of the deferred scalar
  const double got2 = expectation(exp_phi(is, Eigen::VectorXd::Ones(2)), g);
  const double want2 = std::exp(0.5 - 0.3 + 0.5 * (0.25 + 0.4) + 0.1);
  CHECK(got2 == doctest::Approx(want2).epsilon(1e-14));
}

TEST_CASE("polynomial times exponential against the quadrature oracle") {
  const IndexSet is(2);
  const GaussianParams g = fixed_gaussian2();

  // <s_0 e^{s_1}> = (m_0 + D_01) exp(m_1 + D_11/2)
  const OperatorExpr expr = multiply(phi(is, 0), exp_phi(is, Eigen::VectorXd::Unit(2, 1)));
  const double engine = expectation(expr, g);
  CHECK(engine ==
        doctest::Approx((0.5 + 0.1) * std::exp(-0.3 + 0.2)).epsilon(1e-13));
  const double quad = quadrature_expectation(
      [](const Eigen::VectorXd& s) { return s[0] * std::exp(s[1]); }, g);
  CHECK(engine == doctest::Approx(quad).epsilon(1e-10));

  // <s_0^2 s_1> against quadrature
  const double engine2 = expectation(moment(is, {0, 0, 1}), g);
  const double quad2 = quadrature_expectation(
      [](const Eigen::VectorXd& s) { return s[0] * s[0] * s[1]; }, g);
  CHECK(engine2 == doctest::Approx(quad2).epsilon(1e-10));
}

TEST_CASE("gaussian moments via Wick pairings") {
  const IndexSet is(1);
  const GaussianParams g(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1));
  CHECK(expectation(moment(is, {0, 0, 0, 0}), g) == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(expectation(moment(is, {0, 0, 0}), g) == doctest::Approx(0.0));
  CHECK(expectation(moment(is, {0}), g) == 0.0);
}

TEST_CASE("degenerate covariance gives a point evaluation") {
  const IndexSet is(2);
  Eigen::VectorXd m(2);
  m << 0.7, -1.1;
  const GaussianParams g(m, Eigen::MatrixXd::Zero(2, 2));
  const OperatorExpr expr =
      multiply(moment(is, {0, 0, 1}), exp_phi(is, Eigen::Vector2d(0.4, 0.3)));
  const double want = m[0] * m[0] * m[1] * std::exp(0.4 * m[0] + 0.3 * m[1]);
  CHECK(expectation(expr, g) == doctest::Approx(want).epsilon(1e-13));

  // products factorize exactly under a point mass
  const OperatorExpr f = multiply(phi(is, 0), phi(is, 0));
  const OperatorExpr h = exp_phi(is, Eigen::Vector2d(0.2, -0.1));
  CHECK(expectation(multiply(f, h), g) ==
        doctest::Approx(expectation(f, g) * expectation(h, g)).epsilon(1e-13));
}

TEST_CASE("linearity of the expectation") {
  const IndexSet is(2);
  const GaussianParams g = fixed_gaussian2();
  const OperatorExpr e1 = multiply(phi(is, 0), exp_phi(is, Eigen::Vector2d(0.3, 0.1)));
  const OperatorExpr e2 = moment(is, {0, 1, 1});
  const double combined = expectation(2.5 * e1 + (-1.25 * e2), g);
  const double parts = 2.5 * expectation(e1, g) - 1.25 * expectation(e2, g);
  CHECK(combined == doctest::Approx(parts).epsilon(1e-12));
}

TEST_CASE("ordering is an algebraic identity: association order does not matter") {
  const IndexSet is(2);
  const GaussianParams g = fixed_gaussian2();
  const OperatorExpr a = phi(is, 0);
  const OperatorExpr b = exp_phi(is, Eigen::Vector2d(0.5, 0.2));
  const OperatorExpr c = phi(is, 1);
  const double left = expectation(multiply(multiply(a, b), c), g);
  const double right = expectation(multiply(a, multiply(b, c)), g);
  CHECK(left == doctest::Approx(right).epsilon(1e-13));
  // phi operators commute
  CHECK(expectation(multiply(a, c), g) ==
        doctest::Approx(expectation(multiply(c, a), g)).epsilon(1e-14));
}

TEST_CASE("dimension mismatch in expectation") {
  const IndexSet is(2);
  const GaussianParams g(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3));
  CHECK_THROWS_AS(expectation(phi(is, 0), g), std::invalid_argument);
  CHECK_THROWS_AS(multiply(phi(is, 0), phi(IndexSet(3), 0)), std::invalid_argument);
}

TEST_CASE("debug dump lists one term per line") {
  const IndexSet is(2);
  const OperatorExpr e = multiply(phi(is, 0), exp_phi(is, Eigen::Vector2d(1.0, 0.0)));
  const std::string dump = to_string(e);
  CHECK(dump.find("b[0]") != std::string::npos);
  CHECK(dump.find("exp") != std::string::npos);
  CHECK(std::count(dump.begin(), dump.end(), '\n') == static_cast<long>(e.terms().size()));
  CHECK(to_string(OperatorExpr(is)) == "0\n");
}

TEST_CASE("randomized engine vs oracle spot check") {
  // light version of the acceptance sweep
  const CheckResult r = check_engine_oracle_equivalence(45, 100000);
  INFO(r.detail);
  CHECK(r.pass);
}
