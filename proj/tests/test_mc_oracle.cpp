#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "opcal/oracle.hpp"

using namespace opcal;

namespace {

GaussianParams gaussian1(double m, double var) {
  return GaussianParams(Eigen::VectorXd::Constant(1, m),
                        Eigen::MatrixXd::Constant(1, 1, var));
}

}  // namespace

TEST_CASE("constant integrand has zero standard error") {
  const auto est = mc_expectation([](const Eigen::VectorXd&) { return 1.0; },
                                  gaussian1(0.0, 1.0), 1000, 3);
  CHECK(est.value == doctest::Approx(1.0));
  CHECK(est.stderr_ == 0.0);
  CHECK(est.n_samples == 1000);
}

TEST_CASE("log-normal mean within four standard errors") {
  const auto est = mc_expectation([](const Eigen::VectorXd& s) { return std::exp(s[0]); },
                                  gaussian1(0.5, 0.25), 200000, 7);
  CHECK(std::abs(est.value - std::exp(0.625)) < 4.0 * est.stderr_);
}

TEST_CASE("second mixed moment within four standard errors") {
  Eigen::VectorXd m(2);
  m << 0.3, -0.7;
  Eigen::MatrixXd d(2, 2);
  d << 0.5, 0.2, 0.2, 0.8;
  const GaussianParams g(m, d);
  const auto est = mc_expectation([](const Eigen::VectorXd& s) { return s[0] * s[1]; },
                                  g, 200000, 11);
  CHECK(std::abs(est.value - (m[0] * m[1] + d(0, 1))) < 4.0 * est.stderr_);
}

TEST_CASE("deterministic per seed, sample floor enforced") {
  const auto f = [](const Eigen::VectorXd& s) { return s[0] * s[0]; };
  const auto a = mc_expectation(f, gaussian1(0, 1), 5000, 21);
  const auto b = mc_expectation(f, gaussian1(0, 1), 5000, 21);
  CHECK(a.value == b.value);
  CHECK(a.stderr_ == b.stderr_);
  CHECK_THROWS_AS(mc_expectation(f, gaussian1(0, 1), 50, 21), std::invalid_argument);
}

TEST_CASE("standard error scales like the inverse square root of n") {
  const auto f = [](const Eigen::VectorXd& s) { return std::exp(0.5 * s[0]); };
  const auto small = mc_expectation(f, gaussian1(0, 1), 1000, 5);
  const auto mid = mc_expectation(f, gaussian1(0, 1), 10000, 5);
  const auto large = mc_expectation(f, gaussian1(0, 1), 100000, 5);
  CHECK(small.stderr_ / mid.stderr_ == doctest::Approx(std::sqrt(10.0)).epsilon(0.2));
  CHECK(mid.stderr_ / large.stderr_ == doctest::Approx(std::sqrt(10.0)).epsilon(0.2));
}

TEST_CASE("semidefinite covariance is handled with jitter") {
  Eigen::MatrixXd d = Eigen::MatrixXd::Ones(2, 2);  // rank one
  const GaussianParams g(Eigen::VectorXd::Zero(2), d);
  const auto est = mc_expectation([](const Eigen::VectorXd& s) { return s[0] + s[1]; },
                                  g, 10000, 9);
  CHECK(std::abs(est.value) < 5.0 * est.stderr_ + 1e-12);
}

TEST_CASE("quadrature on polynomial and exponential integrands") {
  CHECK(quadrature_expectation([](const Eigen::VectorXd& s) { return s[0] * s[0]; },
                               gaussian1(0, 1)) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(quadrature_expectation([](const Eigen::VectorXd& s) { return std::exp(2.0 * s[0]); },
                               gaussian1(0, 1)) ==
        doctest::Approx(std::exp(2.0)).epsilon(1e-10));
  // s e^s with m = 1, D = 0.5 -> (1 + 0.5) e^{1.25}
  CHECK(quadrature_expectation([](const Eigen::VectorXd& s) { return s[0] * std::exp(s[0]); },
                               gaussian1(1.0, 0.5)) ==
        doctest::Approx(1.5 * std::exp(1.25)).epsilon(1e-10));
}

TEST_CASE("quadrature dimension cap") {
  const GaussianParams g(Eigen::VectorXd::Zero(4), Eigen::MatrixXd::Identity(4, 4));
  CHECK_THROWS_AS(quadrature_expectation([](const Eigen::VectorXd&) { return 1.0; }, g),
                  std::invalid_argument);
}

TEST_CASE("quadrature and Monte Carlo agree on a shared integrand") {
  Eigen::VectorXd m(2);
  m << 0.2, -0.4;
  Eigen::MatrixXd d(2, 2);
  d << 0.3, -0.1, -0.1, 0.6;
  const GaussianParams g(m, d);
  const auto f = [](const Eigen::VectorXd& s) {
    return s[0] * std::exp(0.5 * s[1]) + s[1] * s[1];
  };
  const double quad = quadrature_expectation(f, g);
  const auto mc = mc_expectation(f, g, 400000, 13);
  CHECK(std::abs(quad - mc.value) < 4.0 * mc.stderr_);
}

TEST_CASE("central differences are exact on quadratics") {
  const auto f = [](const Eigen::VectorXd& x) {
    return 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1] * x[1] + 5.0 * x[0];
  };
  Eigen::VectorXd x(2);
  x << 1.3, -0.4;
  const Eigen::VectorXd grad = finite_diff_gradient(f, x, 1e-4);
  CHECK(grad[0] == doctest::Approx(6.0 * x[0] - 2.0 * x[1] + 5.0).epsilon(1e-9));
  CHECK(grad[1] == doctest::Approx(-2.0 * x[0] + 2.0 * x[1]).epsilon(1e-9));
}

TEST_CASE("central differences on the exponential") {
  const auto f = [](const Eigen::VectorXd& x) { return std::exp(x[0]); };
  const Eigen::VectorXd grad = finite_diff_gradient(f, Eigen::VectorXd::Zero(1));
  CHECK(std::abs(grad[0] - 1.0) < 1e-9);
  CHECK_THROWS_AS(finite_diff_gradient(f, Eigen::VectorXd::Zero(1), 0.0),
                  std::invalid_argument);
}

TEST_CASE("jacobian of a linear map is the matrix itself") {
  Eigen::MatrixXd a(2, 3);
  a << 1, 2, 3, 4, 5, 6;
  const auto f = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return a * x; };
  const Eigen::MatrixXd jac = finite_diff_jacobian(f, Eigen::VectorXd::Ones(3));
  CHECK((jac - a).cwiseAbs().maxCoeff() < 1e-8);
}
