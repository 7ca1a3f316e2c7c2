#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "opcal/field.hpp"
#include "opcal/general_response.hpp"
#include "opcal/selfcal.hpp"
#include "opcal/verify.hpp"

using namespace opcal;

namespace {

GeneralState zero_covariance_state(int n, const Eigen::VectorXd& m_a,
                                   const Eigen::MatrixXd& m_r) {
  return GeneralState(m_a, m_r, Eigen::MatrixXd::Zero(n * n + n, n * n + n));
}

}  // namespace

TEST_CASE("state validation") {
  CHECK_THROWS_AS(GeneralState(Eigen::VectorXd::Zero(9), Eigen::MatrixXd::Zero(9, 9),
                               Eigen::MatrixXd::Zero(90, 90)),
                  std::invalid_argument);  // n > 8
  CHECK_THROWS_AS(GeneralState(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Zero(3, 3),
                               Eigen::MatrixXd::Zero(6, 6)),
                  std::invalid_argument);
  Eigen::MatrixXd lopsided = Eigen::MatrixXd::Zero(6, 6);
  lopsided(0, 1) = 1.0;
  CHECK_THROWS_AS(GeneralState(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Zero(2, 2),
                               lopsided),
                  std::invalid_argument);
}

TEST_CASE("gradient reduces to the prior pull, which vanishes at the origin") {
  const int n = 2;
  const GeneralState state =
      zero_covariance_state(n, Eigen::VectorXd::Zero(n), Eigen::MatrixXd::Zero(n, n));
  const Eigen::MatrixXd a_cov = Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd r_cov = Eigen::MatrixXd::Identity(n * n, n * n);
  const Eigen::MatrixXd n_inv = Eigen::MatrixXd::Identity(n, n);
  const auto [grad_a, grad_r] =
      grad_general(state, Eigen::VectorXd::Zero(n), a_cov, r_cov, n_inv);
  CHECK(grad_a.cwiseAbs().maxCoeff() == 0.0);
  CHECK(grad_r.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("response-response Hessian block at zero mean and covariance") {
  const int n = 2;
  const GeneralState state =
      zero_covariance_state(n, Eigen::VectorXd::Zero(n), Eigen::MatrixXd::Zero(n, n));
  Eigen::MatrixXd r_cov = Eigen::MatrixXd::Identity(n * n, n * n) * 0.5;
  Eigen::MatrixXd n_inv(n, n);
  n_inv << 2.0, 0.3, 0.3, 1.5;
  const Eigen::MatrixXd a_cov = Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd hess =
      hessian_general(state, Eigen::VectorXd::Zero(n), a_cov, r_cov, n_inv);
  // all exponential factors are 1, so the block is R^-1 + Ninv(p',p)
  for (int p = 0; p < n; ++p) {
    for (int q = 0; q < n; ++q) {
      for (int pp = 0; pp < n; ++pp) {
        for (int qq = 0; qq < n; ++qq) {
          const double want = (p == pp && q == qq ? 2.0 : 0.0) + n_inv(pp, p);
          CHECK(hess(state.flat(p, q), state.flat(pp, qq)) ==
                doctest::Approx(want).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("quadratic term is symmetric under swapping the two exponential slots") {
  const int n = 2;
  Eigen::VectorXd m_a(n);
  m_a << 0.2, -0.3;
  Eigen::MatrixXd m_r(n, n);
  m_r << 0.4, -0.2, 0.1, 0.5;
  // simple positive definite joint covariance
  Eigen::MatrixXd joint = 0.05 * Eigen::MatrixXd::Identity(n * n + n, n * n + n);
  joint(4, 5) = joint(5, 4) = 0.01;
  joint(0, 4) = joint(4, 0) = 0.02;
  const GeneralState state(m_a, m_r, joint);
  Eigen::MatrixXd n_inv(n, n);
  n_inv << 1.2, 0.2, 0.2, 0.9;
  const Eigen::VectorXd d = Eigen::VectorXd::Zero(n);

  // evaluate the quartic sum with both loop orders
  Eigen::VectorXd e1(n);
  for (int i = 0; i < n; ++i) e1[i] = std::exp(state.m_a[i] + 0.5 * state.d_aa(i, i));
  const auto b3 = [&](int k, int l, int i) {
    return state.m_r(k, l) + state.d_ra(state.flat(k, l), l) +
           state.d_ra(state.flat(k, l), i);
  };
  double forward = 0.0, swapped = 0.0;
  for (int k = 0; k < n; ++k) {
    for (int l = 0; l < n; ++l) {
      for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) {
          const double coupling_f = e1[l] * e1[i] * std::exp(state.d_aa(l, i));
          forward += 0.5 * n_inv(k, j) * coupling_f *
                     (state.d_rr(state.flat(k, l), state.flat(j, i)) +
                      b3(k, l, i) * b3(j, i, l));
          // dummy swap (k,l) <-> (j,i)
          const double coupling_s = e1[i] * e1[l] * std::exp(state.d_aa(i, l));
          swapped += 0.5 * n_inv(j, k) * coupling_s *
                     (state.d_rr(state.flat(j, i), state.flat(k, l)) +
                      b3(j, i, l) * b3(k, l, i));
        }
      }
    }
  }
  CHECK(forward == doctest::Approx(swapped).epsilon(1e-12));
}

TEST_CASE("energy, gradients and Hessian pass the oracle battery") {
  const CheckResult r = check_general_response_displays(100000);
  INFO(r.detail);
  CHECK(r.pass);
}

TEST_CASE("embedding the scalar response model reproduces its gradients") {
  // scalar model on a 2-pixel grid, mapped into the matrix-response model
  ModelConfig config;
  config.grid = Grid1D(2, 1.0);
  config.sigma_n = 0.5;
  config.r0 = 1.7;
  const int n = 2;
  const MockDataset data = make_mock_data(config, 12);

  GibbsState scalar = GibbsState::prior(config);
  scalar.m_r = 0.3;
  scalar.m_a.values = Eigen::Vector2d(0.2, -0.1);
  scalar.d_ra = Eigen::Vector2d(0.05, -0.02);
  scalar.d_rr = 0.3;
  scalar.refresh_diag();

  // constrained embedding: r = (m_r + r0) * I, fluctuations delta_r * I
  Eigen::VectorXd m_a = scalar.m_a.values;
  const Eigen::MatrixXd m_r =
      (scalar.m_r + config.r0) * Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd joint = Eigen::MatrixXd::Zero(n * n + n, n * n + n);
  for (int k = 0; k < n; ++k) {
    for (int l = 0; l < n; ++l) {
      const int kl = k * n + l;
      for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) {
          const int ji = j * n + i;
          if (k == l && j == i) joint(kl, ji) = scalar.d_rr;
        }
      }
      for (int i = 0; i < n; ++i) {
        if (k == l) {
          joint(kl, n * n + i) = scalar.d_ra[i];
          joint(n * n + i, kl) = scalar.d_ra[i];
        }
      }
    }
  }
  joint.block(n * n, n * n, n, n) = scalar.d_aa;
  const GeneralState general(m_a, m_r, joint);

  const double w = config.grid.pixel_volume() / (config.sigma_n * config.sigma_n);
  const Eigen::MatrixXd n_inv = w * Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd a_cov =
      dense_covariance(FourierCovariance(config.grid, config.spectrum));
  const Eigen::MatrixXd r_cov = Eigen::MatrixXd::Identity(n * n, n * n);

  const auto [gen_grad_a, gen_grad_r] =
      grad_general(general, data.d.values, a_cov, r_cov, n_inv);
  const auto [sc_grad_a, sc_grad_r] = grad_gibbs(scalar, data.d, config);

  // likelihood parts: subtract each model's own prior pull
  const Eigen::VectorXd gen_like_a = gen_grad_a - a_cov.inverse() * m_a;
  const Eigen::VectorXd sc_like_a = sc_grad_a.values - a_cov.inverse() * m_a;
  CHECK((gen_like_a - sc_like_a).cwiseAbs().maxCoeff() < 1e-10);

  Eigen::VectorXd vec_mr(n * n);
  for (int k = 0; k < n; ++k) {
    for (int l = 0; l < n; ++l) vec_mr[k * n + l] = m_r(k, l);
  }
  const Eigen::MatrixXd like_r_matrix = [&] {
    Eigen::MatrixXd out(n, n);
    const Eigen::VectorXd prior = r_cov.inverse() * vec_mr;
    for (int p = 0; p < n; ++p) {
      for (int q = 0; q < n; ++q) out(p, q) = gen_grad_r(p, q) - prior[p * n + q];
    }
    return out;
  }();
  const double sc_like_r = sc_grad_r - scalar.m_r / config.response_var;
  // chain rule over the constrained direction r = rho * I
  CHECK(like_r_matrix.trace() == doctest::Approx(sc_like_r).epsilon(1e-10));
}

TEST_CASE("indefinite joint covariance is rejected by the energy") {
  const int n = 2;
  Eigen::MatrixXd joint = Eigen::MatrixXd::Zero(n * n + n, n * n + n);
  joint(0, 0) = -1.0;
  const GeneralState state(Eigen::VectorXd::Zero(n), Eigen::MatrixXd::Zero(n, n), joint);
  CHECK_THROWS_AS(gibbs_energy_general(state, Eigen::VectorXd::Zero(n),
                                       Eigen::MatrixXd::Identity(n, n),
                                       Eigen::MatrixXd::Identity(n * n, n * n),
                                       Eigen::MatrixXd::Identity(n, n)),
                  std::domain_error);
}
