#pragma once

#include <Eigen/Dense>
#include <utility>

namespace opcal {

// General matrix-response model at tiny scale: the response is an n x n
// matrix-valued signal, flattened row-major, jointly Gaussian with the
// n-vector signal a. The joint covariance keeps the response block first:
//   [[d_rr (n^2 x n^2), d_ra (n^2 x n)], [d_ra^T, d_aa (n x n)]].
// This module exists to machine-check the closed-form energy and its
// derivatives; dense storage and explicit index loops are deliberate.
struct GeneralState {
  Eigen::VectorXd m_a;
  Eigen::MatrixXd m_r;
  Eigen::MatrixXd d_joint;

  GeneralState(Eigen::VectorXd ma, Eigen::MatrixXd mr, Eigen::MatrixXd d);

  int n() const { return static_cast<int>(m_a.size()); }
  int flat(int k, int l) const { return k * n() + l; }

  double d_rr(int kl, int ji) const { return d_joint(kl, ji); }
  double d_ra(int kl, int i) const { return d_joint(kl, n() * n() + i); }
  double d_aa(int i, int j) const { return d_joint(n() * n() + i, n() * n() + j); }
};

// Gibbs free energy of the model d = r e^a + n with priors a ~ N(0, a_cov),
// vec(r) ~ N(0, r_cov) and noise precision n_inv. Plain sums over indices;
// requires positive-definite d_joint for the entropy term.
double gibbs_energy_general(const GeneralState& state, const Eigen::VectorXd& d,
                            const Eigen::MatrixXd& a_cov, const Eigen::MatrixXd& r_cov,
                            const Eigen::MatrixXd& n_inv);

// Partial derivatives of the energy w.r.t. (m_a, m_r); entropy-free, so a
// singular d_joint is fine here.
std::pair<Eigen::VectorXd, Eigen::MatrixXd> grad_general(const GeneralState& state,
                                                         const Eigen::VectorXd& d,
                                                         const Eigen::MatrixXd& a_cov,
                                                         const Eigen::MatrixXd& r_cov,
                                                         const Eigen::MatrixXd& n_inv);

// Full (n^2+n) x (n^2+n) second-derivative matrix, response block first.
Eigen::MatrixXd hessian_general(const GeneralState& state, const Eigen::VectorXd& d,
                                const Eigen::MatrixXd& a_cov, const Eigen::MatrixXd& r_cov,
                                const Eigen::MatrixXd& n_inv);

}  // namespace opcal
