#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <utility>
#include <vector>

#include "opcal/field.hpp"

namespace opcal {

struct NewtonOptions {
  int max_iter = 100;
  double grad_tol = 1e-8;
  double backtrack_factor = 0.5;
  double min_step = 1e-10;
};

// Everything the model needs: signal prior A from the spectrum, scalar
// response prior variance R around the offset r0, and white noise of
// standard deviation sigma_n (identity operator w.r.t. the volume-weighted
// scalar product, i.e. per-pixel variance sigma_n^2 / pixel_volume).
struct ModelConfig {
  Grid1D grid{128, 1.0};
  PowerSpectrum spectrum{4.0, 4.0, 4.0};
  double sigma_n = 0.1;
  double r0 = 3.0;
  double response_var = 1.0;
  NewtonOptions newton;
  std::uint64_t seed = 1;

  void validate() const;
};

// Data drawn from the generative model d = (r + r0) e^a + n.
struct MockDataset {
  Field d;
  Field truth_a;
  double truth_r = 0.0;
  double truth_response = 0.0;
};

// Variational parameters: joint mean (m_r, m_a) and covariance blocks with
// the response entry first, so the joint covariance is
//   [[d_rr, d_ra^T], [d_ra, d_aa]].
struct GibbsState {
  Field m_a;
  double m_r = 0.0;
  Eigen::MatrixXd d_aa;
  Eigen::VectorXd d_ra;
  double d_rr = 0.0;
  Field daa_diag;  // cached diagonal of d_aa

  static GibbsState prior(const ModelConfig& config);
  void refresh_diag();
  Eigen::MatrixXd joint_covariance() const;
};

struct MapResult {
  Field map_a;
  double map_r = 0.0;
  double sigma_r = 0.0;
  int iterations = 0;
  bool converged = false;
  double final_grad_norm = 0.0;
};

struct InferenceResult {
  GibbsState state;
  Field map_a;
  double map_r = 0.0;
  double map_sigma_r = 0.0;
  double gibbs_sigma_r = 0.0;
  int iterations = 0;
  bool converged = false;
  double final_grad_norm = 0.0;
  std::vector<double> energy_trace;  // G after each outer iteration
};

MockDataset make_mock_data(const ModelConfig& config, std::uint64_t seed);

// Negative log of the joint density of (a, r, d), up to constants:
// .5 a'A^-1 a + .5 r^2/R + .5 |d - (r+r0) e^a|^2 / sigma_n^2 with the
// volume-weighted norm.
double hamiltonian(const Field& a, double r, const Field& d, const ModelConfig& config);

// Derivatives of the Hamiltonian in the joint (r, a) coordinates, response
// entry first. These drive the MAP Newton iteration and its Laplace error bar.
Eigen::VectorXd hamiltonian_gradient(const Field& a, double r, const Field& d,
                                     const ModelConfig& config);
Eigen::MatrixXd hamiltonian_hessian(const Field& a, double r, const Field& d,
                                    const ModelConfig& config);

// Closed-form Gibbs free energy G(m, D) = <H> - entropy of the Gaussian.
double gibbs_energy(const GibbsState& state, const Field& d, const ModelConfig& config);

// Plain partial derivatives of G with respect to the mean values. (The
// continuum functional derivative is this divided by the pixel volume.)
std::pair<Field, double> grad_gibbs(const GibbsState& state, const Field& d,
                                    const ModelConfig& config);

// Joint (n+1)x(n+1) second-derivative matrix, response entry first.
Eigen::MatrixXd hessian_gibbs(const GibbsState& state, const Field& d,
                              const ModelConfig& config);

// Damped Newton descent on the mean alternating with the covariance update
// D <- (d^2 G / dm dm)^-1; also runs the MAP baseline for comparison.
InferenceResult minimize_gibbs(const Field& d, const ModelConfig& config);

// Posterior mode of the Hamiltonian with a Laplace error bar on the response.
MapResult map_estimate(const Field& d, const ModelConfig& config);

// Pixelwise posterior mean of the signal response:
// (r0 + m_r + (d_ra)_i) exp(m_a + .5 diag(d_aa))_i.
Field posterior_response_mean(const GibbsState& state, const ModelConfig& config);

// Elementwise sqrt of diag(d_aa).
Field uncertainty_band(const GibbsState& state);

// Solves hess * step = -grad with Levenberg damping doubled from 1e-8 until
// the factorization succeeds. Exposed so tests can cross-check directions.
Eigen::VectorXd newton_direction(const Eigen::MatrixXd& hess, const Eigen::VectorXd& grad);

// Convergence metric: sqrt(g_r^2 + |g_a|^2 / pixel_volume), i.e. the response
// component plus the function-space norm of the signal component.
double joint_grad_norm(const Field& grad_a, double grad_r);

}  // namespace opcal
