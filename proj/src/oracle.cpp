#include "opcal/oracle.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "opcal/rng.hpp"

namespace opcal {

namespace {

constexpr std::int64_t kBatchSize = 8192;

// Cholesky factor of the covariance, with escalating diagonal jitter when the
// matrix is semidefinite only to rounding.
Eigen::MatrixXd cholesky_with_jitter(const Eigen::MatrixXd& cov) {
  const int n = static_cast<int>(cov.rows());
  double jitter = 1e-12 * cov.trace() / n;
  if (jitter <= 0.0) jitter = 1e-300;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  for (int attempt = 0; attempt < 12; ++attempt) {
    llt.compute(cov + jitter * Eigen::MatrixXd::Identity(n, n));
    if (llt.info() == Eigen::Success) return llt.matrixL();
    jitter *= 10.0;
  }
  throw std::runtime_error("mc_expectation: covariance is not positive semi-definite");
}

// Nodes and weights of n-point Gauss-Hermite quadrature (weight exp(-x^2)),
// from the symmetric tridiagonal Jacobi matrix.
void gauss_hermite(int n, Eigen::VectorXd& nodes, Eigen::VectorXd& weights) {
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    const double beta = std::sqrt(0.5 * i);
    jacobi(i, i - 1) = beta;
    jacobi(i - 1, i) = beta;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  nodes = eig.eigenvalues();
  const double sqrt_pi = std::sqrt(3.14159265358979323846);
  weights.resize(n);
  for (int i = 0; i < n; ++i) {
    const double v0 = eig.eigenvectors()(0, i);
    weights[i] = sqrt_pi * v0 * v0;
  }
}

}  // namespace

OracleEstimate mc_expectation(const ScalarFn& f, const GaussianParams& g,
                              std::int64_t n_samples, std::uint64_t seed) {
  if (n_samples < 100) {
    throw std::invalid_argument("mc_expectation: need at least 100 samples");
  }
  const int n = g.dimension();
  const Eigen::MatrixXd chol = cholesky_with_jitter(g.cov);

  // Welford accumulation over deterministic per-batch substreams.
  double mean = 0.0;
  double m2 = 0.0;
  std::int64_t count = 0;
  Eigen::VectorXd draw(n);
  const std::int64_t n_batches = (n_samples + kBatchSize - 1) / kBatchSize;
  for (std::int64_t batch = 0; batch < n_batches; ++batch) {
    NormalSampler rng(NormalSampler::substream(seed, static_cast<std::uint64_t>(batch)));
    const std::int64_t batch_count = std::min(kBatchSize, n_samples - batch * kBatchSize);
    for (std::int64_t s = 0; s < batch_count; ++s) {
      for (int i = 0; i < n; ++i) draw[i] = rng.next();
      const double value = f(g.mean + chol * draw);
      ++count;
      const double delta = value - mean;
      mean += delta / static_cast<double>(count);
      m2 += delta * (value - mean);
    }
  }
  OracleEstimate est;
  est.value = mean;
  est.n_samples = count;
  est.stderr_ = count > 1 ? std::sqrt(m2 / static_cast<double>(count - 1) /
                                      static_cast<double>(count))
                          : 0.0;
  return est;
}

double quadrature_expectation(const ScalarFn& f, const GaussianParams& g,
                              int nodes_per_axis) {
  const int n = g.dimension();
  if (n > 3) {
    throw std::invalid_argument("quadrature_expectation: dimension capped at 3");
  }
  if (nodes_per_axis < 64) nodes_per_axis = 64;

  Eigen::VectorXd nodes, weights;
  gauss_hermite(nodes_per_axis, nodes, weights);

  // Transform s = m + sqrt(2) L x with L from the (possibly semidefinite)
  // eigendecomposition; Gauss-Hermite weights then carry pi^(-n/2).
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g.cov);
  const Eigen::VectorXd lambda = eig.eigenvalues().cwiseMax(0.0);
  const Eigen::MatrixXd l = eig.eigenvectors() * lambda.cwiseSqrt().asDiagonal();

  const double norm = std::pow(3.14159265358979323846, -0.5 * n);
  const double sqrt2 = std::sqrt(2.0);
  double total = 0.0;
  Eigen::VectorXd x(n);
  std::vector<int> idx(n, 0);
  while (true) {
    double w = norm;
    for (int i = 0; i < n; ++i) {
      x[i] = nodes[idx[i]];
      w *= weights[idx[i]];
    }
    total += w * f(g.mean + sqrt2 * (l * x));
    int axis = 0;
    while (axis < n && ++idx[axis] == nodes_per_axis) {
      idx[axis] = 0;
      ++axis;
    }
    if (axis == n) break;
  }
  return total;
}

Eigen::VectorXd finite_diff_gradient(const ScalarFn& f, const Eigen::VectorXd& x,
                                     double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_gradient: h must be positive");
  Eigen::VectorXd grad(x.size());
  Eigen::VectorXd probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double step = h * (1.0 + std::abs(x[i]));
    probe[i] = x[i] + step;
    const double above = f(probe);
    probe[i] = x[i] - step;
    const double below = f(probe);
    probe[i] = x[i];
    grad[i] = (above - below) / (2.0 * step);
  }
  return grad;
}

Eigen::MatrixXd finite_diff_jacobian(const VectorFn& f, const Eigen::VectorXd& x,
                                     double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_jacobian: h must be positive");
  Eigen::MatrixXd jac;
  Eigen::VectorXd probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double step = h * (1.0 + std::abs(x[i]));
    probe[i] = x[i] + step;
    const Eigen::VectorXd above = f(probe);
    probe[i] = x[i] - step;
    const Eigen::VectorXd below = f(probe);
    probe[i] = x[i];
    if (jac.size() == 0) jac.resize(above.size(), x.size());
    jac.col(i) = (above - below) / (2.0 * step);
  }
  return jac;
}

}  // namespace opcal
