#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>

#include "opcal/expr.hpp"

namespace opcal {

using ScalarFn = std::function<double(const Eigen::VectorXd&)>;
using VectorFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

struct OracleEstimate {
  double value = 0.0;
  double stderr_ = 0.0;
  std::int64_t n_samples = 0;
};

// Monte-Carlo Gaussian expectation with standard error. Samples are drawn in
// fixed-size batches whose substream seeds depend only on (seed, batch index),
// so the estimate is independent of evaluation order.
OracleEstimate mc_expectation(const ScalarFn& f, const GaussianParams& g,
                              std::int64_t n_samples, std::uint64_t seed);

// Tensor-product Gauss-Hermite expectation, dimension <= 3.
double quadrature_expectation(const ScalarFn& f, const GaussianParams& g,
                              int nodes_per_axis = 64);

// Central differences with per-coordinate step h * (1 + |x_i|).
Eigen::VectorXd finite_diff_gradient(const ScalarFn& f, const Eigen::VectorXd& x,
                                     double h = 1e-5);

// Central-difference Jacobian of a vector function; column i differentiates
// along coordinate i. Used to check Hessians against analytic gradients.
Eigen::MatrixXd finite_diff_jacobian(const VectorFn& f, const Eigen::VectorXd& x,
                                     double h = 1e-6);

}  // namespace opcal
