#pragma once

#include <Eigen/Dense>
#include <cstdint>

namespace opcal {

// Periodic 1-D grid. n_pixels must be even so Fourier modes pair cleanly.
struct Grid1D {
  int n_pixels = 0;
  double length = 1.0;

  Grid1D() = default;
  Grid1D(int n, double len);

  double pixel_volume() const { return length / n_pixels; }
  bool operator==(const Grid1D& other) const {
    return n_pixels == other.n_pixels && length == other.length;
  }
};

// Real-valued function sampled on a periodic grid.
struct Field {
  Grid1D grid;
  Eigen::VectorXd values;

  Field() = default;
  Field(const Grid1D& g, Eigen::VectorXd v);
  static Field zero(const Grid1D& g);
  static Field constant(const Grid1D& g, double value);

  int size() const { return grid.n_pixels; }

  Field& operator+=(const Field& other);
  Field& operator-=(const Field& other);
  Field& operator*=(double factor);
};

Field operator+(Field a, const Field& b);
Field operator-(Field a, const Field& b);
Field operator*(double factor, Field f);

// Volume-weighted scalar product: pixel_volume * sum_x a_x b_x.
double inner(const Field& a, const Field& b);

// Isotropic power law with a knee: P(k) = p0 (1 + (k/k0)^2)^(-gamma/2),
// k counted in units of the fundamental mode of the box.
struct PowerSpectrum {
  double p0 = 4.0;
  double k0 = 4.0;
  double gamma = 4.0;

  PowerSpectrum() = default;
  PowerSpectrum(double amplitude, double knee, double slope);

  double operator()(double k) const;
};

// Covariance operator diagonal in Fourier space. The per-mode spectrum values
// are the eigenvalues of the operator directly: with the unitary transform
// convention, a white spectrum P(k) = 1 realizes the identity matrix and the
// per-pixel variance of samples is the mean of the spectrum values.
class FourierCovariance {
 public:
  FourierCovariance(const Grid1D& grid, const PowerSpectrum& spectrum);
  // Explicit eigenvalues, one per non-negative mode k = 0..n/2.
  FourierCovariance(const Grid1D& grid, Eigen::VectorXd mode_eigenvalues);

  const Grid1D& grid() const { return grid_; }
  const Eigen::VectorXd& mode_eigenvalues() const { return eigenvalues_; }

  Field apply(const Field& f) const;
  Field apply_inverse(const Field& f) const;
  Field sample(uint64_t seed) const;

  // Dense realizations are capped at n_pixels <= 4096.
  Eigen::MatrixXd dense() const;
  Eigen::MatrixXd dense_inverse() const;

 private:
  Grid1D grid_;
  Eigen::VectorXd eigenvalues_;  // size n/2 + 1
};

Field sample_gaussian_field(const FourierCovariance& cov, uint64_t seed);
Field apply_covariance(const FourierCovariance& cov, const Field& f);
Eigen::MatrixXd dense_covariance(const FourierCovariance& cov);

}  // namespace opcal
