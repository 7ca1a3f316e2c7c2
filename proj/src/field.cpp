#include "opcal/field.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

#include "opcal/rng.hpp"

namespace opcal {

namespace {

constexpr int kDenseCap = 4096;

void require_same_grid(const Grid1D& a, const Grid1D& b) {
  if (!(a == b)) {
    throw std::invalid_argument("grid mismatch between fields");
  }
}

// Forward real-to-complex transform, unnormalized FFTW convention.
std::vector<std::complex<double>> rfft(const Eigen::VectorXd& x) {
  const int n = static_cast<int>(x.size());
  std::vector<double> in(x.data(), x.data() + n);
  std::vector<std::complex<double>> out(n / 2 + 1);
  fftw_plan plan = fftw_plan_dft_r2c_1d(
      n, in.data(), reinterpret_cast<fftw_complex*>(out.data()), FFTW_ESTIMATE);
  fftw_execute(plan);
  fftw_destroy_plan(plan);
  return out;
}

// Inverse complex-to-real transform divided by n, so irfft(rfft(x)) == x.
Eigen::VectorXd irfft(std::vector<std::complex<double>> spec, int n) {
  Eigen::VectorXd out(n);
  fftw_plan plan = fftw_plan_dft_c2r_1d(
      n, reinterpret_cast<fftw_complex*>(spec.data()), out.data(), FFTW_ESTIMATE);
  fftw_execute(plan);
  fftw_destroy_plan(plan);
  out /= static_cast<double>(n);
  return out;
}

}  // namespace

Grid1D::Grid1D(int n, double len) : n_pixels(n), length(len) {
  if (n_pixels < 2 || n_pixels % 2 != 0) {
    throw std::invalid_argument("Grid1D: n_pixels must be even and >= 2");
  }
  if (!(length > 0.0)) {
    throw std::invalid_argument("Grid1D: length must be positive");
  }
}

Field::Field(const Grid1D& g, Eigen::VectorXd v) : grid(g), values(std::move(v)) {
  if (values.size() != grid.n_pixels) {
    throw std::invalid_argument("Field: value count does not match grid");
  }
  if (!values.allFinite()) {
    throw std::invalid_argument("Field: values must be finite");
  }
}

Field Field::zero(const Grid1D& g) {
  return Field(g, Eigen::VectorXd::Zero(g.n_pixels));
}

Field Field::constant(const Grid1D& g, double value) {
  return Field(g, Eigen::VectorXd::Constant(g.n_pixels, value));
}

Field& Field::operator+=(const Field& other) {
  require_same_grid(grid, other.grid);
  values += other.values;
  return *this;
}

Field& Field::operator-=(const Field& other) {
  require_same_grid(grid, other.grid);
  values -= other.values;
  return *this;
}

Field& Field::operator*=(double factor) {
  values *= factor;
  return *this;
}

Field operator+(Field a, const Field& b) { return a += b; }
Field operator-(Field a, const Field& b) { return a -= b; }
Field operator*(double factor, Field f) { return f *= factor; }

double inner(const Field& a, const Field& b) {
  require_same_grid(a.grid, b.grid);
  return a.grid.pixel_volume() * a.values.dot(b.values);
}

PowerSpectrum::PowerSpectrum(double amplitude, double knee, double slope)
    : p0(amplitude), k0(knee), gamma(slope) {
  if (!(p0 > 0.0) || !(k0 > 0.0) || gamma < 0.0) {
    throw std::invalid_argument("PowerSpectrum: need p0 > 0, k0 > 0, gamma >= 0");
  }
}

double PowerSpectrum::operator()(double k) const {
  const double q = k / k0;
  return p0 * std::pow(1.0 + q * q, -0.5 * gamma);
}

FourierCovariance::FourierCovariance(const Grid1D& grid, const PowerSpectrum& spectrum)
    : grid_(grid), eigenvalues_(grid.n_pixels / 2 + 1) {
  for (int k = 0; k <= grid.n_pixels / 2; ++k) {
    eigenvalues_[k] = spectrum(static_cast<double>(k));
  }
}

FourierCovariance::FourierCovariance(const Grid1D& grid, Eigen::VectorXd mode_eigenvalues)
    : grid_(grid), eigenvalues_(std::move(mode_eigenvalues)) {
  if (eigenvalues_.size() != grid.n_pixels / 2 + 1) {
    throw std::invalid_argument("FourierCovariance: need one eigenvalue per mode 0..n/2");
  }
  if ((eigenvalues_.array() <= 0.0).any()) {
    throw std::invalid_argument("FourierCovariance: eigenvalues must be positive");
  }
}

Field FourierCovariance::apply(const Field& f) const {
  require_same_grid(grid_, f.grid);
  auto spec = rfft(f.values);
  for (int k = 0; k < static_cast<int>(spec.size()); ++k) {
    spec[k] *= eigenvalues_[k];
  }
  return Field(grid_, irfft(std::move(spec), grid_.n_pixels));
}

Field FourierCovariance::apply_inverse(const Field& f) const {
  require_same_grid(grid_, f.grid);
  auto spec = rfft(f.values);
  for (int k = 0; k < static_cast<int>(spec.size()); ++k) {
    spec[k] /= eigenvalues_[k];
  }
  return Field(grid_, irfft(std::move(spec), grid_.n_pixels));
}

Field FourierCovariance::sample(uint64_t seed) const {
  const int n = grid_.n_pixels;
  NormalSampler rng(seed);
  Eigen::VectorXd white(n);
  for (int i = 0; i < n; ++i) {
    white[i] = rng.next();
  }
  auto spec = rfft(white);
  for (int k = 0; k < static_cast<int>(spec.size()); ++k) {
    spec[k] *= std::sqrt(eigenvalues_[k]);
  }
  return Field(grid_, irfft(std::move(spec), n));
}

Eigen::MatrixXd FourierCovariance::dense() const {
  const int n = grid_.n_pixels;
  if (n > kDenseCap) {
    throw std::invalid_argument("FourierCovariance::dense: n_pixels exceeds 4096");
  }
  std::vector<std::complex<double>> spec(eigenvalues_.data(),
                                         eigenvalues_.data() + eigenvalues_.size());
  const Eigen::VectorXd kernel = irfft(std::move(spec), n);
  Eigen::MatrixXd m(n, n);
  for (int x = 0; x < n; ++x) {
    for (int y = 0; y < n; ++y) {
      int delta = std::abs(x - y);
      delta = std::min(delta, n - delta);  // exact symmetry
      m(x, y) = kernel[delta];
    }
  }
  return m;
}

Eigen::MatrixXd FourierCovariance::dense_inverse() const {
  FourierCovariance inverse(grid_, eigenvalues_.cwiseInverse());
  return inverse.dense();
}

Field sample_gaussian_field(const FourierCovariance& cov, uint64_t seed) {
  return cov.sample(seed);
}

Field apply_covariance(const FourierCovariance& cov, const Field& f) {
  return cov.apply(f);
}

Eigen::MatrixXd dense_covariance(const FourierCovariance& cov) {
  return cov.dense();
}

}  // namespace opcal
