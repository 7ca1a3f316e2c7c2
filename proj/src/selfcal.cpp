#include "opcal/selfcal.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <stdexcept>

#include "opcal/rng.hpp"

namespace opcal {

namespace {

constexpr int kDaaCap = 1024;
constexpr double kDResidualTol = 1e-6;
constexpr int kAndersonHistory = 4;

// Below this gradient norm the energy changes fall under the double-precision
// resolution of G, so decrease tests become noise; plain Newton / fixed-point
// steps take over (locally quadratically convergent).
constexpr double kTerminalGradNorm = 1e-3;

// Shared per-call context: pixel volume, the data-term weight
// pixel_volume / sigma_n^2, and the dense prior inverse.
struct Ctx {
  int n = 0;
  double v = 0.0;
  double w = 0.0;
  Eigen::MatrixXd ainv;
};

Ctx make_ctx(const ModelConfig& config) {
  config.validate();
  Ctx ctx;
  ctx.n = config.grid.n_pixels;
  ctx.v = config.grid.pixel_volume();
  ctx.w = ctx.v / (config.sigma_n * config.sigma_n);
  FourierCovariance cov(config.grid, config.spectrum);
  ctx.ainv = cov.dense_inverse();
  return ctx;
}

double rounding_slack(double g) { return 1e-12 * (1.0 + std::abs(g)); }

// log det of a positive-definite matrix; throws when the factorization fails.
double logdet_pd(const Eigen::MatrixXd& m, const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) {
    throw std::domain_error(std::string(what) + ": covariance is not positive definite");
  }
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

Eigen::MatrixXd damped_inverse(const Eigen::MatrixXd& hess) {
  const int n = static_cast<int>(hess.rows());
  Eigen::LLT<Eigen::MatrixXd> llt(hess);
  double lambda = 1e-8;
  while (llt.info() != Eigen::Success) {
    llt.compute(hess + lambda * Eigen::MatrixXd::Identity(n, n));
    lambda *= 2.0;
    if (lambda > 1e40) throw std::runtime_error("damped_inverse: cannot regularize Hessian");
  }
  const Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(n, n));
  return 0.5 * (inv + inv.transpose());
}

struct StateVec {
  double m_r;
  Eigen::VectorXd m_a;
};

GibbsState with_mean(const GibbsState& state, const StateVec& mean) {
  GibbsState out = state;
  out.m_r = mean.m_r;
  out.m_a.values = mean.m_a;
  return out;
}

GibbsState with_covariance(const GibbsState& state, const Eigen::MatrixXd& joint) {
  GibbsState out = state;
  const int n = static_cast<int>(joint.rows()) - 1;
  out.d_rr = joint(0, 0);
  out.d_ra = joint.block(1, 0, n, 1);
  out.d_aa = joint.block(1, 1, n, n);
  out.refresh_diag();
  return out;
}

// Flattens (mean, upper triangle of the joint covariance) for the Anderson
// mixing of the outer fixed-point iteration.
Eigen::VectorXd pack_iterate(const GibbsState& state) {
  const int n = static_cast<int>(state.m_a.size());
  Eigen::VectorXd x(n + 1 + (n + 1) * (n + 2) / 2);
  x[0] = state.m_r;
  x.segment(1, n) = state.m_a.values;
  const Eigen::MatrixXd joint = state.joint_covariance();
  int k = n + 1;
  for (int i = 0; i <= n; ++i) {
    for (int j = i; j <= n; ++j) x[k++] = joint(i, j);
  }
  return x;
}

bool unpack_iterate(const Eigen::VectorXd& x, GibbsState& state) {
  const int n = static_cast<int>(state.m_a.size());
  Eigen::MatrixXd joint(n + 1, n + 1);
  int k = n + 1;
  for (int i = 0; i <= n; ++i) {
    for (int j = i; j <= n; ++j) {
      joint(i, j) = x[k];
      joint(j, i) = x[k];
      ++k;
    }
  }
  if (Eigen::LLT<Eigen::MatrixXd>(joint).info() != Eigen::Success) return false;
  if (!x.allFinite()) return false;
  state.m_r = x[0];
  state.m_a.values = x.segment(1, n);
  state = with_covariance(state, joint);
  return true;
}

}  // namespace

void ModelConfig::validate() const {
  if (!(sigma_n > 0.0)) throw std::invalid_argument("ModelConfig: sigma_n must be positive");
  if (!(response_var > 0.0)) throw std::invalid_argument("ModelConfig: R must be positive");
  if (grid.n_pixels > kDaaCap) {
    throw std::invalid_argument("ModelConfig: n_pixels capped at 1024 for dense covariances");
  }
}

GibbsState GibbsState::prior(const ModelConfig& config) {
  config.validate();
  GibbsState state;
  state.m_a = Field::zero(config.grid);
  state.m_r = 0.0;
  state.d_aa = FourierCovariance(config.grid, config.spectrum).dense();
  state.d_ra = Eigen::VectorXd::Zero(config.grid.n_pixels);
  state.d_rr = config.response_var;
  state.daa_diag = Field(config.grid, state.d_aa.diagonal());
  return state;
}

void GibbsState::refresh_diag() {
  daa_diag = Field(m_a.grid, d_aa.diagonal());
}

Eigen::MatrixXd GibbsState::joint_covariance() const {
  const int n = static_cast<int>(d_aa.rows());
  Eigen::MatrixXd joint(n + 1, n + 1);
  joint(0, 0) = d_rr;
  joint.block(0, 1, 1, n) = d_ra.transpose();
  joint.block(1, 0, n, 1) = d_ra;
  joint.block(1, 1, n, n) = d_aa;
  return joint;
}

MockDataset make_mock_data(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const FourierCovariance cov(config.grid, config.spectrum);
  MockDataset data;
  data.truth_a = cov.sample(NormalSampler::substream(seed, 0));
  NormalSampler response_rng(NormalSampler::substream(seed, 1));
  data.truth_r = std::sqrt(config.response_var) * response_rng.next();
  data.truth_response = data.truth_r + config.r0;

  NormalSampler noise_rng(NormalSampler::substream(seed, 2));
  const double noise_std = config.sigma_n / std::sqrt(config.grid.pixel_volume());
  Eigen::VectorXd d = data.truth_response * data.truth_a.values.array().exp().matrix();
  for (int i = 0; i < config.grid.n_pixels; ++i) {
    d[i] += noise_std * noise_rng.next();
  }
  data.d = Field(config.grid, std::move(d));
  return data;
}

double hamiltonian(const Field& a, double r, const Field& d, const ModelConfig& config) {
  const Ctx ctx = make_ctx(config);
  if (!(a.grid == d.grid) || !(a.grid == config.grid)) {
    throw std::invalid_argument("hamiltonian: grid mismatch");
  }
  const Eigen::VectorXd resid =
      d.values - (r + config.r0) * a.values.array().exp().matrix();
  return 0.5 * a.values.dot(ctx.ainv * a.values) +
         0.5 * r * r / config.response_var + 0.5 * ctx.w * resid.squaredNorm();
}

double gibbs_energy(const GibbsState& state, const Field& d, const ModelConfig& config) {
  const Ctx ctx = make_ctx(config);
  const int n = ctx.n;
  const Eigen::ArrayXd ma = state.m_a.values.array();
  const Eigen::ArrayXd diag = state.daa_diag.values.array();
  const Eigen::ArrayXd e1 = (ma + 0.5 * diag).exp();
  const Eigen::ArrayXd e2 = (2.0 * ma + 2.0 * diag).exp();
  const Eigen::ArrayXd rho = state.m_r + config.r0 + state.d_ra.array();
  const Eigen::ArrayXd rho2 = state.m_r + config.r0 + 2.0 * state.d_ra.array();
  const Eigen::ArrayXd dv = d.values.array();

  double u = 0.5 * state.m_a.values.dot(ctx.ainv * state.m_a.values);
  u += 0.5 * ctx.ainv.cwiseProduct(state.d_aa).sum();
  u += 0.5 * (state.m_r * state.m_r + state.d_rr) / config.response_var;
  u += 0.5 * ctx.w * dv.square().sum();
  u -= ctx.w * (dv * rho * e1).sum();
  u += 0.5 * ctx.w * (e2 * (state.d_rr + rho2.square())).sum();

  const double entropy = 0.5 * (n + 1) * std::log(2.0 * 3.14159265358979323846 * 2.718281828459045235) +
                         0.5 * logdet_pd(state.joint_covariance(), "gibbs_energy");
  return u - entropy;
}

std::pair<Field, double> grad_gibbs(const GibbsState& state, const Field& d,
                                    const ModelConfig& config) {
  const Ctx ctx = make_ctx(config);
  const Eigen::ArrayXd ma = state.m_a.values.array();
  const Eigen::ArrayXd diag = state.daa_diag.values.array();
  const Eigen::ArrayXd e1 = (ma + 0.5 * diag).exp();
  const Eigen::ArrayXd e2 = (2.0 * ma + 2.0 * diag).exp();
  const Eigen::ArrayXd rho = state.m_r + config.r0 + state.d_ra.array();
  const Eigen::ArrayXd rho2 = state.m_r + config.r0 + 2.0 * state.d_ra.array();
  const Eigen::ArrayXd dv = d.values.array();

  Eigen::VectorXd grad_a = ctx.ainv * state.m_a.values;
  grad_a.array() += ctx.w * (-dv * rho * e1 + e2 * (state.d_rr + rho2.square()));

  double grad_r = state.m_r / config.response_var;
  grad_r += ctx.w * (-(dv * e1).sum() + (e2 * rho2).sum());
  return {Field(state.m_a.grid, std::move(grad_a)), grad_r};
}

Eigen::MatrixXd hessian_gibbs(const GibbsState& state, const Field& d,
                              const ModelConfig& config) {
  const Ctx ctx = make_ctx(config);
  const int n = ctx.n;
  const Eigen::ArrayXd ma = state.m_a.values.array();
  const Eigen::ArrayXd diag = state.daa_diag.values.array();
  const Eigen::ArrayXd e1 = (ma + 0.5 * diag).exp();
  const Eigen::ArrayXd e2 = (2.0 * ma + 2.0 * diag).exp();
  const Eigen::ArrayXd rho = state.m_r + config.r0 + state.d_ra.array();
  const Eigen::ArrayXd rho2 = state.m_r + config.r0 + 2.0 * state.d_ra.array();
  const Eigen::ArrayXd dv = d.values.array();

  Eigen::MatrixXd hess(n + 1, n + 1);
  hess(0, 0) = 1.0 / config.response_var + ctx.w * e2.sum();
  const Eigen::VectorXd cross = (ctx.w * (-dv * e1 + 2.0 * e2 * rho2)).matrix();
  hess.block(0, 1, 1, n) = cross.transpose();
  hess.block(1, 0, n, 1) = cross;
  hess.block(1, 1, n, n) = ctx.ainv;
  hess.block(1, 1, n, n).diagonal() +=
      (ctx.w * (-dv * rho * e1 + 2.0 * e2 * (state.d_rr + rho2.square()))).matrix();
  return hess;
}

Eigen::VectorXd newton_direction(const Eigen::MatrixXd& hess, const Eigen::VectorXd& grad) {
  const int n = static_cast<int>(hess.rows());
  Eigen::LLT<Eigen::MatrixXd> llt(hess);
  double lambda = 1e-8;
  while (llt.info() != Eigen::Success) {
    llt.compute(hess + lambda * Eigen::MatrixXd::Identity(n, n));
    lambda *= 2.0;
    if (lambda > 1e40) throw std::runtime_error("newton_direction: cannot regularize Hessian");
  }
  return -llt.solve(grad);
}

double joint_grad_norm(const Field& grad_a, double grad_r) {
  const double v = grad_a.grid.pixel_volume();
  return std::sqrt(grad_r * grad_r + grad_a.values.squaredNorm() / v);
}

Eigen::VectorXd hamiltonian_gradient(const Field& a, double r, const Field& d,
                                     const ModelConfig& config) {
  const Ctx ctx = make_ctx(config);
  const int n = ctx.n;
  const Eigen::ArrayXd ea = a.values.array().exp();
  const double rho = r + config.r0;
  Eigen::VectorXd g(n + 1);
  g[0] = r / config.response_var + ctx.w * (ea * (rho * ea - d.values.array())).sum();
  g.tail(n) = ctx.ainv * a.values;
  g.tail(n).array() += ctx.w * rho * ea * (rho * ea - d.values.array());
  return g;
}

Eigen::MatrixXd hamiltonian_hessian(const Field& a, double r, const Field& d,
                                    const ModelConfig& config) {
  const Ctx ctx = make_ctx(config);
  const int n = ctx.n;
  const Eigen::ArrayXd ea = a.values.array().exp();
  const Eigen::ArrayXd e2a = ea.square();
  const double rho = r + config.r0;
  Eigen::MatrixXd h(n + 1, n + 1);
  h(0, 0) = 1.0 / config.response_var + ctx.w * e2a.sum();
  const Eigen::VectorXd cross = (ctx.w * (2.0 * rho * e2a - d.values.array() * ea)).matrix();
  h.block(0, 1, 1, n) = cross.transpose();
  h.block(1, 0, n, 1) = cross;
  h.block(1, 1, n, n) = ctx.ainv;
  h.block(1, 1, n, n).diagonal() +=
      (ctx.w * (2.0 * rho * rho * e2a - rho * d.values.array() * ea)).matrix();
  return h;
}

MapResult map_estimate(const Field& d, const ModelConfig& config) {
  const int n = config.grid.n_pixels;
  const NewtonOptions& opt = config.newton;

  Eigen::VectorXd a = Eigen::VectorXd::Zero(n);
  double r = 0.0;

  const auto energy = [&](const Eigen::VectorXd& av, double rv) {
    return hamiltonian(Field(config.grid, av), rv, d, config);
  };
  const auto gradient = [&](const Eigen::VectorXd& av, double rv) {
    return hamiltonian_gradient(Field(config.grid, av), rv, d, config);
  };
  const auto hessian = [&](const Eigen::VectorXd& av, double rv) {
    return hamiltonian_hessian(Field(config.grid, av), rv, d, config);
  };

  MapResult result;
  double g_cur = energy(a, r);
  double grad_norm = 0.0;
  int iter = 0;
  for (; iter < opt.max_iter; ++iter) {
    const Eigen::VectorXd grad = gradient(a, r);
    grad_norm = joint_grad_norm(Field(config.grid, grad.tail(n)), grad[0]);
    if (grad_norm <= opt.grad_tol) {
      result.converged = true;
      break;
    }
    const Eigen::VectorXd step = newton_direction(hessian(a, r), grad);
    if (grad_norm <= kTerminalGradNorm) {
      a += step.tail(n);
      r += step[0];
      g_cur = energy(a, r);
      continue;
    }
    double t = 1.0;
    bool moved = false;
    while (t >= opt.min_step) {
      const Eigen::VectorXd a_try = a + t * step.tail(n);
      const double r_try = r + t * step[0];
      const double g_try = energy(a_try, r_try);
      if (g_try <= g_cur + rounding_slack(g_cur)) {
        a = a_try;
        r = r_try;
        g_cur = g_try;
        moved = true;
        break;
      }
      t *= opt.backtrack_factor;
    }
    if (!moved) break;  // line search exhausted; flagged unconverged below
  }

  result.map_a = Field(config.grid, a);
  result.map_r = r;
  result.iterations = iter;
  if (result.converged) {
    result.final_grad_norm = grad_norm;
  } else {
    const Eigen::VectorXd grad = gradient(a, r);
    result.final_grad_norm = joint_grad_norm(Field(config.grid, grad.tail(n)), grad[0]);
  }
  const Eigen::MatrixXd cov = damped_inverse(hessian(a, r));
  result.sigma_r = std::sqrt(std::max(0.0, cov(0, 0)));
  return result;
}

InferenceResult minimize_gibbs(const Field& d, const ModelConfig& config) {
  const NewtonOptions& opt = config.newton;
  const int n = config.grid.n_pixels;
  GibbsState state = GibbsState::prior(config);

  InferenceResult result;
  double g_cur = gibbs_energy(state, d, config);
  result.energy_trace.push_back(g_cur);

  // Anderson mixing history for the outer (mean, covariance) fixed point.
  std::vector<Eigen::VectorXd> history_x, history_fx;

  bool converged = false;
  double grad_norm = 0.0;
  int iter = 0;
  for (; iter < opt.max_iter; ++iter) {
    const auto [grad_a, grad_r] = grad_gibbs(state, d, config);
    grad_norm = joint_grad_norm(grad_a, grad_r);
    if (grad_norm <= opt.grad_tol) {
      const Eigen::MatrixXd target = damped_inverse(hessian_gibbs(state, d, config));
      const Eigen::MatrixXd current = state.joint_covariance();
      if ((target - current).norm() <= kDResidualTol * current.norm()) {
        converged = true;
        break;
      }
    }
    const bool terminal = grad_norm <= kTerminalGradNorm;
    const Eigen::VectorXd x_in = pack_iterate(state);

    // Damped Newton step on the mean at fixed covariance.
    GibbsState plain = state;
    double g_plain = g_cur;
    {
      Eigen::VectorXd grad(n + 1);
      grad[0] = grad_r;
      grad.tail(n) = grad_a.values;
      const Eigen::VectorXd step =
          newton_direction(hessian_gibbs(plain, d, config), grad);
      if (terminal) {
        plain = with_mean(plain, {plain.m_r + step[0], plain.m_a.values + step.tail(n)});
        g_plain = gibbs_energy(plain, d, config);
      } else {
        double t = 1.0;
        while (t >= opt.min_step) {
          const GibbsState candidate = with_mean(
              plain, {plain.m_r + t * step[0], plain.m_a.values + t * step.tail(n)});
          const double g_try = gibbs_energy(candidate, d, config);
          if (g_try <= g_plain + rounding_slack(g_plain)) {
            plain = candidate;
            g_plain = g_try;
            break;
          }
          t *= opt.backtrack_factor;
        }
      }
    }

    // Covariance refresh D <- hessian^-1, damped toward the previous D
    // whenever the full replacement would raise the energy.
    {
      const Eigen::MatrixXd target = damped_inverse(hessian_gibbs(plain, d, config));
      if (terminal) {
        plain = with_covariance(plain, target);
        g_plain = gibbs_energy(plain, d, config);
      } else {
        const Eigen::MatrixXd current = plain.joint_covariance();
        double tau = 1.0;
        while (tau >= 1.0 / 1024.0) {
          const GibbsState candidate =
              with_covariance(plain, ((1.0 - tau) * current + tau * target).eval());
          const double g_try = gibbs_energy(candidate, d, config);
          if (g_try <= g_plain + rounding_slack(g_plain)) {
            plain = candidate;
            g_plain = g_try;
            break;
          }
          tau *= 0.5;
        }
      }
    }

    // Anderson candidate from the outer-iteration history; kept only when it
    // does not lose energy against the plain step, so the trace stays
    // non-increasing.
    state = plain;
    g_cur = g_plain;
    history_x.push_back(x_in);
    history_fx.push_back(pack_iterate(plain));
    if (static_cast<int>(history_x.size()) > kAndersonHistory) {
      history_x.erase(history_x.begin());
      history_fx.erase(history_fx.begin());
    }
    if (history_x.size() >= 2) {
      const int m = static_cast<int>(history_x.size());
      const Eigen::VectorXd r_last = history_fx.back() - history_x.back();
      Eigen::MatrixXd dr(r_last.size(), m - 1);
      for (int j = 0; j + 1 < m; ++j) {
        dr.col(j) = (history_fx[j + 1] - history_x[j + 1]) -
                    (history_fx[j] - history_x[j]);
      }
      const Eigen::VectorXd gamma =
          (dr.transpose() * dr +
           1e-12 * Eigen::MatrixXd::Identity(m - 1, m - 1))
              .ldlt()
              .solve(dr.transpose() * r_last);
      Eigen::VectorXd x_acc = history_fx.back();
      for (int j = 0; j + 1 < m; ++j) {
        x_acc -= gamma[j] * (history_fx[j + 1] - history_fx[j]);
      }
      GibbsState candidate = plain;
      if (unpack_iterate(x_acc, candidate)) {
        bool usable = true;
        double g_try = 0.0;
        try {
          g_try = gibbs_energy(candidate, d, config);
        } catch (const std::exception&) {
          usable = false;
        }
        if (usable && g_try <= g_plain + rounding_slack(g_plain)) {
          state = candidate;
          g_cur = g_try;
        }
      }
    }
    result.energy_trace.push_back(g_cur);
  }

  const auto [grad_a, grad_r] = grad_gibbs(state, d, config);
  result.final_grad_norm = joint_grad_norm(grad_a, grad_r);
  result.converged = converged;
  result.iterations = iter;
  result.gibbs_sigma_r = std::sqrt(std::max(0.0, state.d_rr));
  result.state = std::move(state);

  const MapResult map = map_estimate(d, config);
  result.map_a = map.map_a;
  result.map_r = map.map_r;
  result.map_sigma_r = map.sigma_r;
  result.converged = result.converged && map.converged;
  return result;
}

Field posterior_response_mean(const GibbsState& state, const ModelConfig& config) {
  const Eigen::ArrayXd e1 =
      (state.m_a.values.array() + 0.5 * state.daa_diag.values.array()).exp();
  const Eigen::ArrayXd rho = config.r0 + state.m_r + state.d_ra.array();
  return Field(state.m_a.grid, (rho * e1).matrix());
}

Field uncertainty_band(const GibbsState& state) {
  if ((state.daa_diag.values.array() < 0.0).any()) {
    throw std::domain_error("uncertainty_band: negative covariance diagonal");
  }
  return Field(state.m_a.grid, state.daa_diag.values.cwiseSqrt());
}

}  // namespace opcal
