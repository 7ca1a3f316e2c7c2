#include "opcal/general_response.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <stdexcept>

namespace opcal {

namespace {

constexpr int kGeneralCap = 8;

struct Work {
  int n;
  Eigen::MatrixXd ainv;
  Eigen::MatrixXd rinv;
  Eigen::VectorXd e1;        // exp(m_a + .5 diag(d_aa))
  Eigen::MatrixXd coupling;  // e1_l e1_i exp((d_aa)_li)
  Eigen::VectorXd dn;        // n_inv * d
  // b3(k,l,i) = (m_r)_kl + (d_ra)_(kl),l + (d_ra)_(kl),i
  double b3(const GeneralState& s, int k, int l, int i) const {
    const int kl = s.flat(k, l);
    return s.m_r(k, l) + s.d_ra(kl, l) + s.d_ra(kl, i);
  }
};

Eigen::MatrixXd pd_inverse(const Eigen::MatrixXd& m, const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument(std::string(what) + ": matrix is not positive definite");
  }
  const Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
  return 0.5 * (inv + inv.transpose());  // exact symmetry
}

Work make_work(const GeneralState& state, const Eigen::VectorXd& d,
               const Eigen::MatrixXd& a_cov, const Eigen::MatrixXd& r_cov,
               const Eigen::MatrixXd& n_inv) {
  const int n = state.n();
  if (d.size() != n || a_cov.rows() != n || n_inv.rows() != n ||
      r_cov.rows() != n * n) {
    throw std::invalid_argument("general response: dimension mismatch");
  }
  if ((n_inv - n_inv.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + n_inv.norm())) {
    throw std::invalid_argument("general response: n_inv must be symmetric");
  }
  Work w;
  w.n = n;
  w.ainv = pd_inverse(a_cov, "a_cov");
  w.rinv = pd_inverse(r_cov, "r_cov");
  w.e1.resize(n);
  for (int i = 0; i < n; ++i) {
    w.e1[i] = std::exp(state.m_a[i] + 0.5 * state.d_aa(i, i));
  }
  w.coupling.resize(n, n);
  for (int l = 0; l < n; ++l) {
    for (int i = 0; i < n; ++i) {
      w.coupling(l, i) = w.e1[l] * w.e1[i] * std::exp(state.d_aa(l, i));
    }
  }
  w.dn = n_inv * d;
  return w;
}

}  // namespace

GeneralState::GeneralState(Eigen::VectorXd ma, Eigen::MatrixXd mr, Eigen::MatrixXd d)
    : m_a(std::move(ma)), m_r(std::move(mr)), d_joint(std::move(d)) {
  const int dim = n();
  if (dim < 1 || dim > kGeneralCap) {
    throw std::invalid_argument("GeneralState: n must be in 1..8");
  }
  const int joint = dim * dim + dim;
  if (m_r.rows() != dim || m_r.cols() != dim || d_joint.rows() != joint ||
      d_joint.cols() != joint) {
    throw std::invalid_argument("GeneralState: inconsistent shapes");
  }
  if ((d_joint - d_joint.transpose()).cwiseAbs().maxCoeff() >
      1e-12 * (1.0 + d_joint.norm())) {
    throw std::invalid_argument("GeneralState: joint covariance must be symmetric");
  }
}

double gibbs_energy_general(const GeneralState& state, const Eigen::VectorXd& d,
                            const Eigen::MatrixXd& a_cov, const Eigen::MatrixXd& r_cov,
                            const Eigen::MatrixXd& n_inv) {
  const Work w = make_work(state, d, a_cov, r_cov, n_inv);
  const int n = w.n;
  const int n2 = n * n;

  Eigen::VectorXd vec_mr(n2);
  for (int k = 0; k < n; ++k) {
    for (int l = 0; l < n; ++l) vec_mr[state.flat(k, l)] = state.m_r(k, l);
  }

  double u = 0.5 * state.m_a.dot(w.ainv * state.m_a);
  u += 0.5 * w.ainv.cwiseProduct(state.d_joint.block(n2, n2, n, n)).sum();
  u += 0.5 * vec_mr.dot(w.rinv * vec_mr);
  u += 0.5 * w.rinv.cwiseProduct(state.d_joint.block(0, 0, n2, n2)).sum();
  u += 0.5 * d.dot(n_inv * d);

  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      u -= w.dn[j] * (state.m_r(j, i) + state.d_ra(state.flat(j, i), i)) * w.e1[i];
    }
  }

  for (int k = 0; k < n; ++k) {
    for (int l = 0; l < n; ++l) {
      for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) {
          const double bracket = state.d_rr(state.flat(k, l), state.flat(j, i)) +
                                 w.b3(state, k, l, i) * w.b3(state, j, i, l);
          u += 0.5 * n_inv(k, j) * w.coupling(l, i) * bracket;
        }
      }
    }
  }

  Eigen::LLT<Eigen::MatrixXd> llt(state.d_joint);
  if (llt.info() != Eigen::Success) {
    throw std::domain_error("gibbs_energy_general: joint covariance not positive definite");
  }
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double entropy =
      0.5 * (n2 + n) * std::log(2.0 * 3.14159265358979323846 * 2.718281828459045235) +
      0.5 * logdet;
  return u - entropy;
}

std::pair<Eigen::VectorXd, Eigen::MatrixXd> grad_general(const GeneralState& state,
                                                         const Eigen::VectorXd& d,
                                                         const Eigen::MatrixXd& a_cov,
                                                         const Eigen::MatrixXd& r_cov,
                                                         const Eigen::MatrixXd& n_inv) {
  const Work w = make_work(state, d, a_cov, r_cov, n_inv);
  const int n = w.n;

  Eigen::VectorXd grad_a = w.ainv * state.m_a;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      grad_a[i] -= w.dn[j] * (state.m_r(j, i) + state.d_ra(state.flat(j, i), i)) * w.e1[i];
    }
    for (int k = 0; k < n; ++k) {
      for (int l = 0; l < n; ++l) {
        for (int j = 0; j < n; ++j) {
          const double bracket = state.d_rr(state.flat(k, l), state.flat(j, i)) +
                                 w.b3(state, k, l, i) * w.b3(state, j, i, l);
          grad_a[i] += n_inv(k, j) * w.coupling(l, i) * bracket;
        }
      }
    }
  }

  Eigen::VectorXd vec_mr(n * n);
  for (int k = 0; k < n; ++k) {
    for (int l = 0; l < n; ++l) vec_mr[state.flat(k, l)] = state.m_r(k, l);
  }
  const Eigen::VectorXd prior_r = w.rinv * vec_mr;

  Eigen::MatrixXd grad_r(n, n);
  for (int p = 0; p < n; ++p) {
    for (int q = 0; q < n; ++q) {
      double g = prior_r[state.flat(p, q)] - w.dn[p] * w.e1[q];
      for (int k = 0; k < n; ++k) {
        for (int l = 0; l < n; ++l) {
          g += n_inv(k, p) * w.coupling(l, q) * w.b3(state, k, l, q);
        }
      }
      grad_r(p, q) = g;
    }
  }
  return {std::move(grad_a), std::move(grad_r)};
}

Eigen::MatrixXd hessian_general(const GeneralState& state, const Eigen::VectorXd& d,
                                const Eigen::MatrixXd& a_cov, const Eigen::MatrixXd& r_cov,
                                const Eigen::MatrixXd& n_inv) {
  const Work w = make_work(state, d, a_cov, r_cov, n_inv);
  const int n = w.n;
  const int n2 = n * n;
  Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(n2 + n, n2 + n);

  // response-response block
  for (int p = 0; p < n; ++p) {
    for (int q = 0; q < n; ++q) {
      for (int pp = 0; pp < n; ++pp) {
        for (int qq = 0; qq < n; ++qq) {
          hess(state.flat(p, q), state.flat(pp, qq)) =
              w.rinv(state.flat(p, q), state.flat(pp, qq)) +
              n_inv(pp, p) * w.coupling(qq, q);
        }
      }
    }
  }

  // response-signal block
  for (int p = 0; p < n; ++p) {
    for (int q = 0; q < n; ++q) {
      for (int i = 0; i < n; ++i) {
        double h = 0.0;
        if (q == i) h -= w.dn[p] * w.e1[q];
        for (int k = 0; k < n; ++k) {
          h += n_inv(k, p) * w.coupling(i, q) * w.b3(state, k, i, q);
          if (q == i) {
            for (int l = 0; l < n; ++l) {
              h += n_inv(k, p) * w.coupling(l, q) * w.b3(state, k, l, q);
            }
          }
        }
        hess(state.flat(p, q), n2 + i) = h;
        hess(n2 + i, state.flat(p, q)) = h;
      }
    }
  }

  // signal-signal block
  for (int i = 0; i < n; ++i) {
    for (int ii = 0; ii < n; ++ii) {
      double h = w.ainv(i, ii);
      if (i == ii) {
        for (int j = 0; j < n; ++j) {
          h -= w.dn[j] * (state.m_r(j, i) + state.d_ra(state.flat(j, i), i)) * w.e1[i];
        }
      }
      for (int k = 0; k < n; ++k) {
        for (int j = 0; j < n; ++j) {
          const double bracket_ii =
              state.d_rr(state.flat(k, ii), state.flat(j, i)) +
              w.b3(state, k, ii, i) * w.b3(state, j, i, ii);
          h += n_inv(k, j) * w.coupling(ii, i) * bracket_ii;
          if (i == ii) {
            for (int l = 0; l < n; ++l) {
              const double bracket =
                  state.d_rr(state.flat(k, l), state.flat(j, i)) +
                  w.b3(state, k, l, i) * w.b3(state, j, i, l);
              h += n_inv(k, j) * w.coupling(l, i) * bracket;
            }
          }
        }
      }
      hess(n2 + i, n2 + ii) = h;
    }
  }
  return hess;
}

}  // namespace opcal
