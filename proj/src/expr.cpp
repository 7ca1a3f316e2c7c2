#include "opcal/expr.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace opcal {

namespace {

bool is_zero_vec(const Eigen::VectorXd& v) { return (v.array() == 0.0).all(); }

int compare_vec(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) return a.size() < b.size() ? -1 : 1;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (a[i] < b[i]) return -1;
    if (a[i] > b[i]) return 1;
  }
  return 0;
}

int compare_int_vec(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) return a.size() < b.size() ? -1 : 1;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return a[i] < b[i] ? -1 : 1;
  }
  return 0;
}

int compare_tag(const BilinearTag& a, const BilinearTag& b) {
  const int c = compare_vec(a.left, b.left);
  return c != 0 ? c : compare_vec(a.right, b.right);
}

int compare_weighted(const WeightedBilinear& a, const WeightedBilinear& b) {
  int c = compare_vec(a.left, b.left);
  if (c != 0) return c;
  c = compare_vec(a.right, b.right);
  if (c != 0) return c;
  if (a.weight != b.weight) return a.weight < b.weight ? -1 : 1;
  return 0;
}

// left^T D right == right^T D left for symmetric D, so tags are stored with
// the lexicographically smaller vector first.
void canonicalize_term(NormalTerm& t) {
  std::sort(t.b_powers.begin(), t.b_powers.end());
  std::sort(t.c_powers.begin(), t.c_powers.end());
  for (auto& tag : t.scalar_factors) {
    if (compare_vec(tag.left, tag.right) > 0) std::swap(tag.left, tag.right);
  }
  std::sort(t.scalar_factors.begin(), t.scalar_factors.end(),
            [](const BilinearTag& a, const BilinearTag& b) { return compare_tag(a, b) < 0; });

  std::vector<WeightedBilinear> quad;
  for (auto& wb : t.exp_quadratic) {
    if (wb.weight == 0.0 || is_zero_vec(wb.left) || is_zero_vec(wb.right)) continue;
    if (compare_vec(wb.left, wb.right) > 0) std::swap(wb.left, wb.right);
    quad.push_back(std::move(wb));
  }
  std::sort(quad.begin(), quad.end(), [](const WeightedBilinear& a, const WeightedBilinear& b) {
    return compare_weighted(a, b) < 0;
  });
  // fuse summands sharing the same bilinear form
  std::vector<WeightedBilinear> merged;
  for (auto& wb : quad) {
    if (!merged.empty() && compare_vec(merged.back().left, wb.left) == 0 &&
        compare_vec(merged.back().right, wb.right) == 0) {
      merged.back().weight += wb.weight;
    } else {
      merged.push_back(std::move(wb));
    }
  }
  std::erase_if(merged, [](const WeightedBilinear& wb) { return wb.weight == 0.0; });
  t.exp_quadratic = std::move(merged);
}

int compare_term_structure(const NormalTerm& a, const NormalTerm& b) {
  int c = compare_int_vec(a.b_powers, b.b_powers);
  if (c != 0) return c;
  c = compare_vec(a.b_exponent, b.b_exponent);
  if (c != 0) return c;
  c = compare_vec(a.c_exponent, b.c_exponent);
  if (c != 0) return c;
  c = compare_int_vec(a.c_powers, b.c_powers);
  if (c != 0) return c;
  if (a.scalar_factors.size() != b.scalar_factors.size()) {
    return a.scalar_factors.size() < b.scalar_factors.size() ? -1 : 1;
  }
  for (std::size_t i = 0; i < a.scalar_factors.size(); ++i) {
    c = compare_tag(a.scalar_factors[i], b.scalar_factors[i]);
    if (c != 0) return c;
  }
  if (a.exp_quadratic.size() != b.exp_quadratic.size()) {
    return a.exp_quadratic.size() < b.exp_quadratic.size() ? -1 : 1;
  }
  for (std::size_t i = 0; i < a.exp_quadratic.size(); ++i) {
    c = compare_weighted(a.exp_quadratic[i], b.exp_quadratic[i]);
    if (c != 0) return c;
  }
  return 0;
}

std::vector<NormalTerm> canonicalize_terms(std::vector<NormalTerm> terms) {
  for (auto& t : terms) canonicalize_term(t);
  std::sort(terms.begin(), terms.end(), [](const NormalTerm& a, const NormalTerm& b) {
    return compare_term_structure(a, b) < 0;
  });
  std::vector<NormalTerm> merged;
  for (auto& t : terms) {
    if (!merged.empty() && compare_term_structure(merged.back(), t) == 0) {
      merged.back().coeff += t.coeff;
    } else {
      merged.push_back(std::move(t));
    }
  }
  std::erase_if(merged, [](const NormalTerm& t) { return t.coeff == 0.0; });
  return merged;
}

void check_index(const IndexSet& indices, int i) {
  if (i < 0 || i >= indices.dimension) {
    throw std::out_of_range("operator index out of range");
  }
}

void check_vector(const IndexSet& indices, const Eigen::VectorXd& v) {
  if (v.size() != indices.dimension) {
    throw std::invalid_argument("coefficient vector length does not match index set");
  }
}

// Normal-orders the product of two already-normal terms. The annihilation
// content of `ta` (its c-exponential and c-monomial) is commuted through the
// creation content of `tb` (its b-monomial and b-exponential) using
//   c_x b_y        = b_y c_x + D_xy
//   exp(v.c) b_y   = (b_y + (Dv)_y) exp(v.c)
//   c_x exp(u.b)   = exp(u.b) (c_x + (Du)_x)
//   exp(v.c) exp(u.b) = exp(u.b) exp(v.c) exp(v^T D u)
// Every b of tb is either kept, contracted with one c of ta, or absorbed into
// a deferred scalar; every c of ta is kept, contracted, or absorbed likewise.
void emit_pair_products(const NormalTerm& ta, const NormalTerm& tb, int dim,
                        std::vector<NormalTerm>& out) {
  const bool has_v1 = !is_zero_vec(ta.c_exponent);
  const bool has_u2 = !is_zero_vec(tb.b_exponent);

  NormalTerm base;
  base.coeff = ta.coeff * tb.coeff;
  base.b_exponent = ta.b_exponent + tb.b_exponent;
  base.c_exponent = ta.c_exponent + tb.c_exponent;
  base.scalar_factors = ta.scalar_factors;
  base.scalar_factors.insert(base.scalar_factors.end(), tb.scalar_factors.begin(),
                             tb.scalar_factors.end());
  base.exp_quadratic = ta.exp_quadratic;
  base.exp_quadratic.insert(base.exp_quadratic.end(), tb.exp_quadratic.begin(),
                            tb.exp_quadratic.end());
  if (has_v1 && has_u2) {
    base.exp_quadratic.push_back({1.0, ta.c_exponent, tb.b_exponent});
  }

  const std::vector<int>& bs = tb.b_powers;
  const std::vector<int>& cs = ta.c_powers;
  const int n_b = static_cast<int>(bs.size());
  const int n_c = static_cast<int>(cs.size());

  const auto unit = [dim](int i) -> Eigen::VectorXd { return Eigen::VectorXd::Unit(dim, i); };

  const std::uint32_t mask_end = has_v1 ? (1u << n_b) : 1u;
  for (std::uint32_t mask = 0; mask < mask_end; ++mask) {
    NormalTerm stage = base;
    std::vector<int> kept;
    for (int j = 0; j < n_b; ++j) {
      if (mask & (1u << j)) {
        stage.scalar_factors.push_back({unit(bs[j]), ta.c_exponent});
      } else {
        kept.push_back(bs[j]);
      }
    }

    std::vector<bool> used(kept.size(), false);
    std::vector<int> surviving;
    std::function<void(int, NormalTerm)> recurse = [&](int ci, NormalTerm acc) {
      if (ci == n_c) {
        NormalTerm term = std::move(acc);
        term.b_powers = ta.b_powers;
        for (std::size_t j = 0; j < kept.size(); ++j) {
          if (!used[j]) term.b_powers.push_back(kept[j]);
        }
        term.c_powers = surviving;
        term.c_powers.insert(term.c_powers.end(), tb.c_powers.begin(), tb.c_powers.end());
        out.push_back(std::move(term));
        return;
      }
      const int x = cs[ci];
      // survives to the annihilation side
      surviving.push_back(x);
      recurse(ci + 1, acc);
      surviving.pop_back();
      // absorbed while crossing exp(u.b)
      if (has_u2) {
        NormalTerm shifted = acc;
        shifted.scalar_factors.push_back({unit(x), tb.b_exponent});
        recurse(ci + 1, std::move(shifted));
      }
      // contracted with one of the remaining b factors
      for (std::size_t j = 0; j < kept.size(); ++j) {
        if (used[j]) continue;
        used[j] = true;
        NormalTerm contracted = acc;
        contracted.scalar_factors.push_back({unit(x), unit(kept[j])});
        recurse(ci + 1, std::move(contracted));
        used[j] = false;
      }
    };
    recurse(0, std::move(stage));
  }
}

}  // namespace

IndexSet::IndexSet(int n) : dimension(n) {
  if (n < 1) throw std::invalid_argument("IndexSet: dimension must be >= 1");
}

GaussianParams::GaussianParams(Eigen::VectorXd m, Eigen::MatrixXd d)
    : mean(std::move(m)), cov(std::move(d)) {
  if (cov.rows() != mean.size() || cov.cols() != mean.size()) {
    throw std::invalid_argument("GaussianParams: covariance shape does not match mean");
  }
  const double scale = cov.norm();
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + scale)) {
    throw std::invalid_argument("GaussianParams: covariance must be symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() < -1e-10 * scale) {
    throw std::invalid_argument("GaussianParams: covariance must be positive semi-definite");
  }
}

OperatorExpr::OperatorExpr(const IndexSet& indices) : dim_(indices.dimension) {
  if (dim_ < 1) throw std::invalid_argument("OperatorExpr: invalid index set");
}

OperatorExpr::OperatorExpr(const IndexSet& indices, std::vector<NormalTerm> terms)
    : dim_(indices.dimension), terms_(canonicalize_terms(std::move(terms))) {
  if (dim_ < 1) throw std::invalid_argument("OperatorExpr: invalid index set");
}

OperatorExpr& OperatorExpr::operator+=(const OperatorExpr& other) {
  if (dim_ != other.dim_) throw std::invalid_argument("index-set mismatch in addition");
  std::vector<NormalTerm> all = terms_;
  all.insert(all.end(), other.terms_.begin(), other.terms_.end());
  terms_ = canonicalize_terms(std::move(all));
  return *this;
}

OperatorExpr operator+(OperatorExpr a, const OperatorExpr& b) { return a += b; }

OperatorExpr operator*(double factor, OperatorExpr e) {
  std::vector<NormalTerm> terms = e.terms();
  for (auto& t : terms) t.coeff *= factor;
  return OperatorExpr(IndexSet(e.dimension()), std::move(terms));
}

OperatorExpr constant_expr(const IndexSet& indices, double value) {
  if (value == 0.0) return OperatorExpr(indices);
  NormalTerm t;
  t.coeff = value;
  t.b_exponent = Eigen::VectorXd::Zero(indices.dimension);
  t.c_exponent = Eigen::VectorXd::Zero(indices.dimension);
  return OperatorExpr(indices, {std::move(t)});
}

namespace {
NormalTerm blank_term(const IndexSet& indices) {
  NormalTerm t;
  t.b_exponent = Eigen::VectorXd::Zero(indices.dimension);
  t.c_exponent = Eigen::VectorXd::Zero(indices.dimension);
  return t;
}
}  // namespace

OperatorExpr creator(const IndexSet& indices, int i) {
  check_index(indices, i);
  NormalTerm t = blank_term(indices);
  t.b_powers = {i};
  return OperatorExpr(indices, {std::move(t)});
}

OperatorExpr annihilator(const IndexSet& indices, int i) {
  check_index(indices, i);
  NormalTerm t = blank_term(indices);
  t.c_powers = {i};
  return OperatorExpr(indices, {std::move(t)});
}

OperatorExpr exp_creators(const IndexSet& indices, const Eigen::VectorXd& u) {
  check_vector(indices, u);
  NormalTerm t = blank_term(indices);
  t.b_exponent = u;
  return OperatorExpr(indices, {std::move(t)});
}

OperatorExpr exp_annihilators(const IndexSet& indices, const Eigen::VectorXd& v) {
  check_vector(indices, v);
  NormalTerm t = blank_term(indices);
  t.c_exponent = v;
  return OperatorExpr(indices, {std::move(t)});
}

OperatorExpr phi(const IndexSet& indices, int i) {
  return creator(indices, i) + annihilator(indices, i);
}

OperatorExpr exp_phi(const IndexSet& indices, const Eigen::VectorXd& alpha) {
  check_vector(indices, alpha);
  NormalTerm t = blank_term(indices);
  t.b_exponent = alpha;
  t.c_exponent = alpha;
  t.exp_quadratic.push_back({0.5, alpha, alpha});
  return OperatorExpr(indices, {std::move(t)});
}

OperatorExpr multiply(const OperatorExpr& e1, const OperatorExpr& e2) {
  if (e1.dimension() != e2.dimension()) {
    throw std::invalid_argument("index-set mismatch in multiply");
  }
  std::vector<NormalTerm> out;
  for (const auto& ta : e1.terms()) {
    for (const auto& tb : e2.terms()) {
      emit_pair_products(ta, tb, e1.dimension(), out);
    }
  }
  return OperatorExpr(IndexSet(e1.dimension()), std::move(out));
}

OperatorExpr normal_order(const OperatorExpr& e) {
  return OperatorExpr(IndexSet(e.dimension()), e.terms());
}

OperatorExpr moment(const IndexSet& indices, const std::vector<int>& factor_indices) {
  OperatorExpr result = constant_expr(indices, 1.0);
  for (int i : factor_indices) {
    result = multiply(result, phi(indices, i));
  }
  return result;
}

double expectation(const OperatorExpr& e, const GaussianParams& g) {
  if (g.dimension() != e.dimension()) {
    throw std::invalid_argument("expectation: dimension mismatch");
  }
  const Eigen::VectorXd& m = g.mean;
  const Eigen::MatrixXd& d = g.cov;
  double total = 0.0;
  for (const auto& term : e.terms()) {
    if (!term.c_powers.empty()) continue;  // c ... 1 = 0
    double value = term.coeff;
    for (int x : term.b_powers) value *= m[x];
    if (!is_zero_vec(term.b_exponent)) value *= std::exp(term.b_exponent.dot(m));
    for (const auto& tag : term.scalar_factors) {
      value *= tag.left.dot(d * tag.right);
    }
    double quad = 0.0;
    for (const auto& wb : term.exp_quadratic) {
      quad += wb.weight * wb.left.dot(d * wb.right);
    }
    value *= std::exp(quad);
    total += value;
  }
  return total;
}

bool structurally_equal(const OperatorExpr& a, const OperatorExpr& b) {
  if (a.dimension() != b.dimension()) return false;
  const auto& ta = a.terms();
  const auto& tb = b.terms();
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (compare_term_structure(ta[i], tb[i]) != 0) return false;
    if (ta[i].coeff != tb[i].coeff) return false;
  }
  return true;
}

namespace {
std::string vec_str(const Eigen::VectorXd& v) {
  std::ostringstream os;
  os << "(";
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) os << ",";
    os << v[i];
  }
  os << ")";
  return os.str();
}
}  // namespace

std::string to_string(const OperatorExpr& e) {
  if (e.terms().empty()) return "0\n";
  std::ostringstream os;
  for (const auto& t : e.terms()) {
    os << t.coeff;
    for (const auto& tag : t.scalar_factors) {
      os << " * D" << vec_str(tag.left) << vec_str(tag.right);
    }
    if (!t.exp_quadratic.empty()) {
      os << " * exp[";
      for (std::size_t i = 0; i < t.exp_quadratic.size(); ++i) {
        const auto& wb = t.exp_quadratic[i];
        os << (i ? " + " : "") << wb.weight << "*D" << vec_str(wb.left) << vec_str(wb.right);
      }
      os << "]";
    }
    if (!t.b_powers.empty()) {
      os << " * b[";
      for (std::size_t i = 0; i < t.b_powers.size(); ++i) {
        os << (i ? "," : "") << t.b_powers[i];
      }
      os << "]";
    }
    if (!is_zero_vec(t.b_exponent)) os << " * exp" << vec_str(t.b_exponent) << "·b";
    if (!is_zero_vec(t.c_exponent)) os << " * exp" << vec_str(t.c_exponent) << "·c";
    if (!t.c_powers.empty()) {
      os << " * c[";
      for (std::size_t i = 0; i < t.c_powers.size(); ++i) {
        os << (i ? "," : "") << t.c_powers[i];
      }
      os << "]";
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace opcal
