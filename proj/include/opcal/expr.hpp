#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace opcal {

// Finite index set the operator algebra lives on; indices 0..dimension-1
// discretize the field labels.
struct IndexSet {
  int dimension = 0;

  IndexSet() = default;
  explicit IndexSet(int n);
};

// Mean and covariance of the Gaussian the expectation is taken against.
struct GaussianParams {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  GaussianParams() = default;
  GaussianParams(Eigen::VectorXd m, Eigen::MatrixXd d);

  int dimension() const { return static_cast<int>(mean.size()); }
};

// Deferred scalar left^T D right, resolved only when a covariance is supplied.
// Contractions [c_x, b_y] = D_xy carry unit vectors; shifts against
// exponentials carry the exponent vector on one side.
struct BilinearTag {
  Eigen::VectorXd left;
  Eigen::VectorXd right;
};

// One summand of exp(sum_j weight_j * left_j^T D right_j).
struct WeightedBilinear {
  double weight = 0.0;
  Eigen::VectorXd left;
  Eigen::VectorXd right;
};

// A normal-ordered term
//   coeff * prod(tags) * exp(quadratic tags)
//         * b[i1] b[i2] ... * exp(b_exponent . b) * exp(c_exponent . c) * c[j1] ...
// with every creation factor left of every annihilation factor. A zero
// exponent vector means the exponential factor is absent; products of
// exponentials on one side are fused since the operators commute.
struct NormalTerm {
  double coeff = 1.0;
  std::vector<int> b_powers;                    // sorted creation monomial
  Eigen::VectorXd b_exponent;                   // u in exp(u . b)
  Eigen::VectorXd c_exponent;                   // v in exp(v . c)
  std::vector<int> c_powers;                    // sorted annihilation monomial
  std::vector<BilinearTag> scalar_factors;      // multiplicative p^T D q factors
  std::vector<WeightedBilinear> exp_quadratic;  // deferred BCH / swap exponent
};

// Sum of normal-ordered terms over a fixed index set. Immutable value type;
// construction keeps the normal order as an invariant.
class OperatorExpr {
 public:
  explicit OperatorExpr(const IndexSet& indices);
  OperatorExpr(const IndexSet& indices, std::vector<NormalTerm> terms);

  int dimension() const { return dim_; }
  const std::vector<NormalTerm>& terms() const { return terms_; }

  OperatorExpr& operator+=(const OperatorExpr& other);

 private:
  int dim_ = 0;
  std::vector<NormalTerm> terms_;
};

OperatorExpr operator+(OperatorExpr a, const OperatorExpr& b);
OperatorExpr operator*(double factor, OperatorExpr e);

// Constructors for the primitive operators.
OperatorExpr constant_expr(const IndexSet& indices, double value);
OperatorExpr creator(const IndexSet& indices, int i);
OperatorExpr annihilator(const IndexSet& indices, int i);
OperatorExpr exp_creators(const IndexSet& indices, const Eigen::VectorXd& u);
OperatorExpr exp_annihilators(const IndexSet& indices, const Eigen::VectorXd& v);

// phi_i = b_i + c_i, the multiplication-by-s_i operator.
OperatorExpr phi(const IndexSet& indices, int i);

// exp(alpha . phi) split into exp(.5 alpha^T D alpha) exp(alpha.b) exp(alpha.c),
// with the scalar kept symbolic so one expression serves any covariance.
OperatorExpr exp_phi(const IndexSet& indices, const Eigen::VectorXd& alpha);

// Operator product, normal-ordered via the commutation relations.
OperatorExpr multiply(const OperatorExpr& e1, const OperatorExpr& e2);

// Canonicalizes (sorts, merges structurally identical terms, prunes zeros).
// Construction already maintains normal order, so this is idempotent.
OperatorExpr normal_order(const OperatorExpr& e);

// Product of phi factors; expectation gives the Wick pairing sum.
OperatorExpr moment(const IndexSet& indices, const std::vector<int>& factor_indices);

// Gaussian expectation: annihilators vanish on 1, creators evaluate at the
// mean, deferred tags evaluate at the supplied covariance.
double expectation(const OperatorExpr& e, const GaussianParams& g);

// Structural equality after canonicalization (exact, no tolerances).
bool structurally_equal(const OperatorExpr& a, const OperatorExpr& b);

// Debug dump, one term per line. Not a stability contract.
std::string to_string(const OperatorExpr& e);

}  // namespace opcal
