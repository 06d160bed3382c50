#pragma once

#include <cmath>
#include <cstdint>
#include <optional>

#include "bilevel/oracle.hpp"
#include "bilevel/svd.hpp"

namespace bilevel {

// Coreset-style toy problem on the 3-simplex:
//   min_{lambda in Delta_4}  f(lambda, theta) = 1/2 ||theta(lambda) - x0||^2
//   s.t. theta(lambda) in argmin_theta 1/2 ||A theta - X lambda||^2
// A is 2x2 full rank, X is 2x4, x0 = (2, 2). A is built as Q diag(sqrt(mu_g),
// sqrt(L_g)) P^T so the lower-level Hessian A^T A has spectrum {mu_g, L_g}
// exactly. Closed forms for the inner argmin and the hypergradient make this
// the ground-truth problem for every solver diagnostic.
class ToyCoresetProblem final : public BilevelOracle {
 public:
  // Seeded random rotations Q, P and random anchor columns, normalized to
  // spectral norm x_scale so the composed curvature stays comparable across
  // seeds (it scales with ||X||^2 / mu_g).
  static ToyCoresetProblem make(double mu_g, double L_g, std::uint64_t seed,
                                double x_scale = 1.0) {
    Rng rng(derive_seed(seed, "toy-data"));
    const double qa = rng.uniform() * 6.283185307179586;
    const double pa = rng.uniform() * 6.283185307179586;
    DenseMatrix x(2, 4);
    for (auto& v : x.data) v = rng.normal();
    const double sn = spectral_norm(x) / x_scale;
    for (auto& v : x.data) v /= sn;
    return ToyCoresetProblem(mu_g, L_g, rotation(qa), rotation(pa), std::move(x));
  }

  // Deterministic layout for unit tests: Q = P = I, published X.
  static ToyCoresetProblem make_fixed(double mu_g, double L_g) {
    DenseMatrix x(2, 4);
    x(0, 0) = 1.0;
    x(1, 1) = 1.0;
    x(0, 2) = -1.0;
    x(1, 3) = -1.0;
    return ToyCoresetProblem(mu_g, L_g, rotation(0.0), rotation(0.0), std::move(x));
  }

  // Explicit map and anchors; the curvature constants come from the spectrum
  // of A^T A.
  static ToyCoresetProblem make_custom(const DenseMatrix& a, DenseMatrix x) {
    const SvdResult s = jacobi_svd(a);
    const double smin = s.sigma.back(), smax = s.sigma.front();
    ToyCoresetProblem p(smin * smin, smax * smax, rotation(0.0), rotation(0.0), std::move(x));
    p.a_ = a;
    p.ata_ = matmul(transpose(a), a);
    p.ata_inv_ = inverse2x2(p.ata_);
    p.atx_ = matmul(transpose(p.a_), p.x_);
    p.t_ = matmul(p.ata_inv_, p.atx_);
    return p;
  }

  double upper_value(const SpacePoint&, const DenseVector& theta) const override {
    double s = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
      const double d = theta[i] - x0_[i];
      s += d * d;
    }
    return 0.5 * s;
  }

  SpacePoint grad_f_x(const SpacePoint&, const DenseVector&) const override {
    return SpacePoint::from_vector(DenseVector(4, 0.0));
  }

  DenseVector grad_f_y(const SpacePoint&, const DenseVector& theta) const override {
    return {theta[0] - x0_[0], theta[1] - x0_[1]};
  }

  DenseVector grad_g_y(const SpacePoint& lambda, const DenseVector& theta) const override {
    // A^T (A theta - X lambda)
    const DenseVector residual =
        add_scaled(matvec(a_, theta), -1.0, matvec(x_, lambda.data));
    return matvec_t(a_, residual);
  }

  DenseVector hvp_gyy(const SpacePoint&, const DenseVector&,
                      const DenseVector& v) const override {
    return matvec(ata_, v);
  }

  SpacePoint jvp_gyx(const SpacePoint&, const DenseVector&,
                     const DenseVector& w) const override {
    // grad_yx g = -X^T A, acting on w in R^2
    return SpacePoint::from_vector(scaled(-1.0, matvec_t(atx_, w)));
  }

  std::size_t lower_dim() const override { return 2; }
  Shape upper_shape() const override { return {PointKind::vector, 4, 1}; }

  std::optional<DenseVector> inner_argmin(const SpacePoint& lambda) const override {
    return inner_argmin_vec(lambda.data);
  }

  std::optional<SpacePoint> true_hypergradient(const SpacePoint& lambda) const override {
    return SpacePoint::from_vector(hypergradient(lambda.data));
  }

  // theta*(lambda) = (A^T A)^{-1} A^T X lambda
  DenseVector inner_argmin_vec(const DenseVector& lambda) const {
    return matvec(t_, lambda);
  }

  // grad ell(lambda) = X^T A (A^T A)^{-1} (theta*(lambda) - x0)
  DenseVector hypergradient(const DenseVector& lambda) const {
    const DenseVector theta = inner_argmin_vec(lambda);
    const DenseVector shifted = {theta[0] - x0_[0], theta[1] - x0_[1]};
    return matvec_t(t_, shifted);
  }

  // ell(lambda) = f(lambda, theta*(lambda))
  double composed_objective(const DenseVector& lambda) const {
    const DenseVector theta = inner_argmin_vec(lambda);
    const double d0 = theta[0] - x0_[0], d1 = theta[1] - x0_[1];
    return 0.5 * (d0 * d0 + d1 * d1);
  }

  double lower_value(const DenseVector& lambda, const DenseVector& theta) const {
    const DenseVector residual = add_scaled(matvec(a_, theta), -1.0, matvec(x_, lambda));
    return 0.5 * dot(residual, residual);
  }

  // v(lambda) = (A^T A)^{-1} grad_y f(lambda, theta*(lambda))
  DenseVector qp_solution(const DenseVector& lambda) const {
    const DenseVector theta = inner_argmin_vec(lambda);
    return matvec(ata_inv_, DenseVector{theta[0] - x0_[0], theta[1] - x0_[1]});
  }

  // Full constant bundle. C_y_f is the exact maximum of ||theta*(.) - x0||
  // over the simplex (a convex function, so the max sits at a vertex).
  ProblemConstants constants() const {
    ProblemConstants c;
    c.mu_g = mu_g_;
    c.L_g = L_g_;
    c.D_X = std::sqrt(2.0);
    c.C_yx_g = spectral_norm(atx_);
    c.L_yy_g = 0.0;
    c.L_yx_g = 0.0;
    c.L_xx_f = 0.0;
    c.L_xy_f = 0.0;
    c.L_yx_f = 0.0;
    c.L_yy_f = 1.0;
    double cyf = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      const double d0 = t_(0, j) - x0_[0], d1 = t_(1, j) - x0_[1];
      cyf = std::max(cyf, std::sqrt(d0 * d0 + d1 * d1));
    }
    c.C_y_f = cyf;
    return derived_lipschitz_bundle(c);
  }

  const DenseMatrix& a() const { return a_; }
  const DenseMatrix& x() const { return x_; }
  const DenseMatrix& ata() const { return ata_; }
  const DenseMatrix& t_matrix() const { return t_; }
  const DenseVector& target() const { return x0_; }
  double mu_g() const { return mu_g_; }
  double L_g() const { return L_g_; }

 private:
  ToyCoresetProblem(double mu_g, double L_g, DenseMatrix q, DenseMatrix p, DenseMatrix x)
      : mu_g_(mu_g), L_g_(L_g), x_(std::move(x)), x0_{2.0, 2.0} {
    DenseMatrix d(2, 2);
    d(0, 0) = std::sqrt(mu_g);
    d(1, 1) = std::sqrt(L_g);
    a_ = matmul(matmul(q, d), transpose(p));
    ata_ = matmul(transpose(a_), a_);
    ata_inv_ = inverse2x2(ata_);
    atx_ = matmul(transpose(a_), x_);
    t_ = matmul(ata_inv_, atx_);
  }

  static DenseMatrix rotation(double angle) {
    DenseMatrix r(2, 2);
    r(0, 0) = std::cos(angle);
    r(0, 1) = -std::sin(angle);
    r(1, 0) = std::sin(angle);
    r(1, 1) = std::cos(angle);
    return r;
  }

  static DenseMatrix inverse2x2(const DenseMatrix& m) {
    const double det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
    DenseMatrix inv(2, 2);
    inv(0, 0) = m(1, 1) / det;
    inv(0, 1) = -m(0, 1) / det;
    inv(1, 0) = -m(1, 0) / det;
    inv(1, 1) = m(0, 0) / det;
    return inv;
  }

  double mu_g_;
  double L_g_;
  DenseMatrix a_;        // 2x2 linear map
  DenseMatrix x_;        // 2x4 anchor points
  DenseVector x0_;       // target
  DenseMatrix ata_;      // A^T A
  DenseMatrix ata_inv_;  // (A^T A)^{-1}
  DenseMatrix atx_;      // A^T X
  DenseMatrix t_;        // (A^T A)^{-1} A^T X, so theta*(lambda) = T lambda
};

inline FeasibleSet toy_feasible_set() { return Simplex{4}; }

}  // namespace bilevel
