#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "bilevel/geometry.hpp"
#include "bilevel/linalg.hpp"
#include "bilevel/rng.hpp"

namespace bilevel {

// Problem contract consumed by every solver. The upper variable x lives in the
// feasible set (vector or matrix), the lower variable y in R^m. Only first
// derivatives and the two second-order actions below are ever required:
//   hvp_gyy(x, y, v) = grad_yy g(x, y) * v          (R^m -> R^m)
//   jvp_gyx(x, y, w) = grad_yx g(x, y) * w          (R^m -> upper space)
class BilevelOracle {
 public:
  virtual ~BilevelOracle() = default;

  virtual double upper_value(const SpacePoint& x, const DenseVector& y) const = 0;
  virtual SpacePoint grad_f_x(const SpacePoint& x, const DenseVector& y) const = 0;
  virtual DenseVector grad_f_y(const SpacePoint& x, const DenseVector& y) const = 0;
  virtual DenseVector grad_g_y(const SpacePoint& x, const DenseVector& y) const = 0;
  virtual DenseVector hvp_gyy(const SpacePoint& x, const DenseVector& y,
                              const DenseVector& v) const = 0;
  virtual SpacePoint jvp_gyx(const SpacePoint& x, const DenseVector& y,
                             const DenseVector& w) const = 0;

  virtual std::size_t lower_dim() const = 0;
  virtual Shape upper_shape() const = 0;

  // Closed forms, when the problem has them. Used for metrics only.
  virtual std::optional<DenseVector> inner_argmin(const SpacePoint&) const {
    return std::nullopt;
  }
  virtual std::optional<SpacePoint> true_hypergradient(const SpacePoint&) const {
    return std::nullopt;
  }
};

struct OracleCallCounts {
  std::size_t upper_value = 0;
  std::size_t grad_f_x = 0;
  std::size_t grad_f_y = 0;
  std::size_t grad_g_y = 0;
  std::size_t hvp_gyy = 0;
  std::size_t jvp_gyx = 0;
};

// Counting decorator enforcing the per-iteration oracle budget as a testable
// contract. Single-threaded per run, so plain counters suffice.
class CountingOracle final : public BilevelOracle {
 public:
  explicit CountingOracle(const BilevelOracle& inner) : inner_(&inner) {}

  double upper_value(const SpacePoint& x, const DenseVector& y) const override {
    ++counts_.upper_value;
    return inner_->upper_value(x, y);
  }
  SpacePoint grad_f_x(const SpacePoint& x, const DenseVector& y) const override {
    ++counts_.grad_f_x;
    return inner_->grad_f_x(x, y);
  }
  DenseVector grad_f_y(const SpacePoint& x, const DenseVector& y) const override {
    ++counts_.grad_f_y;
    return inner_->grad_f_y(x, y);
  }
  DenseVector grad_g_y(const SpacePoint& x, const DenseVector& y) const override {
    ++counts_.grad_g_y;
    return inner_->grad_g_y(x, y);
  }
  DenseVector hvp_gyy(const SpacePoint& x, const DenseVector& y,
                      const DenseVector& v) const override {
    ++counts_.hvp_gyy;
    return inner_->hvp_gyy(x, y, v);
  }
  SpacePoint jvp_gyx(const SpacePoint& x, const DenseVector& y,
                     const DenseVector& w) const override {
    ++counts_.jvp_gyx;
    return inner_->jvp_gyx(x, y, w);
  }
  std::size_t lower_dim() const override { return inner_->lower_dim(); }
  Shape upper_shape() const override { return inner_->upper_shape(); }
  std::optional<DenseVector> inner_argmin(const SpacePoint& x) const override {
    return inner_->inner_argmin(x);
  }
  std::optional<SpacePoint> true_hypergradient(const SpacePoint& x) const override {
    return inner_->true_hypergradient(x);
  }

  const OracleCallCounts& counts() const { return counts_; }
  void reset() { counts_ = OracleCallCounts{}; }

 private:
  const BilevelOracle* inner_;
  mutable OracleCallCounts counts_;
};

// ---------------------------------------------------------------------------
// Problem constants. The solver loop needs only mu_g, L_g, D_X; everything
// else feeds diagnostics (gradient-error bound) and the TTSA step sizes.

struct ProblemConstants {
  double mu_g = 0.0;  // strong convexity of g(x, .)
  double L_g = 0.0;   // Lipschitz constant of grad_y g(x, .)
  double D_X = 0.0;   // diameter of the feasible set

  // componentwise Lipschitz/bound constants, when known
  std::optional<double> C_yx_g;  // bound on ||grad_yx g||, also Lipschitz of grad_y g in x
  std::optional<double> L_yy_g;
  std::optional<double> L_yx_g;
  std::optional<double> L_xx_f;
  std::optional<double> L_xy_f;
  std::optional<double> L_yx_f;
  std::optional<double> L_yy_f;
  std::optional<double> C_y_f;  // bound on ||grad_y f(x, y*(x))||

  // derived (filled by derived_lipschitz_bundle)
  std::optional<double> L_y;
  std::optional<double> C_v;
  std::optional<double> L_ell;
  std::optional<double> C_1;
  std::optional<double> C_2;
};

// Fills the derived constants whenever their inputs are present:
//   L_y   = C_yx_g / mu_g
//   C_v   = (L_yx_f + L_yy_f L_y)/mu_g + C_y_f L_yy_g (1 + L_y)/mu_g^2
//   L_ell = L_xx_f + L_xy_f L_y + C_yx_g C_v + (C_y_f/mu_g) L_yx_g (1 + L_y)
//   C_1   = L_yy_g C_y_f / mu_g + L_yy_f
//   C_2   = L_xy_f + L_yx_g C_y_f / mu_g
// Missing inputs leave the corresponding output unset.
inline ProblemConstants derived_lipschitz_bundle(ProblemConstants c) {
  if (c.mu_g <= 0.0) return c;
  if (c.C_yx_g) c.L_y = *c.C_yx_g / c.mu_g;
  if (c.L_yx_f && c.L_yy_f && c.L_y && c.C_y_f && c.L_yy_g) {
    c.C_v = (*c.L_yx_f + *c.L_yy_f * *c.L_y) / c.mu_g +
            (*c.C_y_f * *c.L_yy_g) / (c.mu_g * c.mu_g) * (1.0 + *c.L_y);
  }
  if (c.L_yy_g && c.C_y_f && c.L_yy_f) c.C_1 = *c.L_yy_g * *c.C_y_f / c.mu_g + *c.L_yy_f;
  if (c.L_xy_f && c.L_yx_g && c.C_y_f) c.C_2 = *c.L_xy_f + *c.L_yx_g * *c.C_y_f / c.mu_g;
  if (c.L_xx_f && c.L_xy_f && c.L_y && c.C_yx_g && c.C_v && c.C_y_f && c.L_yx_g) {
    c.L_ell = *c.L_xx_f + *c.L_xy_f * *c.L_y + *c.C_yx_g * *c.C_v +
              (*c.C_y_f / c.mu_g) * *c.L_yx_g * (1.0 + *c.L_y);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Automated oracle validation at sampled points: hvp symmetry and linearity,
// Rayleigh-quotient bounds, and finite-difference consistency of the first
// derivatives. Directional differences keep the cost independent of dimension.

struct OracleCheck {
  std::string name;
  bool passed = true;
  double worst = 0.0;  // worst observed violation / relative error
  double tolerance = 0.0;
};

struct OracleValidation {
  bool all_passed = true;
  std::vector<OracleCheck> checks;
};

inline OracleValidation validate_oracle(const BilevelOracle& oracle, const FeasibleSet& set,
                                        const ProblemConstants& c, std::uint64_t seed,
                                        std::size_t trials) {
  if (trials < 1) throw std::invalid_argument("validate_oracle: trials must be >= 1");
  Rng rng(seed);
  const std::size_t m = oracle.lower_dim();
  const double fd_h = 1e-6;
  const double fd_tol = 1e-4;

  OracleCheck sym{"hvp_symmetry", true, 0.0, 1e-10};
  OracleCheck lin{"hvp_linearity", true, 0.0, 1e-10};
  OracleCheck spec{"hvp_spectral_bounds", true, 0.0, 1e-8};
  OracleCheck gfx{"grad_f_x_consistency", true, 0.0, fd_tol};
  OracleCheck gfy{"grad_f_y_consistency", true, 0.0, fd_tol};
  OracleCheck hfd{"hvp_vs_grad_g_y_fd", true, 0.0, fd_tol};

  const Shape xs = oracle.upper_shape();
  for (std::size_t t = 0; t < trials; ++t) {
    // feasible x by projecting a random point, y unconstrained
    SpacePoint raw;
    raw.shape = xs;
    raw.data.resize(xs.kind == PointKind::matrix ? xs.rows * xs.cols : xs.rows);
    for (auto& v : raw.data) v = rng.normal();
    const SpacePoint x = project(set, raw);
    DenseVector y(m);
    for (auto& v : y) v = rng.normal();

    DenseVector u(m), v(m);
    for (auto& z : u) z = rng.normal();
    for (auto& z : v) z = rng.normal();

    const DenseVector hu = oracle.hvp_gyy(x, y, u);
    const DenseVector hv = oracle.hvp_gyy(x, y, v);

    {  // symmetry: <Hv, u> == <Hu, v>
      const double a = dot(hv, u), b = dot(hu, v);
      const double scale = std::max({std::fabs(a), std::fabs(b), 1.0});
      sym.worst = std::max(sym.worst, std::fabs(a - b) / scale);
    }
    {  // linearity: H(alpha u + v) == alpha Hu + Hv
      const double alpha = 0.5 + rng.uniform();
      const DenseVector huv = oracle.hvp_gyy(x, y, add_scaled(v, alpha, u));
      const DenseVector ref = add_scaled(hv, alpha, hu);
      const double scale = std::max(norm2(ref), 1.0);
      lin.worst = std::max(lin.worst, norm2(add_scaled(huv, -1.0, ref)) / scale);
    }
    {  // Rayleigh quotient within [mu_g, L_g]
      const double q = dot(hv, v) / dot(v, v);
      const double viol = std::max(c.mu_g - q, q - c.L_g) / std::max(c.L_g, 1.0);
      spec.worst = std::max(spec.worst, viol);
    }
    {  // directional FD of f against grad_f_x and grad_f_y
      SpacePoint dx = SpacePoint::zeros_like(x);
      for (auto& z : dx.data) z = rng.normal();
      const double nd = norm(dx);
      for (auto& z : dx.data) z /= nd;
      const double fp = oracle.upper_value(axpy(fd_h, dx, x), y);
      const double fm = oracle.upper_value(axpy(-fd_h, dx, x), y);
      const double fd = (fp - fm) / (2.0 * fd_h);
      const double an = inner(oracle.grad_f_x(x, y), dx);
      gfx.worst = std::max(gfx.worst, std::fabs(fd - an) / std::max(std::fabs(an), 1.0));

      DenseVector dy(m);
      for (auto& z : dy) z = rng.normal();
      const double ndy = norm2(dy);
      for (auto& z : dy) z /= ndy;
      const double gp = oracle.upper_value(x, add_scaled(y, fd_h, dy));
      const double gm = oracle.upper_value(x, add_scaled(y, -fd_h, dy));
      const double fdy = (gp - gm) / (2.0 * fd_h);
      const double any = dot(oracle.grad_f_y(x, y), dy);
      gfy.worst = std::max(gfy.worst, std::fabs(fdy - any) / std::max(std::fabs(any), 1.0));
    }
    {  // hvp against FD of grad_g_y
      DenseVector dy(m);
      for (auto& z : dy) z = rng.normal();
      const double ndy = norm2(dy);
      for (auto& z : dy) z /= ndy;
      const DenseVector gp = oracle.grad_g_y(x, add_scaled(y, fd_h, dy));
      const DenseVector gm = oracle.grad_g_y(x, add_scaled(y, -fd_h, dy));
      DenseVector fd(m);
      for (std::size_t i = 0; i < m; ++i) fd[i] = (gp[i] - gm[i]) / (2.0 * fd_h);
      const DenseVector an = oracle.hvp_gyy(x, y, dy);
      const double scale = std::max(norm2(an), 1.0);
      hfd.worst = std::max(hfd.worst, norm2(add_scaled(fd, -1.0, an)) / scale);
    }
  }

  OracleValidation out;
  for (OracleCheck* ck : {&sym, &lin, &spec, &gfx, &gfy, &hfd}) {
    ck->passed = ck->worst <= ck->tolerance;
    out.all_passed = out.all_passed && ck->passed;
    out.checks.push_back(*ck);
  }
  return out;
}

}  // namespace bilevel
