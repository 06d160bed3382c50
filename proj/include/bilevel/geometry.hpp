#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <variant>
#include <vector>

#include "bilevel/linalg.hpp"
#include "bilevel/svd.hpp"

namespace bilevel {

// Feasible sets for the upper-level variable, with exact diameters. The
// solvers only touch them through lmo / project / fw_gap.

struct Simplex {
  std::size_t dim = 0;
};

struct L1Ball {
  std::size_t dim = 0;
  double radius = 1.0;
};

struct Box {
  DenseVector lower;
  DenseVector upper;
};

struct NuclearBall {
  std::size_t rows = 0;
  std::size_t cols = 0;
  double radius = 1.0;
};

using FeasibleSet = std::variant<Simplex, L1Ball, Box, NuclearBall>;

inline Shape set_shape(const FeasibleSet& set) {
  if (const auto* s = std::get_if<Simplex>(&set)) return {PointKind::vector, s->dim, 1};
  if (const auto* s = std::get_if<L1Ball>(&set)) return {PointKind::vector, s->dim, 1};
  if (const auto* s = std::get_if<Box>(&set)) return {PointKind::vector, s->lower.size(), 1};
  const auto& s = std::get<NuclearBall>(set);
  return {PointKind::matrix, s.rows, s.cols};
}

inline double diameter(const FeasibleSet& set) {
  if (std::holds_alternative<Simplex>(set)) return std::sqrt(2.0);
  if (const auto* s = std::get_if<L1Ball>(&set)) return 2.0 * s->radius;
  if (const auto* s = std::get_if<Box>(&set)) {
    double d = 0.0;
    for (std::size_t i = 0; i < s->lower.size(); ++i) {
      const double w = s->upper[i] - s->lower[i];
      d += w * w;
    }
    return std::sqrt(d);
  }
  // Frobenius bound: ||S||_F <= ||S||_* <= radius for every member.
  return 2.0 * std::get<NuclearBall>(set).radius;
}

namespace detail {

// Projection of z onto {x >= 0, sum x = radius} by the sort-and-threshold rule.
inline DenseVector project_simplex_radius(const DenseVector& z, double radius) {
  const std::size_t n = z.size();
  DenseVector sorted = z;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  double cumsum = 0.0, tau = 0.0;
  std::size_t active = 0;
  for (std::size_t j = 0; j < n; ++j) {
    cumsum += sorted[j];
    const double t = (cumsum - radius) / static_cast<double>(j + 1);
    if (sorted[j] - t > 0.0) {
      tau = t;
      active = j + 1;
    }
  }
  (void)active;
  DenseVector out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::max(z[i] - tau, 0.0);
  return out;
}

}  // namespace detail

// Linear minimization oracle: argmin_{s in set} <c, s>. Ties break at the
// smallest index so traces are reproducible.
inline SpacePoint lmo(const FeasibleSet& set, const SpacePoint& c,
                      const PowerIterOptions& power_opt = {}) {
  if (!(c.shape == set_shape(set))) throw std::invalid_argument("lmo: shape mismatch");
  if (!all_finite(c)) throw std::invalid_argument("lmo: non-finite direction");

  if (const auto* s = std::get_if<Simplex>(&set)) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < s->dim; ++i)
      if (c.data[i] < c.data[best]) best = i;
    DenseVector out(s->dim, 0.0);
    out[best] = 1.0;
    return SpacePoint::from_vector(std::move(out));
  }

  if (const auto* s = std::get_if<L1Ball>(&set)) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < s->dim; ++i)
      if (std::fabs(c.data[i]) > std::fabs(c.data[best])) best = i;
    DenseVector out(s->dim, 0.0);
    const double sign = c.data[best] < 0.0 ? -1.0 : 1.0;  // sign(0) treated as +1
    out[best] = -s->radius * sign;
    return SpacePoint::from_vector(std::move(out));
  }

  if (const auto* s = std::get_if<Box>(&set)) {
    DenseVector out(s->lower.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = c.data[i] > 0.0 ? s->lower[i] : s->upper[i];
    return SpacePoint::from_vector(std::move(out));
  }

  const auto& s = std::get<NuclearBall>(set);
  double fro = 0.0;
  for (const double x : c.data) fro += x * x;
  if (fro == 0.0) {
    // zero gradient: any feasible point is optimal; return the zero matrix
    return SpacePoint::from_matrix(DenseMatrix(s.rows, s.cols, 0.0));
  }
  const SingularTriple top = top_singular_triple(c.to_matrix(), power_opt);
  DenseMatrix out(s.rows, s.cols);
  for (std::size_t i = 0; i < s.rows; ++i)
    for (std::size_t j = 0; j < s.cols; ++j)
      out(i, j) = -s.radius * top.u[i] * top.v[j];
  return SpacePoint::from_matrix(std::move(out));
}

// Euclidean projection onto the set.
inline SpacePoint project(const FeasibleSet& set, const SpacePoint& z) {
  if (!(z.shape == set_shape(set))) throw std::invalid_argument("project: shape mismatch");

  if (const auto* s = std::get_if<Simplex>(&set)) {
    (void)s;
    return SpacePoint::from_vector(detail::project_simplex_radius(z.data, 1.0));
  }

  if (const auto* s = std::get_if<L1Ball>(&set)) {
    double l1 = 0.0;
    for (const double v : z.data) l1 += std::fabs(v);
    if (l1 <= s->radius) return z;
    DenseVector absz(z.data.size());
    for (std::size_t i = 0; i < absz.size(); ++i) absz[i] = std::fabs(z.data[i]);
    DenseVector proj = detail::project_simplex_radius(absz, s->radius);
    DenseVector out(absz.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = z.data[i] < 0.0 ? -proj[i] : proj[i];
    return SpacePoint::from_vector(std::move(out));
  }

  if (const auto* s = std::get_if<Box>(&set)) {
    DenseVector out(z.data.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = std::clamp(z.data[i], s->lower[i], s->upper[i]);
    return SpacePoint::from_vector(std::move(out));
  }

  const auto& s = std::get<NuclearBall>(set);
  const SvdResult svd = jacobi_svd(z.to_matrix());
  double sum = 0.0;
  for (const double x : svd.sigma) sum += x;
  if (sum <= s.radius) return z;
  const DenseVector clipped = detail::project_simplex_radius(svd.sigma, s.radius);
  return SpacePoint::from_matrix(svd_reconstruct(svd.u, clipped, svd.v));
}

// Frank-Wolfe gap max_{s in set} <grad, x - s>; nonnegative for feasible x.
inline double fw_gap(const FeasibleSet& set, const SpacePoint& x, const SpacePoint& grad,
                     const PowerIterOptions& power_opt = {}) {
  const SpacePoint s = lmo(set, grad, power_opt);
  return inner(grad, x) - inner(grad, s);
}

}  // namespace bilevel
