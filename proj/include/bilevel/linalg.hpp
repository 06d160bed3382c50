#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bilevel/rng.hpp"

namespace bilevel {

using DenseVector = std::vector<double>;

// Row-major dense matrix of 64-bit floats. Desk-scale problems only, so no
// sparse formats and no BLAS bindings.
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

inline double dot(const DenseVector& a, const DenseVector& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const DenseVector& a) { return std::sqrt(dot(a, a)); }

inline DenseVector add_scaled(const DenseVector& a, double alpha, const DenseVector& b) {
  if (a.size() != b.size()) throw std::invalid_argument("add_scaled: size mismatch");
  DenseVector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + alpha * b[i];
  return out;
}

inline DenseVector scaled(double alpha, const DenseVector& a) {
  DenseVector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = alpha * a[i];
  return out;
}

inline DenseVector matvec(const DenseMatrix& m, const DenseVector& x) {
  if (m.cols != x.size()) throw std::invalid_argument("matvec: dimension mismatch");
  DenseVector out(m.rows, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) s += m(i, j) * x[j];
    out[i] = s;
  }
  return out;
}

// m^T x
inline DenseVector matvec_t(const DenseMatrix& m, const DenseVector& x) {
  if (m.rows != x.size()) throw std::invalid_argument("matvec_t: dimension mismatch");
  DenseVector out(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) out[j] += m(i, j) * x[i];
  return out;
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: dimension mismatch");
  DenseMatrix out(a.rows, b.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

inline DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix out(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
  return out;
}

inline double frobenius_norm(const DenseMatrix& a) {
  double s = 0.0;
  for (const double v : a.data) s += v * v;
  return std::sqrt(s);
}

// Solves A z = b by Gaussian elimination with partial pivoting. Used for the
// small dense systems in tests, baselines, and diagnostics.
inline DenseVector solve_dense(DenseMatrix a, DenseVector b) {
  const std::size_t n = a.rows;
  if (a.cols != n || b.size() != n) throw std::invalid_argument("solve_dense: not square");
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t i = col + 1; i < n; ++i)
      if (std::fabs(a(i, col)) > std::fabs(a(piv, col))) piv = i;
    if (std::fabs(a(piv, col)) < 1e-300) throw std::runtime_error("solve_dense: singular system");
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a(piv, j), a(col, j));
      std::swap(b[piv], b[col]);
    }
    for (std::size_t i = col + 1; i < n; ++i) {
      const double f = a(i, col) / a(col, col);
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) a(i, j) -= f * a(col, j);
      b[i] -= f * b[col];
    }
  }
  DenseVector z(n, 0.0);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t j = ii + 1; j < n; ++j) s -= a(ii, j) * z[j];
    z[ii] = s / a(ii, ii);
  }
  return z;
}

// ---------------------------------------------------------------------------
// SpacePoint: the upper-level variable, either a vector or a matrix, carrying
// its shape so mismatched combinations are rejected.

enum class PointKind { vector, matrix };

struct Shape {
  PointKind kind = PointKind::vector;
  std::size_t rows = 0;
  std::size_t cols = 1;
  bool operator==(const Shape&) const = default;
};

struct SpacePoint {
  Shape shape;
  std::vector<double> data;

  SpacePoint() = default;

  static SpacePoint from_vector(DenseVector v) {
    SpacePoint p;
    p.shape = Shape{PointKind::vector, v.size(), 1};
    p.data = std::move(v);
    return p;
  }

  static SpacePoint from_matrix(DenseMatrix m) {
    SpacePoint p;
    p.shape = Shape{PointKind::matrix, m.rows, m.cols};
    p.data = std::move(m.data);
    return p;
  }

  static SpacePoint zeros_like(const SpacePoint& other) {
    SpacePoint p;
    p.shape = other.shape;
    p.data.assign(other.data.size(), 0.0);
    return p;
  }

  bool is_matrix() const { return shape.kind == PointKind::matrix; }
  std::size_t size() const { return data.size(); }

  DenseVector to_vector() const {
    if (is_matrix()) throw std::invalid_argument("SpacePoint: not a vector");
    return data;
  }

  DenseMatrix to_matrix() const {
    if (!is_matrix()) throw std::invalid_argument("SpacePoint: not a matrix");
    DenseMatrix m(shape.rows, shape.cols);
    m.data = data;
    return m;
  }
};

inline void require_same_shape(const SpacePoint& a, const SpacePoint& b, const char* what) {
  if (!(a.shape == b.shape))
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

inline double inner(const SpacePoint& a, const SpacePoint& b) {
  require_same_shape(a, b, "inner");
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

// alpha*a + b
inline SpacePoint axpy(double alpha, const SpacePoint& a, const SpacePoint& b) {
  require_same_shape(a, b, "axpy");
  SpacePoint out;
  out.shape = a.shape;
  out.data.resize(a.data.size());
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = alpha * a.data[i] + b.data[i];
  return out;
}

inline SpacePoint scaled(double alpha, const SpacePoint& a) {
  SpacePoint out;
  out.shape = a.shape;
  out.data.resize(a.data.size());
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = alpha * a.data[i];
  return out;
}

inline double norm(const SpacePoint& a) { return std::sqrt(inner(a, a)); }

inline bool all_finite(const SpacePoint& a) {
  for (const double v : a.data)
    if (!std::isfinite(v)) return false;
  return true;
}

inline bool all_finite(const DenseVector& a) {
  for (const double v : a)
    if (!std::isfinite(v)) return false;
  return true;
}

inline bool all_finite(const DenseMatrix& a) {
  for (const double v : a.data)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Power iteration for the dominant singular triple. Iterates on C^T C through
// matrix-vector products only; the matrix C^T C is never formed.

struct SingularTriple {
  double sigma = 0.0;
  DenseVector u;  // left, unit norm
  DenseVector v;  // right, unit norm
  bool converged = false;
  std::size_t iterations = 0;
};

struct PowerIterOptions {
  double tol = 1e-9;            // relative change of sigma
  std::size_t max_iters = 1000;
  std::uint64_t seed = 0x5DEECE66DULL;
};

inline SingularTriple top_singular_triple(const DenseMatrix& c,
                                          const PowerIterOptions& opt = {}) {
  if (opt.tol <= 0.0) throw std::invalid_argument("top_singular_triple: tol must be positive");
  if (opt.max_iters < 1) throw std::invalid_argument("top_singular_triple: max_iters must be >= 1");
  if (!all_finite(c)) throw std::invalid_argument("top_singular_triple: non-finite entries");

  double fro = 0.0;
  for (const double x : c.data) fro += x * x;
  if (fro == 0.0) throw std::invalid_argument("top_singular_triple: zero matrix");

  Rng rng(opt.seed);
  DenseVector v(c.cols);
  for (auto& x : v) x = rng.normal();
  double vn = norm2(v);
  for (auto& x : v) x /= vn;

  SingularTriple out;
  double sigma_prev = 0.0;
  DenseVector cv;
  for (std::size_t it = 1; it <= opt.max_iters; ++it) {
    cv = matvec(c, v);
    double sigma = norm2(cv);
    if (sigma == 0.0) {
      // start vector fell in the null space; perturb and retry
      for (auto& x : v) x += 1e-3 * rng.normal();
      vn = norm2(v);
      for (auto& x : v) x /= vn;
      continue;
    }
    DenseVector w = matvec_t(c, cv);  // C^T C v, up to the sigma factor
    const double wn = norm2(w);
    for (auto& x : w) x /= wn;
    v = std::move(w);
    out.iterations = it;
    if (it > 1 && std::fabs(sigma - sigma_prev) <= opt.tol * sigma) {
      out.converged = true;
      sigma_prev = sigma;
      break;
    }
    sigma_prev = sigma;
  }

  cv = matvec(c, v);
  out.sigma = norm2(cv);
  out.u = scaled(1.0 / out.sigma, cv);
  out.v = std::move(v);
  return out;
}

// ---------------------------------------------------------------------------
// Central finite differences, used by validation oracles and tests.

template <typename Fn>
SpacePoint finite_diff_grad(Fn&& fn, const SpacePoint& x, double h = 1e-6) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_grad: h must be positive");
  SpacePoint g = SpacePoint::zeros_like(x);
  SpacePoint xp = x;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double xi = x.data[i];
    xp.data[i] = xi + h;
    const double fp = fn(xp);
    xp.data[i] = xi - h;
    const double fm = fn(xp);
    xp.data[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("finite_diff_grad: non-finite value at coordinate " +
                               std::to_string(i));
    g.data[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

template <typename Fn>
DenseVector finite_diff_grad_vec(Fn&& fn, const DenseVector& x, double h = 1e-6) {
  auto wrapped = [&fn](const SpacePoint& p) { return fn(p.data); };
  return finite_diff_grad(wrapped, SpacePoint::from_vector(x), h).data;
}

}  // namespace bilevel
