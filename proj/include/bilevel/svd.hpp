#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "bilevel/linalg.hpp"

namespace bilevel {

// Full SVD a = u * diag(sigma) * v^T with sigma sorted descending.
// u is rows x k, v is cols x k with k = min(rows, cols).
struct SvdResult {
  DenseMatrix u;
  DenseVector sigma;
  DenseMatrix v;
};

// One-sided Jacobi SVD. Slow but reliable; adequate for the desk-scale
// matrices this library handles (n <= 250).
inline SvdResult jacobi_svd(const DenseMatrix& a, double tol = 1e-13,
                            std::size_t max_sweeps = 64) {
  if (!all_finite(a)) throw std::invalid_argument("jacobi_svd: non-finite entries");
  const bool transposed = a.rows < a.cols;
  DenseMatrix b = transposed ? transpose(a) : a;
  const std::size_t m = b.rows, n = b.cols;

  DenseMatrix v(n, n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const double bp = b(i, p), bq = b(i, q);
          app += bp * bp;
          aqq += bq * bq;
          apq += bp * bq;
        }
        if (std::fabs(apq) <= tol * std::sqrt(app * aqq) || apq == 0.0) continue;
        rotated = true;
        const double zeta = (aqq - app) / (2.0 * apq);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double cs = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = cs * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double bp = b(i, p), bq = b(i, q);
          b(i, p) = cs * bp - sn * bq;
          b(i, q) = sn * bp + cs * bq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = cs * vp - sn * vq;
          v(i, q) = sn * vp + cs * vq;
        }
      }
    }
    if (!rotated) break;
  }

  DenseVector sigma(n, 0.0);
  DenseMatrix u(m, n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += b(i, j) * b(i, j);
    s = std::sqrt(s);
    sigma[j] = s;
    if (s > 0.0)
      for (std::size_t i = 0; i < m; ++i) u(i, j) = b(i, j) / s;
  }

  // sort by sigma descending
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&sigma](std::size_t i, std::size_t j) { return sigma[i] > sigma[j]; });
  SvdResult out;
  out.sigma.resize(n);
  out.u = DenseMatrix(m, n);
  out.v = DenseMatrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    out.sigma[j] = sigma[src];
    for (std::size_t i = 0; i < m; ++i) out.u(i, j) = u(i, src);
    for (std::size_t i = 0; i < n; ++i) out.v(i, j) = v(i, src);
  }

  if (transposed) std::swap(out.u, out.v);
  return out;
}

inline double nuclear_norm(const DenseMatrix& a) {
  const SvdResult s = jacobi_svd(a);
  double sum = 0.0;
  for (const double x : s.sigma) sum += x;
  return sum;
}

inline double spectral_norm(const DenseMatrix& a) {
  const SvdResult s = jacobi_svd(a);
  return s.sigma.empty() ? 0.0 : s.sigma.front();
}

// Reconstructs u * diag(sigma) * v^T.
inline DenseMatrix svd_reconstruct(const DenseMatrix& u, const DenseVector& sigma,
                                   const DenseMatrix& v) {
  DenseMatrix out(u.rows, v.rows, 0.0);
  for (std::size_t k = 0; k < sigma.size(); ++k) {
    if (sigma[k] == 0.0) continue;
    for (std::size_t i = 0; i < u.rows; ++i) {
      const double us = u(i, k) * sigma[k];
      if (us == 0.0) continue;
      for (std::size_t j = 0; j < v.rows; ++j) out(i, j) += us * v(j, k);
    }
  }
  return out;
}

}  // namespace bilevel
