#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>

#include "bilevel/geometry.hpp"
#include "bilevel/ibcg.hpp"
#include "bilevel/oracle.hpp"
#include "bilevel/rng.hpp"

namespace bilevel {

// ---------------------------------------------------------------------------
// Truncated Neumann-series estimators of [grad_yy g]^{-1} rhs. Both variants
// apply the Hessian-vector product repeatedly and never build a matrix.

// (k/L_g) * prod_{i=1}^{l} (I - (1/L_g) grad_yy g) applied to rhs,
// with truncation length l in {1, ..., k}.
inline DenseVector neumann_apply_sbfw(const BilevelOracle& oracle, const SpacePoint& x,
                                      const DenseVector& y, const DenseVector& rhs,
                                      std::size_t k, double L_g, std::size_t l) {
  if (k < 1) throw std::invalid_argument("neumann_apply_sbfw: k must be >= 1");
  DenseVector z = rhs;
  for (std::size_t i = 0; i < l; ++i) {
    const DenseVector hz = oracle.hvp_gyy(x, y, z);
    for (std::size_t j = 0; j < z.size(); ++j) z[j] -= hz[j] / L_g;
  }
  const double scale = static_cast<double>(k) / L_g;
  for (auto& v : z) v *= scale;
  return z;
}

// (t_max c_h / L_g) * prod_{i=1}^{p} (I - (c_h/L_g) grad_yy g) applied to rhs.
// t_max enters the scalar prefactor as a real number; p is the number of
// Hessian applications.
inline DenseVector neumann_apply_ttsa(const BilevelOracle& oracle, const SpacePoint& x,
                                      const DenseVector& y, const DenseVector& rhs,
                                      double t_max, double c_h, double L_g, std::size_t p) {
  DenseVector z = rhs;
  for (std::size_t i = 0; i < p; ++i) {
    const DenseVector hz = oracle.hvp_gyy(x, y, z);
    for (std::size_t j = 0; j < z.size(); ++j) z[j] -= c_h * hz[j] / L_g;
  }
  const double scale = t_max * c_h / L_g;
  for (auto& v : z) v *= scale;
  return z;
}

inline double ttsa_t_max(std::size_t k, double mu_g, double L_g) {
  return (L_g / mu_g) * std::log(static_cast<double>(k) + 1.0);
}

// Draws the SBFW truncation length l ~ Uniform{1,...,k}.
inline std::size_t draw_sbfw_truncation(Rng& rng, std::size_t k) {
  return static_cast<std::size_t>(rng.uniform_int(1, k));
}

// Draws the TTSA truncation p ~ Uniform{0,...,ceil(t_max)-1}; empty range
// (t_max = 0 at k = 0) yields p = 0, where the zero prefactor takes over.
inline std::size_t draw_ttsa_truncation(Rng& rng, double t_max) {
  const auto hi = static_cast<long long>(std::ceil(t_max)) - 1;
  if (hi < 0) return 0;
  return static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::uint64_t>(hi)));
}

// Exact inverse-Hessian application for the explicit-Hessian SBFW variant:
// materializes grad_yy g through m Hessian-vector products and solves densely.
// Test-scale only.
inline DenseVector exact_inverse_apply(const BilevelOracle& oracle, const SpacePoint& x,
                                       const DenseVector& y, const DenseVector& rhs) {
  const std::size_t m = oracle.lower_dim();
  DenseMatrix h(m, m);
  DenseVector e(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    e[j] = 1.0;
    const DenseVector col = oracle.hvp_gyy(x, y, e);
    for (std::size_t i = 0; i < m; ++i) h(i, j) = col[i];
    e[j] = 0.0;
  }
  return solve_dense(std::move(h), rhs);
}

// ---------------------------------------------------------------------------
// SBFW: momentum-corrected projection-free baseline.
//   y_k  = y_{k-1} - delta_k grad_y g(x_{k-1}, y_{k-1})
//   d_k  = (1 - rho_k)(d_{k-1} - h(x_{k-1}, y_{k-1})) + h(x_k, y_k)
//   s_k  = argmin_{s in X} <s, d_k>,   x_{k+1} = (1 - eta_k) x_k + eta_k s_k
// with rho_k = 2/sqrt(k), eta_k = 2/(k+1)^{3/4}, delta_k = a0/sqrt(k),
// a0 = min{2/(3 mu_g), mu_g/(2 L_g^2)}. rho_k and eta_k are clipped to [0,1]
// (the schedules exceed 1 for the first few k, and eta_k > 1 would leave the
// feasible set). The surrogate h uses the SBFW Neumann estimator, or a dense
// solve in the explicit-Hessian variant.

struct SbfwParams {
  double mu_g = 0.0;
  double L_g = 0.0;
  double delta_scale = 1.0;  // tuning multiplier on delta_k
  double eta_scale = 1.0;    // tuning multiplier on eta_k
  bool exact_hessian = false;
};

struct SbfwState {
  std::size_t k = 1;  // schedule index of the upcoming step
  SpacePoint x;
  DenseVector y;
  SpacePoint d;       // momentum-corrected gradient surrogate
  SpacePoint prev_h;  // h(x_{k-1}, y_{k-1})
};

inline double sbfw_a0(double mu_g, double L_g) {
  return std::min(2.0 / (3.0 * mu_g), mu_g / (2.0 * L_g * L_g));
}

struct SbfwStepInfo {
  std::size_t truncation = 0;  // drawn l (0 for the exact-Hessian variant)
  double gap_practical = 0.0;  // <d_k, x_k - s_k>
};

inline SbfwState sbfw_step(const BilevelOracle& oracle, const FeasibleSet& set,
                           const SbfwState& state, const SbfwParams& params, Rng& trunc_rng,
                           std::uint64_t lmo_seed = 0, SbfwStepInfo* info = nullptr) {
  const std::size_t k = state.k;
  const double kd = static_cast<double>(k);
  const double rho_k = std::min(1.0, 2.0 / std::sqrt(kd));
  const double eta_k =
      std::min(1.0, params.eta_scale * 2.0 / std::pow(kd + 1.0, 0.75));
  const double delta_k = params.delta_scale * sbfw_a0(params.mu_g, params.L_g) / std::sqrt(kd);

  // lower-level step from (x_{k-1}, y_{k-1})
  const DenseVector ggy = oracle.grad_g_y(state.x, state.y);
  DenseVector y_next(state.y.size());
  for (std::size_t i = 0; i < y_next.size(); ++i) y_next[i] = state.y[i] - delta_k * ggy[i];

  // fresh surrogate h(x_k, y_k)
  const DenseVector gfy = oracle.grad_f_y(state.x, y_next);
  DenseVector inv_rhs;
  std::size_t l = 0;
  if (params.exact_hessian) {
    inv_rhs = exact_inverse_apply(oracle, state.x, y_next, gfy);
  } else {
    l = draw_sbfw_truncation(trunc_rng, k);
    inv_rhs = neumann_apply_sbfw(oracle, state.x, y_next, gfy, k, params.L_g, l);
  }
  const SpacePoint h_cur =
      axpy(-1.0, oracle.jvp_gyx(state.x, y_next, inv_rhs), oracle.grad_f_x(state.x, y_next));
  if (!all_finite(h_cur))
    throw SolverError("sbfw_step: non-finite surrogate at k=" + std::to_string(k));

  // momentum correction
  const SpacePoint d_next =
      axpy(1.0, h_cur, scaled(1.0 - rho_k, axpy(-1.0, state.prev_h, state.d)));

  PowerIterOptions popt;
  popt.seed = lmo_seed;
  const SpacePoint s = lmo(set, d_next, popt);
  const double gap = inner(d_next, state.x) - inner(d_next, s);
  SpacePoint x_next = axpy(eta_k, s, scaled(1.0 - eta_k, state.x));

  if (info) {
    info->truncation = l;
    info->gap_practical = gap;
  }

  SbfwState out;
  out.k = k + 1;
  out.x = std::move(x_next);
  out.y = std::move(y_next);
  out.d = d_next;
  out.prev_h = h_cur;
  return out;
}

// Explicit-Hessian SBFW variant (dense solve instead of the Neumann draw).
inline SbfwState sbfw_exact_hessian_step(const BilevelOracle& oracle, const FeasibleSet& set,
                                         const SbfwState& state, SbfwParams params,
                                         Rng& trunc_rng, std::uint64_t lmo_seed = 0,
                                         SbfwStepInfo* info = nullptr) {
  params.exact_hessian = true;
  return sbfw_step(oracle, set, state, params, trunc_rng, lmo_seed, info);
}

// ---------------------------------------------------------------------------
// TTSA: projection-based two-timescale baseline.
//   y_{k+1} = y_k - beta grad_y g(x_k, y_k)
//   x_{k+1} = P_X(x_k - alpha h_k^f)
// with h_k^f built from the TTSA Neumann estimator and, for a horizon K,
//   alpha = min{ mu_g^2/(8 L_y L L_g^2), K^{-3/5}/(4 L_y L) },
//   beta  = min{ mu_g/L_g^2, (2/mu_g) K^{-2/5} },
//   t_max(k) = (L_g/mu_g) log(k+1).

struct TtsaParams {
  double mu_g = 0.0;
  double L_g = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double c_h = 1.0;
};

// L and L_y assembled from the constant bundle:
//   L_y = C_yx_g/mu_g,
//   L   = L_x^f + L_y^f C_yx_g/mu_g + C_y_f (L_yx_g/mu_g + L_yy_g C_yx_g/mu_g^2)
// where the joint constants L_x^f = L_xx_f + L_xy_f and L_y^f = L_yx_f + L_yy_f.
inline TtsaParams resolve_ttsa(const ProblemConstants& c, std::size_t K,
                               double beta_scale = 1.0, double c_h = 1.0) {
  if (!c.C_yx_g || !c.C_y_f || !c.L_yx_g || !c.L_yy_g || !c.L_xx_f || !c.L_xy_f ||
      !c.L_yx_f || !c.L_yy_f)
    throw std::invalid_argument("resolve_ttsa: constant bundle incomplete");
  if (c_h <= 0.0 || c_h > 1.0) throw std::invalid_argument("resolve_ttsa: c_h must lie in (0,1]");

  const double L_y = *c.C_yx_g / c.mu_g;
  const double L_x_f = *c.L_xx_f + *c.L_xy_f;
  const double L_y_f = *c.L_yx_f + *c.L_yy_f;
  const double L = L_x_f + L_y_f * *c.C_yx_g / c.mu_g +
                   *c.C_y_f * (*c.L_yx_g / c.mu_g + *c.L_yy_g * *c.C_yx_g / (c.mu_g * c.mu_g));
  const double kd = static_cast<double>(K);

  TtsaParams p;
  p.mu_g = c.mu_g;
  p.L_g = c.L_g;
  p.c_h = c_h;
  const double ly_l = std::max(L_y * L, 1e-300);
  p.alpha = std::min(c.mu_g * c.mu_g / (8.0 * ly_l * c.L_g * c.L_g),
                     std::pow(kd, -0.6) / (4.0 * ly_l));
  p.beta = beta_scale *
           std::min(c.mu_g / (c.L_g * c.L_g), (2.0 / c.mu_g) * std::pow(kd, -0.4));
  return p;
}

struct TtsaState {
  std::size_t k = 0;
  SpacePoint x;
  DenseVector y;
};

struct TtsaStepInfo {
  std::size_t truncation = 0;  // drawn p
};

inline TtsaState ttsa_step(const BilevelOracle& oracle, const FeasibleSet& set,
                           const TtsaState& state, const TtsaParams& params, Rng& trunc_rng,
                           TtsaStepInfo* info = nullptr) {
  const DenseVector hg = oracle.grad_g_y(state.x, state.y);
  DenseVector y_next(state.y.size());
  for (std::size_t i = 0; i < y_next.size(); ++i)
    y_next[i] = state.y[i] - params.beta * hg[i];

  const double t_max = ttsa_t_max(state.k, params.mu_g, params.L_g);
  const std::size_t p = draw_ttsa_truncation(trunc_rng, t_max);
  const DenseVector gfy = oracle.grad_f_y(state.x, state.y);
  const DenseVector inv_rhs =
      neumann_apply_ttsa(oracle, state.x, state.y, gfy, t_max, params.c_h, params.L_g, p);
  const SpacePoint hf =
      axpy(-1.0, oracle.jvp_gyx(state.x, state.y, inv_rhs), oracle.grad_f_x(state.x, state.y));
  if (!all_finite(hf))
    throw SolverError("ttsa_step: non-finite direction at k=" + std::to_string(state.k));

  const SpacePoint x_next = project(set, axpy(-params.alpha, hf, state.x));

  if (info) info->truncation = p;

  TtsaState out;
  out.k = state.k + 1;
  out.x = x_next;
  out.y = std::move(y_next);
  return out;
}

// ---------------------------------------------------------------------------
// Run loops mirroring run_ibcg, sharing the hook interface through a reduced
// event (baselines have no w iterate; the surrogate direction plays F's role
// for SBFW and is absent for TTSA).

struct BaselineIterationEvent {
  std::size_t k = 0;
  const SpacePoint& x;  // iterate the step started from
  const DenseVector& y;
  std::optional<double> gap_practical;
  std::optional<double> gap_exact;
  double elapsed_s = 0.0;
};

using BaselineHook = std::function<void(const BaselineIterationEvent&)>;

struct BaselineRunResult {
  SpacePoint final_x;
  DenseVector final_y;
  std::size_t steps_taken = 0;
  bool hit_time_limit = false;
};

inline BaselineRunResult run_sbfw(const BilevelOracle& oracle, const FeasibleSet& set,
                                  const SbfwParams& params, SpacePoint x0, DenseVector y0,
                                  const RunControl& ctl, const BaselineHook& hook = {}) {
  SbfwState state;
  state.k = 1;
  state.x = std::move(x0);
  state.y = std::move(y0);
  state.d = SpacePoint::zeros_like(state.x);
  state.prev_h = SpacePoint::zeros_like(state.x);

  Rng trunc_rng(derive_seed(ctl.solver_seed, "sbfw-trunc"));
  BaselineRunResult result;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t k = 0; k < ctl.K; ++k) {
    const std::uint64_t lmo_seed = derive_seed(ctl.solver_seed, "lmo") ^ (k + 1);
    SbfwStepInfo info;
    SbfwState next = sbfw_step(oracle, set, state, params, trunc_rng, lmo_seed, &info);
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (hook) {
      std::optional<double> gap_exact;
      if (ctl.compute_exact_gap) {
        if (const auto grad = oracle.true_hypergradient(state.x))
          gap_exact = fw_gap(set, state.x, *grad);
      }
      const BaselineIterationEvent ev{k, state.x, state.y, info.gap_practical, gap_exact,
                                      elapsed};
      hook(ev);
    }
    state = std::move(next);
    ++result.steps_taken;
    if (elapsed > ctl.time_limit_s) {
      result.hit_time_limit = true;
      break;
    }
  }
  result.final_x = std::move(state.x);
  result.final_y = std::move(state.y);
  return result;
}

inline BaselineRunResult run_ttsa(const BilevelOracle& oracle, const FeasibleSet& set,
                                  const TtsaParams& params, SpacePoint x0, DenseVector y0,
                                  const RunControl& ctl, const BaselineHook& hook = {}) {
  TtsaState state;
  state.k = 0;
  state.x = std::move(x0);
  state.y = std::move(y0);

  Rng trunc_rng(derive_seed(ctl.solver_seed, "ttsa-trunc"));
  BaselineRunResult result;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t k = 0; k < ctl.K; ++k) {
    TtsaState next = ttsa_step(oracle, set, state, params, trunc_rng);
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (hook) {
      std::optional<double> gap_exact;
      if (ctl.compute_exact_gap) {
        if (const auto grad = oracle.true_hypergradient(state.x))
          gap_exact = fw_gap(set, state.x, *grad);
      }
      const BaselineIterationEvent ev{k, state.x, state.y, std::nullopt, gap_exact, elapsed};
      hook(ev);
    }
    state = std::move(next);
    ++result.steps_taken;
    if (elapsed > ctl.time_limit_s) {
      result.hit_time_limit = true;
      break;
    }
  }
  result.final_x = std::move(state.x);
  result.final_y = std::move(state.y);
  return result;
}

}  // namespace bilevel
