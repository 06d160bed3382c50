#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>

#include "bilevel/geometry.hpp"
#include "bilevel/oracle.hpp"

namespace bilevel {

// ---------------------------------------------------------------------------
// Step-size schedule. The lower-level step alpha and the tracking step eta
// are fixed by problem constants; the upper-level step gamma follows one of
// the policies below and stays constant across the run.

enum class GammaPolicy {
  constant,         // user-supplied gamma
  convex_logk,      // gamma = log(K)/K
  nonconvex_sqrtk,  // gamma = 1/sqrt(K)
  scaled_sqrtk,     // gamma = factor/sqrt(K)
};

struct StepSchedule {
  GammaPolicy policy = GammaPolicy::constant;
  double gamma = 0.0;
  double alpha = 0.0;  // 2/(mu_g + L_g)
  double eta = 0.0;    // < (1 - beta)/mu_g
  double beta = 0.0;   // (L_g - mu_g)/(L_g + mu_g)
  double rho = 0.0;    // 1 - eta*mu_g
  std::size_t K = 0;
};

// gamma_value is the constant gamma for GammaPolicy::constant and the scale
// factor for GammaPolicy::scaled_sqrtk; ignored otherwise.
inline StepSchedule resolve_schedule(const ProblemConstants& c, std::size_t K,
                                     GammaPolicy policy, double gamma_value = 1.0,
                                     double eta_fraction = 0.5) {
  if (c.mu_g <= 0.0) throw std::invalid_argument("resolve_schedule: mu_g must be positive");
  if (c.L_g < c.mu_g) throw std::invalid_argument("resolve_schedule: L_g must be >= mu_g");
  if (eta_fraction <= 0.0 || eta_fraction >= 1.0)
    throw std::invalid_argument("resolve_schedule: eta_fraction must lie in (0,1)");
  if (K < 1) throw std::invalid_argument("resolve_schedule: K must be >= 1");

  StepSchedule s;
  s.policy = policy;
  s.K = K;
  s.alpha = 2.0 / (c.mu_g + c.L_g);
  s.beta = (c.L_g - c.mu_g) / (c.L_g + c.mu_g);
  s.eta = eta_fraction * (1.0 - s.beta) / c.mu_g;
  s.rho = 1.0 - s.eta * c.mu_g;

  double gamma = 0.0;
  const double kd = static_cast<double>(K);
  switch (policy) {
    case GammaPolicy::constant:
      gamma = gamma_value;
      if (gamma < 0.0 || gamma > 1.0)
        throw std::invalid_argument("resolve_schedule: constant gamma must lie in [0,1]");
      break;
    case GammaPolicy::convex_logk:
      gamma = std::log(kd) / kd;
      break;
    case GammaPolicy::nonconvex_sqrtk:
      gamma = 1.0 / std::sqrt(kd);
      break;
    case GammaPolicy::scaled_sqrtk:
      gamma = gamma_value / std::sqrt(kd);
      break;
  }
  // auto-resolved policies must land in (0, 1]; K = 1 makes log(K)/K collapse
  if (policy != GammaPolicy::constant) gamma = std::clamp(gamma, 1e-12, 1.0);
  s.gamma = gamma;
  return s;
}

// ---------------------------------------------------------------------------
// IBCG: single-loop nested-approximation conditional gradient. Each step runs
//   w+ <- w - eta (grad_yy g(x,y) w - grad_y f(x,y))
//   F  <- grad_x f(x,y) - grad_yx g(x,y) w+
//   s  <- argmin_{s in X} <F, s>
//   x+ <- (1-gamma) x + gamma s
//   y+ <- y - alpha grad_y g(x+, y)
// costing exactly one Hessian-vector and one cross-Jacobian-vector product.

struct IbcgState {
  std::size_t k = 0;
  SpacePoint x;
  DenseVector y;
  DenseVector w;
  SpacePoint last_F;  // hypergradient surrogate from the most recent step
};

struct SolverError : std::runtime_error {
  explicit SolverError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IbcgStepResult {
  IbcgState state;
  SpacePoint vertex;     // s_k
  double gap_practical;  // <F_k, x_k - s_k>
};

inline IbcgStepResult ibcg_step(const BilevelOracle& oracle, const FeasibleSet& set,
                                const StepSchedule& sched, const IbcgState& state,
                                std::uint64_t lmo_seed = 0) {
  const SpacePoint& x = state.x;
  const DenseVector& y = state.y;

  const DenseVector hvp_w = oracle.hvp_gyy(x, y, state.w);
  const DenseVector gfy = oracle.grad_f_y(x, y);
  DenseVector w_next(state.w.size());
  for (std::size_t i = 0; i < w_next.size(); ++i)
    w_next[i] = state.w[i] - sched.eta * (hvp_w[i] - gfy[i]);

  const SpacePoint f_dir = axpy(-1.0, oracle.jvp_gyx(x, y, w_next), oracle.grad_f_x(x, y));
  if (!all_finite(f_dir))
    throw SolverError("ibcg_step: non-finite hypergradient surrogate at k=" +
                      std::to_string(state.k));

  PowerIterOptions popt;
  popt.seed = lmo_seed;
  const SpacePoint s = lmo(set, f_dir, popt);
  const double gap = inner(f_dir, x) - inner(f_dir, s);

  SpacePoint x_next = axpy(sched.gamma, s, scaled(1.0 - sched.gamma, x));
  const DenseVector ggy = oracle.grad_g_y(x_next, y);
  DenseVector y_next(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) y_next[i] = y[i] - sched.alpha * ggy[i];

  IbcgStepResult out;
  out.state.k = state.k + 1;
  out.state.x = std::move(x_next);
  out.state.y = std::move(y_next);
  out.state.w = std::move(w_next);
  out.state.last_F = f_dir;
  out.vertex = s;
  out.gap_practical = gap;
  return out;
}

// Per-iteration hook payload. `before` is the iterate the step started from
// (x_k, y_k); `after` carries w_{k+1} and the advanced iterates. F is the
// direction computed at x_k.
struct IterationEvent {
  std::size_t k = 0;
  const IbcgState& before;
  const IbcgState& after;
  const SpacePoint& direction;
  const SpacePoint& vertex;
  double gap_practical = 0.0;
  std::optional<double> gap_exact;  // with the true hypergradient, when exposed
  double elapsed_s = 0.0;
};

using IterationHook = std::function<void(const IterationEvent&)>;

struct RunControl {
  std::size_t K = 0;
  double time_limit_s = std::numeric_limits<double>::infinity();
  std::uint64_t solver_seed = 0;
  bool compute_exact_gap = true;  // only takes effect when the oracle has a closed form
};

struct IbcgRunResult {
  IbcgState final_state;
  std::size_t steps_taken = 0;
  bool hit_time_limit = false;
  // iterate achieving the minimal practical gap over the run, and the
  // exact-gap variant when the true hypergradient is available
  std::size_t k_star = 0;
  double min_gap = std::numeric_limits<double>::infinity();
  std::optional<std::size_t> k_star_exact;
  std::optional<double> min_gap_exact;
};

inline IbcgRunResult run_ibcg(const BilevelOracle& oracle, const FeasibleSet& set,
                              const StepSchedule& sched, SpacePoint x0, DenseVector y0,
                              const RunControl& ctl, const IterationHook& hook = {}) {
  IbcgState state;
  state.k = 0;
  state.x = std::move(x0);
  state.y = std::move(y0);
  state.w = state.y;  // w_0 <- y_0

  IbcgRunResult result;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t k = 0; k < ctl.K; ++k) {
    const std::uint64_t lmo_seed = derive_seed(ctl.solver_seed, "lmo") ^ (k + 1);
    IbcgStepResult step = ibcg_step(oracle, set, sched, state, lmo_seed);

    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::optional<double> gap_exact;
    if (ctl.compute_exact_gap) {
      if (const auto grad = oracle.true_hypergradient(state.x)) {
        gap_exact = fw_gap(set, state.x, *grad);
        if (!result.min_gap_exact || *gap_exact < *result.min_gap_exact) {
          result.min_gap_exact = gap_exact;
          result.k_star_exact = k;
        }
      }
    }
    if (step.gap_practical < result.min_gap) {
      result.min_gap = step.gap_practical;
      result.k_star = k;
    }

    if (hook) {
      const IterationEvent ev{k,           state,
                              step.state,  step.state.last_F,
                              step.vertex, step.gap_practical,
                              gap_exact,   elapsed};
      hook(ev);
    }

    state = std::move(step.state);
    ++result.steps_taken;
    if (elapsed > ctl.time_limit_s) {
      result.hit_time_limit = true;
      break;
    }
  }
  result.final_state = std::move(state);
  return result;
}

// ---------------------------------------------------------------------------
// Gradient-error bound: with constant gamma, eta < (1-beta)/mu_g and
// alpha = 2/(mu_g+L_g), for every k
//   ||grad ell(x_k) - F_k|| <= C_2 (beta^k D0y + gamma beta L_y D_X/(1-beta))
//     + C_yx_g ( rho^{k+1} w0_err + gamma rho C_v D_X/(1-rho)
//                + eta C_1 rho^{k+2} D0y/(rho-beta)
//                + gamma eta beta C_1 L_y D_X/((1-rho)(1-beta)) ).
// Diagnostic only; the solver never needs it. Returns nullopt when the
// constant bundle is incomplete.

struct Lemma2Eval {
  double bound = 0.0;
  bool denominator_clamped = false;  // rho - beta hit the guard
};

inline std::optional<Lemma2Eval> lemma2_bound(const ProblemConstants& c,
                                              const StepSchedule& s, std::size_t k,
                                              double d0y, double w0_err) {
  if (!c.C_yx_g || !c.L_y || !c.C_v || !c.C_1 || !c.C_2) return std::nullopt;
  if (c.D_X <= 0.0) return std::nullopt;

  const double beta = s.beta, rho = s.rho, gamma = s.gamma, eta = s.eta;
  const double beta_k = std::pow(beta, static_cast<double>(k));
  const double rho_k1 = std::pow(rho, static_cast<double>(k + 1));

  Lemma2Eval ev;
  double denom = rho - beta;
  if (denom < 1e-12) {  // schedule resolver guarantees rho > beta; guard manual overrides
    denom = 1e-12;
    ev.denominator_clamped = true;
  }

  const double tracking_y =
      *c.C_2 * (beta_k * d0y + gamma * beta * *c.L_y * c.D_X / (1.0 - beta));
  const double tracking_w =
      *c.C_yx_g * (rho_k1 * w0_err + gamma * rho * *c.C_v * c.D_X / (1.0 - rho) +
                   eta * *c.C_1 * rho_k1 * rho * d0y / denom +
                   gamma * eta * beta * *c.C_1 * *c.L_y * c.D_X /
                       ((1.0 - rho) * (1.0 - beta)));
  ev.bound = tracking_y + tracking_w;
  return ev;
}

}  // namespace bilevel
