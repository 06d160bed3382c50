#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bilevel/baselines.hpp"
#include "bilevel/config.hpp"
#include "bilevel/ibcg.hpp"
#include "bilevel/matrix_completion.hpp"
#include "bilevel/toy_coreset.hpp"
#include "bilevel/trace.hpp"

namespace bilevel {

// ---------------------------------------------------------------------------
// Reference optimum of the toy problem, by two independent routes:
//  (a) a conditional-gradient reference run with the exact hypergradient and
//      exact line search, with away steps so the gap certificate reaches
//      1e-10 even when the optimum sits inside a face;
//  (b) enumeration of all 15 faces of the 3-simplex, solving the
//      equality-constrained least-squares problem on each affine hull by a
//      pseudo-inverse and keeping the feasible candidates.

struct ToyOptimum {
  DenseVector lambda_star;
  double f_star = 0.0;
  double route_disagreement = 0.0;  // |fw route - face route|
};

namespace detail {

inline double toy_face_enumeration(const ToyCoresetProblem& p, DenseVector* arg_best) {
  const DenseMatrix& t = p.t_matrix();
  const DenseVector& x0 = p.target();
  double best = std::numeric_limits<double>::infinity();
  DenseVector best_lambda(4, 0.0);

  for (unsigned mask = 1; mask < 16; ++mask) {
    std::vector<std::size_t> support;
    for (std::size_t i = 0; i < 4; ++i)
      if (mask & (1u << i)) support.push_back(i);
    const std::size_t s = support.size();

    DenseVector lambda(4, 0.0);
    if (s == 1) {
      lambda[support[0]] = 1.0;
    } else {
      // lambda = e_{s0} + N z on the affine hull of the face; least squares
      // min ||T N z - (x0 - T e_{s0})||^2 solved through the SVD pseudo-inverse
      DenseMatrix tn(2, s - 1);
      for (std::size_t j = 1; j < s; ++j)
        for (std::size_t i = 0; i < 2; ++i)
          tn(i, j - 1) = t(i, support[j]) - t(i, support[0]);
      DenseVector rhs = {x0[0] - t(0, support[0]), x0[1] - t(1, support[0])};

      const SvdResult svd = jacobi_svd(tn);
      const double cutoff = (svd.sigma.empty() ? 0.0 : svd.sigma.front()) * 1e-12;
      DenseVector z(s - 1, 0.0);
      for (std::size_t k = 0; k < svd.sigma.size(); ++k) {
        if (svd.sigma[k] <= cutoff) continue;
        double uk_rhs = 0.0;
        for (std::size_t i = 0; i < 2 && i < svd.u.rows; ++i) uk_rhs += svd.u(i, k) * rhs[i];
        const double coef = uk_rhs / svd.sigma[k];
        for (std::size_t j = 0; j < s - 1; ++j) z[j] += coef * svd.v(j, k);
      }
      lambda[support[0]] = 1.0;
      for (std::size_t j = 1; j < s; ++j) {
        lambda[support[j]] = z[j - 1];
        lambda[support[0]] -= z[j - 1];
      }
      bool feasible = true;
      for (const std::size_t i : support)
        if (lambda[i] < -1e-9) feasible = false;
      if (!feasible) continue;
      double sum = 0.0;
      for (auto& v : lambda) {
        v = std::max(v, 0.0);
        sum += v;
      }
      for (auto& v : lambda) v /= sum;
    }
    const double val = p.composed_objective(lambda);
    if (val < best) {
      best = val;
      best_lambda = lambda;
    }
  }
  if (arg_best) *arg_best = best_lambda;
  return best;
}

inline double toy_reference_fw(const ToyCoresetProblem& p, DenseVector* arg_best) {
  DenseVector lambda(4, 0.25);
  const DenseMatrix& t = p.t_matrix();
  double best_val = p.composed_objective(lambda);
  DenseVector best_lambda = lambda;

  for (std::size_t it = 0; it < 1000000; ++it) {
    const DenseVector grad = p.hypergradient(lambda);
    std::size_t fw = 0, away = 0;
    bool away_found = false;
    for (std::size_t i = 0; i < 4; ++i) {
      if (grad[i] < grad[fw]) fw = i;
      if (lambda[i] > 1e-16 && (!away_found || grad[i] > grad[away])) {
        away = i;
        away_found = true;
      }
    }
    double gap = 0.0;
    for (std::size_t i = 0; i < 4; ++i) gap += grad[i] * lambda[i];
    gap -= grad[fw];
    if (gap <= 1e-10) break;

    // direction: FW step or away step, whichever has the steeper slope
    DenseVector dir(4, 0.0);
    double gamma_max = 1.0;
    const double slope_fw = grad[fw] - dot(grad, lambda);
    const double slope_away = dot(grad, lambda) - grad[away];
    if (slope_fw <= slope_away || !away_found) {
      for (std::size_t i = 0; i < 4; ++i) dir[i] = -lambda[i];
      dir[fw] += 1.0;
    } else {
      for (std::size_t i = 0; i < 4; ++i) dir[i] = lambda[i];
      dir[away] -= 1.0;
      gamma_max = lambda[away] / (1.0 - lambda[away] + 1e-300);
    }

    // exact line search for the quadratic objective along dir
    const DenseVector td = matvec(t, dir);
    const double curv = dot(td, td);
    const double slope = dot(grad, dir);
    if (slope >= 0.0) break;
    double gamma = gamma_max;
    if (curv > 0.0) gamma = std::clamp(-slope / curv, 0.0, gamma_max);
    for (std::size_t i = 0; i < 4; ++i) lambda[i] += gamma * dir[i];
    for (auto& v : lambda) v = std::max(v, 0.0);

    const double val = p.composed_objective(lambda);
    if (val < best_val) {
      best_val = val;
      best_lambda = lambda;
    }
  }
  if (arg_best) *arg_best = best_lambda;
  return best_val;
}

}  // namespace detail

inline ToyOptimum toy_reference_optimum(const ToyCoresetProblem& p) {
  DenseVector arg_faces, arg_fw;
  const double by_faces = detail::toy_face_enumeration(p, &arg_faces);
  const double by_fw = detail::toy_reference_fw(p, &arg_fw);
  ToyOptimum out;
  out.route_disagreement = std::fabs(by_faces - by_fw);
  if (by_faces <= by_fw) {
    out.f_star = by_faces;
    out.lambda_star = std::move(arg_faces);
  } else {
    out.f_star = by_fw;
    out.lambda_star = std::move(arg_fw);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Empirical rate check: least-squares slope of log(metric) against
// log(K/log K) (convex law) or log(sqrt(K)) (non-convex law). A slope of -1
// is the theoretical decay; -0.8 or steeper passes.

enum class RateLaw { logk_over_k, inv_sqrtk };

struct RateCheckResult {
  double slope = 0.0;
  bool pass = false;
};

inline RateCheckResult rate_check(const std::vector<std::pair<std::size_t, double>>& points,
                                  RateLaw law) {
  if (points.size() < 3) throw std::invalid_argument("rate_check: need at least 3 grid points");
  std::size_t kmin = points.front().first, kmax = points.front().first;
  for (const auto& [k, m] : points) {
    kmin = std::min(kmin, k);
    kmax = std::max(kmax, k);
  }
  if (static_cast<double>(kmax) < 100.0 * static_cast<double>(kmin) - 1e-9)
    throw std::invalid_argument("rate_check: K grid must span at least two decades");

  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  const double n = static_cast<double>(points.size());
  for (const auto& [k, metric] : points) {
    const double kd = static_cast<double>(k);
    const double x = law == RateLaw::logk_over_k ? std::log(kd / std::log(kd))
                                                 : 0.5 * std::log(kd);
    const double y = std::log(std::max(metric, 1e-300));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  RateCheckResult out;
  out.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  out.pass = out.slope <= -0.8;
  return out;
}

// ---------------------------------------------------------------------------
// Experiment runner.

struct RunSummary {
  std::string solver;
  std::size_t steps_taken = 0;
  bool hit_time_limit = false;
  double elapsed_s = 0.0;
  std::uint64_t problem_seed = 0;
  std::size_t k_star = 0;
  double min_gap_practical = std::numeric_limits<double>::infinity();
  std::optional<std::size_t> k_star_exact;
  std::optional<double> min_gap_exact;
  std::optional<double> f_star;
  OracleCallCounts counts;
  std::vector<TraceRecord> records;
  std::string trace_path;
  std::string summary_path;
};

namespace detail {

struct BuiltProblem {
  std::unique_ptr<ToyCoresetProblem> toy;
  std::unique_ptr<MatrixCompletionProblem> mc;
  std::unique_ptr<McOracle> mc_oracle;
  FeasibleSet set = Simplex{4};
  ProblemConstants constants;  // full bundle when the problem supplies one
  std::uint64_t seed_used = 0;

  const BilevelOracle& oracle() const {
    if (toy) return *toy;
    return *mc_oracle;
  }
};

inline BuiltProblem build_problem(const RunConfig& cfg, bool need_full_bundle) {
  BuiltProblem built;
  if (cfg.problem == ProblemKind::toy) {
    built.seed_used =
        cfg.toy.seed != 0 ? cfg.toy.seed : derive_seed(cfg.master_seed, "data");
    built.toy = std::make_unique<ToyCoresetProblem>(
        cfg.toy.fixed_layout ? ToyCoresetProblem::make_fixed(cfg.toy.mu_g, cfg.toy.L_g)
                             : ToyCoresetProblem::make(cfg.toy.mu_g, cfg.toy.L_g,
                                                       built.seed_used, cfg.toy.x_scale));
    built.set = toy_feasible_set();
    built.constants = built.toy->constants();
  } else {
    McGenConfig gen;
    gen.n = cfg.mc.n;
    gen.r = cfg.mc.r;
    gen.noise = cfg.mc.noise;
    gen.obs_prob = cfg.mc.obs_prob;
    gen.seed = cfg.mc.seed != 0 ? cfg.mc.seed : derive_seed(cfg.master_seed, "data");
    gen.lambda1 = cfg.mc.lambda1;
    gen.lambda2 = cfg.mc.lambda2;
    gen.delta = cfg.mc.delta;
    built.seed_used = gen.seed;
    built.mc = std::make_unique<MatrixCompletionProblem>(mc_generate(gen));
    built.mc_oracle = std::make_unique<McOracle>(*built.mc);
    built.set = mc_feasible_set(*built.mc);
    built.constants = need_full_bundle ? mc_constants_full(*built.mc) : mc_constants(*built.mc);
  }
  return built;
}

inline DenseMatrix random_extreme_point(const NuclearBall& ball, Rng& rng) {
  DenseVector u(ball.rows), v(ball.cols);
  for (auto& z : u) z = rng.normal();
  for (auto& z : v) z = rng.normal();
  const double nu = norm2(u), nv = norm2(v);
  DenseMatrix x0(ball.rows, ball.cols);
  for (std::size_t i = 0; i < ball.rows; ++i)
    for (std::size_t j = 0; j < ball.cols; ++j)
      x0(i, j) = ball.radius * (u[i] / nu) * (v[j] / nv);
  return x0;
}

inline SpacePoint default_x0(const FeasibleSet& set) {
  if (const auto* s = std::get_if<Simplex>(&set)) {
    return SpacePoint::from_vector(
        DenseVector(s->dim, 1.0 / static_cast<double>(s->dim)));
  }
  if (const auto* s = std::get_if<NuclearBall>(&set))
    return SpacePoint::from_matrix(DenseMatrix(s->rows, s->cols, 0.0));
  const Shape sh = set_shape(set);
  SpacePoint z;
  z.shape = sh;
  z.data.assign(sh.kind == PointKind::matrix ? sh.rows * sh.cols : sh.rows, 0.0);
  return project(set, z);
}

}  // namespace detail

inline RunSummary run_experiment(const RunConfig& cfg, bool record_walltime = false,
                                 bool write_files = true) {
  cfg.validate();
  const bool need_full_bundle = cfg.solver.kind == SolverKind::ttsa;
  detail::BuiltProblem built = detail::build_problem(cfg, need_full_bundle);
  const BilevelOracle& raw = built.oracle();
  CountingOracle oracle(raw);  // the solver sees only the counting wrapper
  const FeasibleSet& set = built.set;

  SpacePoint x0 = detail::default_x0(set);
  DenseVector y0(raw.lower_dim(), 0.0);
  if (cfg.init_random) {
    Rng rng(derive_seed(cfg.master_seed, "init"));
    if (const auto* ball = std::get_if<NuclearBall>(&set)) {
      // random extreme point alpha * u v^T, the conditional-gradient analog
      // of a random vertex start
      x0 = SpacePoint::from_matrix(detail::random_extreme_point(*ball, rng));
    } else {
      SpacePoint z = SpacePoint::zeros_like(x0);
      for (auto& v : z.data) v = rng.normal();
      x0 = project(set, z);
    }
    for (auto& v : y0) v = rng.normal();
  }

  // toy metrics: reference optimum and closed forms
  std::optional<double> f_star;
  if (built.toy) f_star = toy_reference_optimum(*built.toy).f_star;

  // gradient-error diagnostics (toy + IBCG with the full bundle)
  std::optional<StepSchedule> sched;
  if (cfg.solver.kind == SolverKind::ibcg)
    sched = resolve_schedule(built.constants, cfg.K, cfg.solver.gamma_policy,
                             cfg.solver.gamma_value, cfg.solver.eta_fraction);
  double d0y = 0.0, w0_err = 0.0;
  const bool lemma2_active = built.toy && cfg.solver.kind == SolverKind::ibcg;
  if (lemma2_active) {
    const DenseVector y_star = built.toy->inner_argmin_vec(x0.data);
    d0y = norm2(add_scaled(y0, -1.0, y_star));
    const DenseVector v0 = built.toy->qp_solution(x0.data);
    w0_err = norm2(add_scaled(y0, -1.0, v0));  // w_0 = y_0
  }

  std::vector<TraceRecord> records;
  const auto t_start = std::chrono::steady_clock::now();

  auto record_state = [&](std::size_t k, const SpacePoint& x, const DenseVector& y,
                          std::optional<double> gap_practical, std::optional<double> gap_exact,
                          std::optional<const SpacePoint*> direction, double elapsed) {
    TraceRecord r;
    r.k = k;
    if (record_walltime) r.wall_time_s = elapsed;
    r.upper_value = raw.upper_value(x, y);
    r.fw_gap_practical = gap_practical;
    r.fw_gap_exact = gap_exact;
    r.lower_grad_norm = norm2(raw.grad_g_y(x, y));
    if (built.toy && f_star)
      r.suboptimality = built.toy->composed_objective(x.data) - *f_star;
    if (built.mc) r.normalized_error = mc_normalized_error(*built.mc, x.to_matrix());
    if (lemma2_active && direction && *direction) {
      const SpacePoint grad = *raw.true_hypergradient(x);
      r.lemma2_measured = norm(axpy(-1.0, **direction, grad));
      if (const auto b = lemma2_bound(built.constants, *sched, k, d0y, w0_err))
        r.lemma2_bound = b->bound;
    }
    records.push_back(std::move(r));
  };

  RunControl ctl;
  ctl.K = cfg.K;
  ctl.time_limit_s = cfg.time_limit_s;
  ctl.solver_seed = derive_seed(cfg.master_seed, "solver");
  ctl.compute_exact_gap = built.toy != nullptr;

  RunSummary summary;
  summary.solver = solver_name(cfg.solver.kind);
  summary.problem_seed = built.seed_used;
  summary.f_star = f_star;

  if (cfg.solver.kind == SolverKind::ibcg) {
    const IterationHook hook = [&](const IterationEvent& ev) {
      if (ev.k % cfg.trace_every != 0) return;
      record_state(ev.k, ev.before.x, ev.before.y, ev.gap_practical, ev.gap_exact,
                   &ev.direction, ev.elapsed_s);
    };
    const IbcgRunResult res = run_ibcg(oracle, set, *sched, x0, y0, ctl, hook);
    summary.steps_taken = res.steps_taken;
    summary.hit_time_limit = res.hit_time_limit;
    summary.k_star = res.k_star;
    summary.min_gap_practical = res.min_gap;
    summary.k_star_exact = res.k_star_exact;
    summary.min_gap_exact = res.min_gap_exact;
    std::optional<double> final_exact;
    if (ctl.compute_exact_gap)
      final_exact = fw_gap(set, res.final_state.x, *raw.true_hypergradient(res.final_state.x));
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    record_state(res.steps_taken, res.final_state.x, res.final_state.y, std::nullopt,
                 final_exact, std::nullopt, elapsed);
  } else if (cfg.solver.kind == SolverKind::ttsa) {
    const TtsaParams params =
        resolve_ttsa(built.constants, cfg.K, cfg.solver.beta_scale, cfg.solver.c_h);
    const BaselineHook hook = [&](const BaselineIterationEvent& ev) {
      if (ev.k % cfg.trace_every != 0) return;
      record_state(ev.k, ev.x, ev.y, ev.gap_practical, ev.gap_exact, std::nullopt,
                   ev.elapsed_s);
    };
    const BaselineRunResult res = run_ttsa(oracle, set, params, x0, y0, ctl, hook);
    summary.steps_taken = res.steps_taken;
    summary.hit_time_limit = res.hit_time_limit;
    std::optional<double> final_exact;
    if (ctl.compute_exact_gap)
      final_exact = fw_gap(set, res.final_x, *raw.true_hypergradient(res.final_x));
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    record_state(res.steps_taken, res.final_x, res.final_y, std::nullopt, final_exact,
                 std::nullopt, elapsed);
  } else {
    SbfwParams params;
    params.mu_g = built.constants.mu_g;
    params.L_g = built.constants.L_g;
    params.delta_scale = cfg.solver.delta_scale;
    params.eta_scale = cfg.solver.eta_scale;
    params.exact_hessian = cfg.solver.kind == SolverKind::sbfw_exact_hessian;
    const BaselineHook hook = [&](const BaselineIterationEvent& ev) {
      if (ev.k % cfg.trace_every != 0) return;
      record_state(ev.k, ev.x, ev.y, ev.gap_practical, ev.gap_exact, std::nullopt,
                   ev.elapsed_s);
    };
    const BaselineRunResult res = run_sbfw(oracle, set, params, x0, y0, ctl, hook);
    summary.steps_taken = res.steps_taken;
    summary.hit_time_limit = res.hit_time_limit;
    std::optional<double> final_exact;
    if (ctl.compute_exact_gap)
      final_exact = fw_gap(set, res.final_x, *raw.true_hypergradient(res.final_x));
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    record_state(res.steps_taken, res.final_x, res.final_y, std::nullopt, final_exact,
                 std::nullopt, elapsed);
  }

  summary.elapsed_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  summary.counts = oracle.counts();
  summary.records = std::move(records);

  if (write_files) {
    const std::filesystem::path base(cfg.out);
    if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
    summary.trace_path = cfg.out + ".csv";
    summary.summary_path = cfg.out + ".json";
    write_trace_csv(summary.trace_path, summary.records);

    nlohmann::json j;
    j["schema"] = "bilevel-run-summary v1";
    j["solver"] = summary.solver;
    nlohmann::json prob;
    if (cfg.problem == ProblemKind::toy) {
      prob["kind"] = "toy";
      prob["mu_g"] = cfg.toy.mu_g;
      prob["L_g"] = cfg.toy.L_g;
      prob["layout"] = cfg.toy.fixed_layout ? "fixed" : "random";
      prob["x_scale"] = cfg.toy.x_scale;
    } else {
      prob["kind"] = "matrix-completion";
      prob["n"] = cfg.mc.n;
      prob["r"] = cfg.mc.r;
      prob["noise"] = cfg.mc.noise;
      prob["obs_prob"] = cfg.mc.obs_prob;
      prob["lambda1"] = cfg.mc.lambda1;
      prob["lambda2"] = cfg.mc.lambda2;
      prob["delta"] = cfg.mc.delta;
    }
    prob["seed_used"] = summary.problem_seed;
    j["problem"] = prob;
    nlohmann::json sol;
    sol["gamma_policy"] = gamma_policy_name(cfg.solver.gamma_policy);
    sol["gamma_value"] = cfg.solver.gamma_value;
    sol["eta_fraction"] = cfg.solver.eta_fraction;
    sol["delta_scale"] = cfg.solver.delta_scale;
    sol["eta_scale"] = cfg.solver.eta_scale;
    sol["beta_scale"] = cfg.solver.beta_scale;
    sol["c_h"] = cfg.solver.c_h;
    j["solver_config"] = sol;
    j["master_seed"] = cfg.master_seed;
    j["init_random"] = cfg.init_random;
    j["K"] = cfg.K;
    j["trace_every"] = cfg.trace_every;
    j["time_limit_s"] = cfg.time_limit_s;
    j["steps_taken"] = summary.steps_taken;
    j["hit_time_limit"] = summary.hit_time_limit;
    j["elapsed_s"] = summary.elapsed_s;
    j["k_star"] = summary.k_star;
    if (std::isfinite(summary.min_gap_practical))
      j["min_gap_practical"] = summary.min_gap_practical;
    if (summary.min_gap_exact) {
      j["min_gap_exact"] = *summary.min_gap_exact;
      j["k_star_exact"] = *summary.k_star_exact;
    }
    if (summary.f_star) j["f_star"] = *summary.f_star;
    j["oracle_calls"] = {{"upper_value", summary.counts.upper_value},
                         {"grad_f_x", summary.counts.grad_f_x},
                         {"grad_f_y", summary.counts.grad_f_y},
                         {"grad_g_y", summary.counts.grad_g_y},
                         {"hvp_gyy", summary.counts.hvp_gyy},
                         {"jvp_gyx", summary.counts.jvp_gyx}};
    if (!summary.records.empty()) {
      const TraceRecord& last = summary.records.back();
      nlohmann::json fin;
      fin["k"] = last.k;
      if (last.upper_value) fin["upper_value"] = *last.upper_value;
      if (last.suboptimality) fin["suboptimality"] = *last.suboptimality;
      if (last.lower_grad_norm) fin["lower_grad_norm"] = *last.lower_grad_norm;
      if (last.normalized_error) fin["normalized_error"] = *last.normalized_error;
      if (last.fw_gap_exact) fin["fw_gap_exact"] = *last.fw_gap_exact;
      j["final"] = fin;
    }
    std::ofstream out(summary.summary_path);
    if (!out) throw std::runtime_error("run_experiment: cannot open " + summary.summary_path);
    out << j.dump(2) << '\n';
  }
  return summary;
}

}  // namespace bilevel
