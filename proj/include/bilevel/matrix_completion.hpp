#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bilevel/oracle.hpp"
#include "bilevel/svd.hpp"

namespace bilevel {

// Matrix completion with denoising over the nuclear-norm ball:
//   min_{||X||_* <= alpha}  f(X, Y) = (1/|Omega|) sum_{Omega} (X_ij - Y_ij)^2
//   s.t. Y in argmin_V  (1/|Omega|) sum_{Omega} (V_ij - M_ij)^2
//                        + lambda1 R_delta(V) + lambda2 ||X - V||_F^2
// with the pseudo-Huber regularizer
//   R_delta(V) = sum_ij delta^2 (sqrt(1 + (V_ij/delta)^2) - 1).
// A single observed set Omega serves both levels. The lower variable is V
// flattened to length n^2; the lower-level Hessian is diagonal, so its
// vector product costs O(n^2).

struct McGenConfig {
  std::size_t n = 50;
  std::size_t r = 5;
  double noise = 0.5;     // noise factor on E = noise (L + L^T)
  double obs_prob = 0.8;  // independent inclusion probability per entry
  std::uint64_t seed = 1;
  double lambda1 = 0.05;
  double lambda2 = 0.05;
  double delta = 0.9;
};

struct MatrixCompletionProblem {
  McGenConfig cfg;
  DenseMatrix m;              // noisy observations M = Xhat + E
  DenseMatrix xhat;           // ground truth, metrics only
  std::vector<std::uint8_t> mask;  // 1 on observed entries, length n^2
  std::size_t omega_count = 0;
  double alpha = 0.0;  // nuclear radius ||Xhat||_*
};

inline MatrixCompletionProblem mc_generate(const McGenConfig& cfg) {
  if (cfg.obs_prob <= 0.0 || cfg.obs_prob > 1.0)
    throw std::invalid_argument("mc_generate: obs_prob must lie in (0,1]");
  if (cfg.r > cfg.n) throw std::invalid_argument("mc_generate: r must be <= n");
  const std::size_t n = cfg.n;

  Rng rng(derive_seed(cfg.seed, "mc-data"));
  DenseMatrix w(n, cfg.r);
  for (auto& v : w.data) v = rng.normal();
  DenseMatrix xhat = matmul(w, transpose(w));

  DenseMatrix l(n, n);
  for (auto& v : l.data) v = rng.normal();
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      m(i, j) = xhat(i, j) + cfg.noise * (l(i, j) + l(j, i));

  std::vector<std::uint8_t> mask(n * n, 0);
  std::size_t count = 0;
  for (auto& bit : mask) {
    if (rng.uniform() < cfg.obs_prob) {
      bit = 1;
      ++count;
    }
  }
  if (count == 0) throw std::runtime_error("mc_generate: empty observation set");

  MatrixCompletionProblem p;
  p.cfg = cfg;
  p.m = std::move(m);
  p.xhat = std::move(xhat);
  p.mask = std::move(mask);
  p.omega_count = count;
  p.alpha = nuclear_norm(p.xhat);
  return p;
}

class McOracle final : public BilevelOracle {
 public:
  explicit McOracle(const MatrixCompletionProblem& p) : p_(&p) {
    const double scale = 2.0 / static_cast<double>(p.omega_count);
    mask_scale_.resize(p.mask.size());
    for (std::size_t i = 0; i < p.mask.size(); ++i)
      mask_scale_[i] = p.mask[i] ? scale : 0.0;
  }

  double upper_value(const SpacePoint& x, const DenseVector& v) const override {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!p_->mask[i]) continue;
      const double d = x.data[i] - v[i];
      s += d * d;
    }
    return s / static_cast<double>(p_->omega_count);
  }

  SpacePoint grad_f_x(const SpacePoint& x, const DenseVector& v) const override {
    const double scale = 2.0 / static_cast<double>(p_->omega_count);
    SpacePoint g = SpacePoint::zeros_like(x);
    for (std::size_t i = 0; i < v.size(); ++i)
      if (p_->mask[i]) g.data[i] = scale * (x.data[i] - v[i]);
    return g;
  }

  DenseVector grad_f_y(const SpacePoint& x, const DenseVector& v) const override {
    const double scale = 2.0 / static_cast<double>(p_->omega_count);
    DenseVector g(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i)
      if (p_->mask[i]) g[i] = -scale * (x.data[i] - v[i]);
    return g;
  }

  double lower_value(const SpacePoint& x, const DenseVector& v) const {
    const double d = p_->cfg.delta;
    double data_term = 0.0, huber = 0.0, couple = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (p_->mask[i]) {
        const double r = v[i] - p_->m.data[i];
        data_term += r * r;
      }
      const double t = v[i] / d;
      huber += d * d * (std::sqrt(1.0 + t * t) - 1.0);
      const double q = x.data[i] - v[i];
      couple += q * q;
    }
    return data_term / static_cast<double>(p_->omega_count) + p_->cfg.lambda1 * huber +
           p_->cfg.lambda2 * couple;
  }

  DenseVector grad_g_y(const SpacePoint& x, const DenseVector& v) const override {
    const double scale = 2.0 / static_cast<double>(p_->omega_count);
    const double d = p_->cfg.delta;
    DenseVector g(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double t = v[i] / d;
      double gi = p_->cfg.lambda1 * v[i] / std::sqrt(1.0 + t * t) -
                  2.0 * p_->cfg.lambda2 * (x.data[i] - v[i]);
      if (p_->mask[i]) gi += scale * (v[i] - p_->m.data[i]);
      g[i] = gi;
    }
    return g;
  }

  DenseVector hvp_gyy(const SpacePoint&, const DenseVector& v,
                      const DenseVector& u) const override {
    const double d = p_->cfg.delta;
    const double l1 = p_->cfg.lambda1;
    const double l2 = 2.0 * p_->cfg.lambda2;
    DenseVector out(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double t = v[i] / d;
      const double s = 1.0 + t * t;
      const double huber2 = 1.0 / (s * std::sqrt(s));  // (1 + t^2)^{-3/2}
      out[i] = (l1 * huber2 + l2 + mask_scale_[i]) * u[i];
    }
    return out;
  }

  SpacePoint jvp_gyx(const SpacePoint& x, const DenseVector&,
                     const DenseVector& w) const override {
    // grad_yx g = -2 lambda2 I
    SpacePoint out;
    out.shape = x.shape;
    out.data.resize(w.size());
    const double c = -2.0 * p_->cfg.lambda2;
    for (std::size_t i = 0; i < w.size(); ++i) out.data[i] = c * w[i];
    return out;
  }

  std::size_t lower_dim() const override { return p_->cfg.n * p_->cfg.n; }
  Shape upper_shape() const override { return {PointKind::matrix, p_->cfg.n, p_->cfg.n}; }

 private:
  const MatrixCompletionProblem* p_;
  std::vector<double> mask_scale_;  // 2/|Omega| on observed entries, else 0
};

// Normalized recovery error over the observed set:
//   sum_Omega (X_ij - Xhat_ij)^2 / sum_Omega Xhat_ij^2.
inline double mc_normalized_error(const MatrixCompletionProblem& p, const DenseMatrix& x) {
  if (p.omega_count == 0) throw std::invalid_argument("mc_normalized_error: empty Omega");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < p.mask.size(); ++i) {
    if (!p.mask[i]) continue;
    const double d = x.data[i] - p.xhat.data[i];
    num += d * d;
    den += p.xhat.data[i] * p.xhat.data[i];
  }
  if (den == 0.0) throw std::runtime_error("mc_normalized_error: zero ground truth on Omega");
  return num / den;
}

// Exact per-entry curvature bounds from the diagonal Hessian: the coupling
// term contributes 2 lambda2 everywhere (the certified mu_g), the data term
// 2/|Omega| on observed entries, and the pseudo-Huber second derivative lies
// in (0, 1].
inline ProblemConstants mc_constants(const MatrixCompletionProblem& p) {
  ProblemConstants c;
  const double inv_omega = 2.0 / static_cast<double>(p.omega_count);
  c.mu_g = 2.0 * p.cfg.lambda2;
  c.L_g = inv_omega + p.cfg.lambda1 + 2.0 * p.cfg.lambda2;
  c.D_X = 2.0 * p.alpha;
  c.C_yx_g = 2.0 * p.cfg.lambda2;
  // Lipschitz constant of the pseudo-Huber second derivative:
  // max |d/dv (1+(v/d)^2)^{-3/2}| = (3/(2 delta)) (4/5)^{5/2}
  c.L_yy_g = p.cfg.lambda1 * 1.5 * std::pow(0.8, 2.5) / p.cfg.delta;
  c.L_yx_g = 0.0;
  c.L_xx_f = inv_omega;
  c.L_xy_f = inv_omega;
  c.L_yx_f = inv_omega;
  c.L_yy_f = inv_omega;
  return derived_lipschitz_bundle(c);
}

// Completes the bundle with a certified C_y_f, needed by the TTSA step sizes.
// The lower-level first-order condition gives, entrywise,
//   2 lambda2 (X - V*) = (2/|Omega|)(V* - M) o mask + lambda1 psi'(V*)
// with |psi'| <= delta, and g(x, V*) <= g(x, 0) bounds ||X - V*||_F, so
//   ||grad_y f(x, y*(x))|| <= (2/|Omega|) ||V* - X||_F
// is computable from the problem data alone. The generic triangle-inequality
// bound through D_X is ~40x looser here and would freeze TTSA's step size.
inline ProblemConstants mc_constants_full(const MatrixCompletionProblem& p) {
  ProblemConstants c = mc_constants(p);
  const double inv_omega = 2.0 / static_cast<double>(p.omega_count);
  double m_omega_sq = 0.0;
  for (std::size_t i = 0; i < p.mask.size(); ++i)
    if (p.mask[i]) m_omega_sq += p.m.data[i] * p.m.data[i];
  const double m_omega = std::sqrt(m_omega_sq);
  // ||X - V*||_F^2 <= g(x, 0)/lambda2 over the ball (||X||_F <= alpha)
  const double xv_gap =
      std::sqrt(m_omega_sq / (static_cast<double>(p.omega_count) * p.cfg.lambda2) +
                p.alpha * p.alpha);
  const double v_bound = p.alpha + xv_gap;
  const double psi_bound = p.cfg.lambda1 * p.cfg.delta * static_cast<double>(p.cfg.n);
  c.C_y_f = inv_omega * (inv_omega * (v_bound + m_omega) + psi_bound) /
            (2.0 * p.cfg.lambda2);
  return derived_lipschitz_bundle(c);
}

inline FeasibleSet mc_feasible_set(const MatrixCompletionProblem& p) {
  return NuclearBall{p.cfg.n, p.cfg.n, p.alpha};
}

// ---------------------------------------------------------------------------
// Replayable on-disk format: structured text header followed by a flat binary
// blob (M, Xhat as native doubles, then the observation mask as bytes).

inline void mc_save(const MatrixCompletionProblem& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("mc_save: cannot open " + path);
  char buf[64];
  out << "bilevel-mc v1\n";
  out << "n " << p.cfg.n << "\n";
  out << "r " << p.cfg.r << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", p.cfg.noise);
  out << "noise " << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", p.cfg.obs_prob);
  out << "obs_prob " << buf << "\n";
  out << "seed " << p.cfg.seed << "\n";
  out << "omega " << p.omega_count << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", p.cfg.lambda1);
  out << "lambda1 " << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", p.cfg.lambda2);
  out << "lambda2 " << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", p.cfg.delta);
  out << "delta " << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", p.alpha);
  out << "alpha " << buf << "\n";
  out << "data\n";
  out.write(reinterpret_cast<const char*>(p.m.data.data()),
            static_cast<std::streamsize>(p.m.data.size() * sizeof(double)));
  out.write(reinterpret_cast<const char*>(p.xhat.data.data()),
            static_cast<std::streamsize>(p.xhat.data.size() * sizeof(double)));
  out.write(reinterpret_cast<const char*>(p.mask.data()),
            static_cast<std::streamsize>(p.mask.size()));
  if (!out) throw std::runtime_error("mc_save: write failure on " + path);
}

inline MatrixCompletionProblem mc_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("mc_load: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "bilevel-mc v1")
    throw std::runtime_error("mc_load: bad magic in " + path);

  MatrixCompletionProblem p;
  while (std::getline(in, line)) {
    if (line == "data") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "n") ls >> p.cfg.n;
    else if (key == "r") ls >> p.cfg.r;
    else if (key == "noise") ls >> p.cfg.noise;
    else if (key == "obs_prob") ls >> p.cfg.obs_prob;
    else if (key == "seed") ls >> p.cfg.seed;
    else if (key == "omega") ls >> p.omega_count;
    else if (key == "lambda1") ls >> p.cfg.lambda1;
    else if (key == "lambda2") ls >> p.cfg.lambda2;
    else if (key == "delta") ls >> p.cfg.delta;
    else if (key == "alpha") ls >> p.alpha;
    else throw std::runtime_error("mc_load: unknown header field '" + key + "'");
    if (!ls) throw std::runtime_error("mc_load: malformed header line '" + line + "'");
  }
  const std::size_t n = p.cfg.n;
  if (n == 0) throw std::runtime_error("mc_load: missing dimension header");
  p.m = DenseMatrix(n, n);
  p.xhat = DenseMatrix(n, n);
  p.mask.assign(n * n, 0);
  in.read(reinterpret_cast<char*>(p.m.data.data()),
          static_cast<std::streamsize>(n * n * sizeof(double)));
  in.read(reinterpret_cast<char*>(p.xhat.data.data()),
          static_cast<std::streamsize>(n * n * sizeof(double)));
  in.read(reinterpret_cast<char*>(p.mask.data()), static_cast<std::streamsize>(n * n));
  if (!in) throw std::runtime_error("mc_load: truncated payload in " + path);
  return p;
}

}  // namespace bilevel
