#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "bilevel/runner.hpp"

using namespace bilevel;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string temp_out(const std::string& stem) {
  const auto dir = std::filesystem::temp_directory_path() / "bilevel-harness-tests";
  std::filesystem::create_directories(dir);
  return (dir / stem).string();
}

}  // namespace

TEST_CASE("config parser: round-trip of a full configuration") {
  const std::string text = R"(
# matrix completion run
[problem]
kind = matrix-completion
n = 40
r = 4
noise = 0.25
obs_prob = 0.9
lambda1 = 0.01
lambda2 = 0.02
delta = 1.1
seed = 99

[solver]
name = ttsa
beta_scale = 0.25
c_h = 0.5

[run]
K = 500
time_limit_s = 30
trace_every = 10
out = /tmp/mc-run
master_seed = 777
)";
  const RunConfig cfg = parse_config_text(text);
  CHECK(cfg.problem == ProblemKind::matrix_completion);
  CHECK(cfg.mc.n == 40);
  CHECK(cfg.mc.r == 4);
  CHECK(cfg.mc.noise == 0.25);
  CHECK(cfg.mc.obs_prob == 0.9);
  CHECK(cfg.mc.lambda1 == 0.01);
  CHECK(cfg.mc.lambda2 == 0.02);
  CHECK(cfg.mc.delta == 1.1);
  CHECK(cfg.mc.seed == 99);
  CHECK(cfg.solver.kind == SolverKind::ttsa);
  CHECK(cfg.solver.beta_scale == 0.25);
  CHECK(cfg.solver.c_h == 0.5);
  CHECK(cfg.K == 500);
  CHECK(cfg.time_limit_s == 30.0);
  CHECK(cfg.trace_every == 10);
  CHECK(cfg.out == "/tmp/mc-run");
  CHECK(cfg.master_seed == 777);
}

TEST_CASE("config parser: errors carry location or field identification") {
  CHECK_THROWS_WITH(parse_config_text("[run]\nK 100\n"),
                    Catch::Matchers::ContainsSubstring("line 2"));
  CHECK_THROWS_WITH(parse_config_text("[run]\nK = abc\n"),
                    Catch::Matchers::ContainsSubstring("run.K"));
  CHECK_THROWS_WITH(parse_config_text("[run]\nbogus = 1\n"),
                    Catch::Matchers::ContainsSubstring("bogus"));
  CHECK_THROWS_WITH(parse_config_text("K = 1\n"),
                    Catch::Matchers::ContainsSubstring("section"));
  CHECK_THROWS_AS(parse_config_text("[run]\nK = 0\n"), ConfigError);
}

TEST_CASE("trace CSV: header, exact round-trip, empty cells") {
  std::vector<TraceRecord> records;
  TraceRecord a;
  a.k = 0;
  a.upper_value = 1.0 / 3.0;
  a.lower_grad_norm = 2.0e-17;
  records.push_back(a);
  TraceRecord b;
  b.k = 7;
  b.fw_gap_practical = -0.0;
  b.suboptimality = 1e300;
  b.lemma2_bound = 0.1234567890123456789;
  records.push_back(b);

  const std::string path = temp_out("roundtrip.csv");
  write_trace_csv(path, records);
  const std::vector<TraceRecord> back = read_trace_csv(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0] == records[0]);
  CHECK(back[1] == records[1]);

  const std::string text = slurp(path);
  CHECK(text.rfind(kTraceHeader, 0) == 0);
  // unset metrics must be empty cells, not zeros
  CHECK(text.find(",,") != std::string::npos);
}

TEST_CASE("run_experiment: row-count contract for K = 1") {
  RunConfig cfg;
  cfg.problem = ProblemKind::toy;
  cfg.solver.kind = SolverKind::ibcg;
  cfg.K = 1;
  cfg.trace_every = 1;
  cfg.out = temp_out("rowcount");
  const RunSummary s = run_experiment(cfg);
  REQUIRE(s.records.size() == 2);
  CHECK(s.records[0].k == 0);
  CHECK(s.records[1].k == 1);
  // the k = 0 row carries the gap computed from F_0; the final row has none
  CHECK(s.records[0].fw_gap_practical.has_value());
  CHECK_FALSE(s.records[1].fw_gap_practical.has_value());
}

TEST_CASE("run_experiment: trace_every thins rows but keeps the final iterate") {
  RunConfig cfg;
  cfg.problem = ProblemKind::toy;
  cfg.solver.kind = SolverKind::ibcg;
  cfg.K = 10;
  cfg.trace_every = 4;
  const RunSummary s = run_experiment(cfg, false, false);
  REQUIRE(s.records.size() == 4);  // k = 0, 4, 8 and the final k = 10
  CHECK(s.records[0].k == 0);
  CHECK(s.records[1].k == 4);
  CHECK(s.records[2].k == 8);
  CHECK(s.records[3].k == 10);
}

TEST_CASE("run_experiment: identical configs give byte-identical traces") {
  RunConfig cfg;
  cfg.problem = ProblemKind::toy;
  cfg.solver.kind = SolverKind::sbfw;  // randomized truncations use the seeded stream
  cfg.K = 40;
  cfg.out = temp_out("det-a");
  const RunSummary a = run_experiment(cfg);
  cfg.out = temp_out("det-b");
  const RunSummary b = run_experiment(cfg);
  CHECK(slurp(a.trace_path) == slurp(b.trace_path));
}

TEST_CASE("run_experiment: wall-time column only written on request") {
  RunConfig cfg;
  cfg.problem = ProblemKind::toy;
  cfg.solver.kind = SolverKind::ibcg;
  cfg.K = 5;
  cfg.out = temp_out("walltime-off");
  const RunSummary off = run_experiment(cfg, false);
  for (const auto& r : off.records) CHECK_FALSE(r.wall_time_s.has_value());

  cfg.out = temp_out("walltime-on");
  const RunSummary on = run_experiment(cfg, true);
  REQUIRE(on.records.size() >= 2);
  double prev = -1.0;
  for (const auto& r : on.records) {
    REQUIRE(r.wall_time_s.has_value());
    CHECK(*r.wall_time_s >= prev);  // nondecreasing in k
    prev = *r.wall_time_s;
  }
}

TEST_CASE("run_experiment: toy IBCG oracle budget lands in the summary") {
  RunConfig cfg;
  cfg.problem = ProblemKind::toy;
  cfg.solver.kind = SolverKind::ibcg;
  cfg.K = 64;
  cfg.trace_every = 64;
  const RunSummary s = run_experiment(cfg, false, false);
  CHECK(s.counts.hvp_gyy == 64);
  CHECK(s.counts.jvp_gyx == 64);
  CHECK(s.steps_taken == 64);
}

TEST_CASE("run_experiment: exact FW gap is nonnegative on the toy problem") {
  RunConfig cfg;
  cfg.problem = ProblemKind::toy;
  cfg.solver.kind = SolverKind::ibcg;
  cfg.K = 120;
  const RunSummary s = run_experiment(cfg, false, false);
  for (const auto& r : s.records) {
    REQUIRE(r.fw_gap_exact.has_value());
    CHECK(*r.fw_gap_exact >= -1e-9);
  }
}

TEST_CASE("toy_reference_optimum: two routes agree") {
  for (const std::uint64_t seed : {11ull, 22ull, 33ull, 44ull}) {
    const auto p = ToyCoresetProblem::make(0.8, 2.5, seed);
    const ToyOptimum opt = toy_reference_optimum(p);
    CHECK(opt.route_disagreement <= 1e-9);
    // the reported optimum is feasible
    double sum = 0.0;
    for (const double v : opt.lambda_star) {
      CHECK(v >= -1e-12);
      sum += v;
    }
    CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-9));
  }
}

TEST_CASE("toy_reference_optimum: reachable and vertex-optimal targets") {
  // reachable: A = I and X columns +-5 e_i span a diamond containing the
  // target (2,2), so the composed optimum is exactly zero
  DenseMatrix eye(2, 2);
  eye(0, 0) = eye(1, 1) = 1.0;
  DenseMatrix wide(2, 4);
  wide(0, 0) = 5.0;
  wide(1, 1) = 5.0;
  wide(0, 2) = -5.0;
  wide(1, 3) = -5.0;
  const auto reachable = ToyCoresetProblem::make_custom(eye, wide);
  CHECK(toy_reference_optimum(reachable).f_star <= 1e-12);

  // unreachable fixed layout: the optimum cannot beat the best vertex, and
  // the face route must do at least as well as the 4-point enumeration
  const auto p = ToyCoresetProblem::make_fixed(1.0, 1.0);
  double best_vertex = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < 4; ++i) {
    DenseVector e(4, 0.0);
    e[i] = 1.0;
    best_vertex = std::min(best_vertex, p.composed_objective(e));
  }
  const ToyOptimum opt = toy_reference_optimum(p);
  CHECK(opt.f_star <= best_vertex + 1e-12);
  CHECK(opt.route_disagreement <= 1e-9);
}

TEST_CASE("rate_check: synthetic laws") {
  std::vector<std::pair<std::size_t, double>> exact_law;
  for (const std::size_t k : {100, 1000, 10000})
    exact_law.emplace_back(k, 3.0 * std::log(static_cast<double>(k)) / k);
  const RateCheckResult r = rate_check(exact_law, RateLaw::logk_over_k);
  CHECK_THAT(r.slope, Catch::Matchers::WithinAbs(-1.0, 1e-12));
  CHECK(r.pass);

  std::vector<std::pair<std::size_t, double>> constant;
  for (const std::size_t k : {100, 1000, 10000}) constant.emplace_back(k, 0.7);
  const RateCheckResult rc = rate_check(constant, RateLaw::logk_over_k);
  CHECK_THAT(rc.slope, Catch::Matchers::WithinAbs(0.0, 1e-12));
  CHECK_FALSE(rc.pass);

  std::vector<std::pair<std::size_t, double>> sqrt_law;
  for (const std::size_t k : {100, 1000, 10000})
    sqrt_law.emplace_back(k, 5.0 / std::sqrt(static_cast<double>(k)));
  const RateCheckResult rs = rate_check(sqrt_law, RateLaw::inv_sqrtk);
  CHECK_THAT(rs.slope, Catch::Matchers::WithinAbs(-1.0, 1e-12));
  CHECK(rs.pass);
}

TEST_CASE("rate_check: insufficient grids rejected") {
  CHECK_THROWS_AS(rate_check({{100, 1.0}, {10000, 0.1}}, RateLaw::logk_over_k),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      rate_check({{100, 1.0}, {200, 0.5}, {400, 0.25}}, RateLaw::logk_over_k),
      std::invalid_argument);
}

TEST_CASE("presets: paper settings materialize") {
  const RunConfig fig1 = make_preset("toy-fig1", SolverKind::ibcg);
  CHECK(fig1.problem == ProblemKind::toy);
  CHECK(fig1.K == 100);
  CHECK(fig1.solver.gamma_policy == GammaPolicy::convex_logk);

  const RunConfig mc = make_preset("mc-desk", SolverKind::ibcg);
  CHECK(mc.problem == ProblemKind::matrix_completion);
  CHECK(mc.mc.n == 50);
  CHECK(mc.solver.gamma_policy == GammaPolicy::scaled_sqrtk);
  CHECK(mc.solver.gamma_value == 0.25);  // gamma = 1/(4 sqrt(K))

  const RunConfig sbfw = make_preset("mc-paper", SolverKind::sbfw);
  CHECK(sbfw.mc.n == 250);
  CHECK(sbfw.solver.eta_scale == 0.8);
  const RunConfig ttsa = make_preset("mc-desk", SolverKind::ttsa);
  CHECK(ttsa.solver.beta_scale == 0.25);
  const RunConfig tuned = make_preset("toy-appendixE", SolverKind::sbfw_exact_hessian);
  CHECK(tuned.solver.delta_scale == 5.0);
  CHECK(tuned.solver.eta_scale == 0.1);

  CHECK_THROWS_AS(make_preset("nope", SolverKind::ibcg), ConfigError);
}

TEST_CASE("run_experiment: JSON summary sidecar is written and well-formed") {
  RunConfig cfg;
  cfg.problem = ProblemKind::toy;
  cfg.solver.kind = SolverKind::ibcg;
  cfg.K = 8;
  cfg.out = temp_out("sidecar");
  const RunSummary s = run_experiment(cfg);
  const std::string text = slurp(s.summary_path);
  const nlohmann::json j = nlohmann::json::parse(text);
  CHECK(j["solver"] == "ibcg");
  CHECK(j["K"] == 8);
  CHECK(j["steps_taken"] == 8);
  CHECK(j["oracle_calls"]["hvp_gyy"] == 8);
  CHECK(j.contains("f_star"));
}
