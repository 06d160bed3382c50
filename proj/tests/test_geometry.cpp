#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "bilevel/geometry.hpp"
#include "bilevel/rng.hpp"
#include "bilevel/svd.hpp"

using namespace bilevel;

namespace {

SpacePoint random_vec(Rng& rng, std::size_t n) {
  DenseVector v(n);
  for (auto& x : v) x = rng.normal();
  return SpacePoint::from_vector(std::move(v));
}

// brute-force linear minimization over the vertex list
double brute_force_min(const std::vector<DenseVector>& vertices, const SpacePoint& c) {
  double best = std::numeric_limits<double>::infinity();
  for (const DenseVector& v : vertices)
    best = std::min(best, inner(c, SpacePoint::from_vector(v)));
  return best;
}

std::vector<DenseVector> simplex_vertices(std::size_t n) {
  std::vector<DenseVector> out;
  for (std::size_t i = 0; i < n; ++i) {
    DenseVector v(n, 0.0);
    v[i] = 1.0;
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<DenseVector> l1_vertices(std::size_t n, double r) {
  std::vector<DenseVector> out;
  for (std::size_t i = 0; i < n; ++i)
    for (const double s : {r, -r}) {
      DenseVector v(n, 0.0);
      v[i] = s;
      out.push_back(std::move(v));
    }
  return out;
}

// QP oracle for the simplex projection: enumerate active sets (faces), solve
// the equality-constrained projection on each, keep the feasible best
DenseVector simplex_projection_by_enumeration(const DenseVector& z) {
  const std::size_t n = z.size();
  double best = std::numeric_limits<double>::infinity();
  DenseVector best_x(n, 0.0);
  for (unsigned mask = 1; mask < (1u << n); ++mask) {
    std::vector<std::size_t> support;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (1u << i)) support.push_back(i);
    // projection onto {x_S free, sum = 1}: x_i = z_i - (sum_S z - 1)/|S|
    double sum = 0.0;
    for (const std::size_t i : support) sum += z[i];
    const double shift = (sum - 1.0) / static_cast<double>(support.size());
    DenseVector x(n, 0.0);
    bool feasible = true;
    for (const std::size_t i : support) {
      x[i] = z[i] - shift;
      if (x[i] < -1e-12) feasible = false;
    }
    if (!feasible) continue;
    double dist = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = x[i] - z[i];
      dist += d * d;
    }
    if (dist < best) {
      best = dist;
      best_x = x;
    }
  }
  return best_x;
}

}  // namespace

TEST_CASE("diameter matches each variant") {
  CHECK(diameter(Simplex{4}) == std::sqrt(2.0));
  CHECK(diameter(L1Ball{3, 2.0}) == 4.0);
  CHECK(diameter(Box{{0.0, 0.0}, {3.0, 4.0}}) == 5.0);
  CHECK(diameter(NuclearBall{5, 5, 7.0}) == 14.0);
}

TEST_CASE("lmo: fixed examples") {
  const FeasibleSet simplex = Simplex{3};
  CHECK(lmo(simplex, SpacePoint::from_vector({3.0, 1.0, 2.0})).data ==
        DenseVector{0.0, 1.0, 0.0});

  const FeasibleSet l1 = L1Ball{3, 2.0};
  CHECK(lmo(l1, SpacePoint::from_vector({1.0, -4.0, 2.0})).data ==
        DenseVector{0.0, 2.0, 0.0});

  const FeasibleSet box = Box{{-1.0, -1.0}, {2.0, 2.0}};
  CHECK(lmo(box, SpacePoint::from_vector({1.0, -1.0})).data == DenseVector{-1.0, 2.0});

  DenseMatrix c(2, 2);
  c(0, 0) = 2.0;
  c(1, 1) = 1.0;
  const FeasibleSet ball = NuclearBall{2, 2, 1.5};
  // tight sigma tolerance: the singular vector converges linearly while
  // sigma converges quadratically
  const SpacePoint s = lmo(ball, SpacePoint::from_matrix(c), {1e-14, 5000, 3});
  CHECK_THAT(s.data[0], Catch::Matchers::WithinAbs(-1.5, 1e-8));
  CHECK_THAT(s.data[1], Catch::Matchers::WithinAbs(0.0, 1e-6));
  CHECK_THAT(s.data[2], Catch::Matchers::WithinAbs(0.0, 1e-6));
  CHECK_THAT(s.data[3], Catch::Matchers::WithinAbs(0.0, 1e-8));
}

TEST_CASE("lmo: tie-breaking picks the smallest index") {
  const FeasibleSet simplex = Simplex{4};
  CHECK(lmo(simplex, SpacePoint::from_vector({1.0, 1.0, 1.0, 1.0})).data ==
        DenseVector{1.0, 0.0, 0.0, 0.0});
  const FeasibleSet l1 = L1Ball{3, 1.0};
  // |c| ties at indices 0 and 2; sign(0) treated as +1
  CHECK(lmo(l1, SpacePoint::from_vector({2.0, 1.0, -2.0})).data ==
        DenseVector{-1.0, 0.0, 0.0});
  CHECK(lmo(l1, SpacePoint::from_vector({0.0, 0.0, 0.0})).data ==
        DenseVector{-1.0, 0.0, 0.0});
}

TEST_CASE("lmo: zero direction on the nuclear ball returns the zero matrix") {
  const FeasibleSet ball = NuclearBall{3, 2, 5.0};
  const SpacePoint s = lmo(ball, SpacePoint::from_matrix(DenseMatrix(3, 2, 0.0)));
  CHECK(norm(s) == 0.0);
}

TEST_CASE("lmo: matches vertex brute force on simplex and l1 ball") {
  Rng rng(404);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(0, 8);
    const SpacePoint c = random_vec(rng, n);
    CHECK(inner(c, lmo(Simplex{n}, c)) == brute_force_min(simplex_vertices(n), c));
    const double r = 0.5 + rng.uniform() * 2.0;
    CHECK(inner(c, lmo(L1Ball{n, r}, c)) == brute_force_min(l1_vertices(n, r), c));
  }
}

TEST_CASE("lmo: optimality against projected random feasible points") {
  Rng rng(905);
  const FeasibleSet sets[] = {FeasibleSet{Simplex{6}}, FeasibleSet{L1Ball{6, 1.5}}};
  for (const FeasibleSet& set : sets) {
    for (int trial = 0; trial < 100; ++trial) {
      const SpacePoint c = random_vec(rng, 6);
      const SpacePoint s = lmo(set, c);
      const SpacePoint p = project(set, random_vec(rng, 6));
      CHECK(inner(c, s) <= inner(c, p) + 1e-9);
    }
  }
}

TEST_CASE("lmo: outputs are feasible") {
  Rng rng(31337);
  for (int trial = 0; trial < 50; ++trial) {
    const SpacePoint c = random_vec(rng, 5);
    const SpacePoint s = lmo(Simplex{5}, c);
    double sum = 0.0;
    for (const double v : s.data) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
  // nuclear output has ||S||_* <= radius (checked by the SVD oracle)
  DenseMatrix c(4, 4);
  for (auto& v : c.data) v = rng.normal();
  const SpacePoint s = lmo(NuclearBall{4, 4, 2.5}, SpacePoint::from_matrix(c));
  CHECK(nuclear_norm(s.to_matrix()) <= 2.5 + 1e-6);
}

TEST_CASE("project: simplex fixed example against active-set oracle") {
  const DenseVector z = {0.5, 0.5, 1.0};
  const SpacePoint p = project(Simplex{3}, SpacePoint::from_vector(z));
  CHECK_THAT(p.data[0], Catch::Matchers::WithinAbs(1.0 / 6.0, 1e-12));
  CHECK_THAT(p.data[1], Catch::Matchers::WithinAbs(1.0 / 6.0, 1e-12));
  CHECK_THAT(p.data[2], Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
  const DenseVector oracle = simplex_projection_by_enumeration(z);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK_THAT(p.data[i], Catch::Matchers::WithinAbs(oracle[i], 1e-12));
}

TEST_CASE("project: simplex matches active-set oracle on random points") {
  Rng rng(7007);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(0, 1);  // oracle enumerates n <= 3
    DenseVector z(n);
    for (auto& v : z) v = 2.0 * rng.normal();
    const SpacePoint p = project(Simplex{n}, SpacePoint::from_vector(z));
    const DenseVector ref = simplex_projection_by_enumeration(z);
    for (std::size_t i = 0; i < n; ++i)
      CHECK_THAT(p.data[i], Catch::Matchers::WithinAbs(ref[i], 1e-10));
  }
}

TEST_CASE("project: identity on members") {
  const SpacePoint inside = SpacePoint::from_vector({0.2, 0.3, 0.5});
  CHECK(project(Simplex{3}, inside).data == inside.data);

  Rng rng(64);
  DenseMatrix z(3, 3);
  for (auto& v : z.data) v = rng.normal();
  const double nn = nuclear_norm(z);
  const SpacePoint zp = SpacePoint::from_matrix(z);
  const SpacePoint q = project(NuclearBall{3, 3, nn}, zp);  // radius exactly ||z||_*
  CHECK(q.data == zp.data);
}

TEST_CASE("project: idempotent and nonexpansive") {
  Rng rng(5005);
  const FeasibleSet sets[] = {FeasibleSet{Simplex{5}}, FeasibleSet{L1Ball{5, 1.2}},
                              FeasibleSet{Box{{-1, -1, -1, -1, -1}, {1, 1, 1, 1, 1}}}};
  for (const FeasibleSet& set : sets) {
    for (int trial = 0; trial < 50; ++trial) {
      const SpacePoint a = scaled(2.0, random_vec(rng, 5));
      const SpacePoint b = scaled(2.0, random_vec(rng, 5));
      const SpacePoint pa = project(set, a);
      CHECK(norm(axpy(-1.0, pa, project(set, pa))) <= 1e-10);
      const SpacePoint pb = project(set, b);
      CHECK(norm(axpy(-1.0, pa, pb)) <= norm(axpy(-1.0, a, b)) + 1e-10);
    }
  }
  // nuclear ball: idempotence + nonexpansiveness on small matrices
  for (int trial = 0; trial < 10; ++trial) {
    DenseMatrix a(4, 4), b(4, 4);
    for (auto& v : a.data) v = rng.normal();
    for (auto& v : b.data) v = rng.normal();
    const FeasibleSet ball = NuclearBall{4, 4, 2.0};
    const SpacePoint pa = project(ball, SpacePoint::from_matrix(a));
    const SpacePoint pb = project(ball, SpacePoint::from_matrix(b));
    CHECK(nuclear_norm(pa.to_matrix()) <= 2.0 + 1e-8);
    CHECK(norm(axpy(-1.0, pa, project(ball, pa))) <= 1e-8);
    CHECK(norm(axpy(-1.0, pa, pb)) <=
          norm(axpy(-1.0, SpacePoint::from_matrix(a), SpacePoint::from_matrix(b))) + 1e-10);
  }
}

TEST_CASE("fw_gap: fixed examples and vertex brute force") {
  const FeasibleSet simplex = Simplex{3};
  const SpacePoint e1 = SpacePoint::from_vector({1.0, 0.0, 0.0});
  CHECK(fw_gap(simplex, e1, SpacePoint::from_vector({3.0, 1.0, 2.0})) == 2.0);
  CHECK(fw_gap(simplex, e1, SpacePoint::from_vector({0.0, 0.0, 0.0})) == 0.0);

  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(0, 6);
    const SpacePoint g = random_vec(rng, n);
    const SpacePoint x = project(Simplex{n}, random_vec(rng, n));
    double brute = -std::numeric_limits<double>::infinity();
    for (const DenseVector& v : simplex_vertices(n))
      brute = std::max(brute, inner(g, x) - inner(g, SpacePoint::from_vector(v)));
    CHECK_THAT(fw_gap(Simplex{n}, x, g), Catch::Matchers::WithinAbs(brute, 1e-12));
    CHECK(fw_gap(Simplex{n}, x, g) >= -1e-12);
  }
}
