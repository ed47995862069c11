#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <vector>

#include "sheafdmfl/errors.hpp"
#include "sheafdmfl/graph.hpp"
#include "sheafdmfl/rng.hpp"
#include "sheafdmfl/sheaf.hpp"

using namespace sheafdmfl;

namespace {

SheafState random_instance(int n_clients, Rng& rng, double gamma) {
  std::vector<Edge> edges;
  for (int v = 1; v < n_clients; ++v)
    edges.emplace_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(v))), v);
  std::vector<std::vector<int>> mods(static_cast<std::size_t>(n_clients), {0});
  const ClientGraph g = build_graph(n_clients, std::move(edges), std::move(mods));
  std::vector<int> dims;
  for (int i = 0; i < n_clients; ++i) dims.push_back(2 + static_cast<int>(rng.below(5)));
  return init_restriction_maps(g, dims, gamma, SheafInit::random, 0.5, rng.raw());
}

std::vector<Vector> random_heads(const SheafState& s, Rng& rng) {
  std::vector<Vector> omega;
  for (int d : s.head_dims) {
    Vector v(d);
    for (int k = 0; k < d; ++k) v(k) = rng.normal();
    omega.push_back(std::move(v));
  }
  return omega;
}

Vector stack(const std::vector<Vector>& omega) {
  int total = 0;
  for (const auto& v : omega) total += static_cast<int>(v.size());
  Vector out(total);
  int off = 0;
  for (const auto& v : omega) {
    out.segment(off, v.size()) = v;
    off += static_cast<int>(v.size());
  }
  return out;
}

}  // namespace

TEST_CASE("edge stalk dimension formula") {
  // floor(gamma * (d_i + d_j) / 2), floored at one.
  CHECK(edge_dim(100, 100, 1.0) == 100);
  CHECK(edge_dim(100, 100, 0.23) == 23);
  CHECK(edge_dim(10, 30, 0.1) == 2);
  CHECK(edge_dim(2, 2, 0.1) == 1);  // floor would be 0; clamped to 1
  CHECK(edge_dim(5, 7, 1.0) == 6);

  // Monotone in gamma.
  int prev = 0;
  for (double gamma : {0.1, 0.25, 0.5, 0.75, 1.0}) {
    const int d = edge_dim(9, 13, gamma);
    CHECK(d >= prev);
    prev = d;
  }

  CHECK_THROWS_AS(edge_dim(4, 4, 0.0), InvalidGammaError);
  CHECK_THROWS_AS(edge_dim(4, 4, 1.5), InvalidGammaError);
  CHECK_THROWS_AS(edge_dim(0, 4, 0.5), DimensionMismatchError);
}

TEST_CASE("identity initialization pads the shorter side with zero rows") {
  const ClientGraph g = build_graph(2, {{0, 1}}, {{0}, {0}});
  const SheafState s = init_restriction_maps(g, {4, 2}, 1.0, SheafInit::identity, 0.01, 7);
  REQUIRE(s.edges.size() == 1);
  const SheafEdge& e = s.edges[0];
  CHECK(e.stalk_dim == 3);  // floor(1.0 * (4 + 2) / 2)
  REQUIRE(e.map_ij.rows() == 3);
  REQUIRE(e.map_ij.cols() == 4);
  REQUIRE(e.map_ji.rows() == 3);
  REQUIRE(e.map_ji.cols() == 2);
  CHECK((e.map_ij - Matrix::Identity(3, 4)).norm() == 0.0);
  Matrix expect_ji = Matrix::Zero(3, 2);
  expect_ji(0, 0) = 1.0;
  expect_ji(1, 1) = 1.0;  // third row stays zero: the 2-dim head has no third coordinate
  CHECK((e.map_ji - expect_ji).norm() == 0.0);
}

TEST_CASE("random initialization validates sigma2") {
  const ClientGraph g = build_graph(2, {{0, 1}}, {{0}, {0}});
  CHECK_THROWS_AS(init_restriction_maps(g, {3, 3}, 0.5, SheafInit::random, 0.0, 7),
                  InvalidSigmaError);
  CHECK_THROWS_AS(init_restriction_maps(g, {3, 3}, 0.5, SheafInit::random, -1.0, 7),
                  InvalidSigmaError);
}

TEST_CASE("quadratic on the three-client path with scalar heads") {
  const ClientGraph g = build_graph(3, {{0, 1}, {1, 2}}, {{0}, {0}, {0}});
  SheafState s = init_restriction_maps(g, {1, 1, 1}, 1.0, SheafInit::identity, 0.01, 7);
  const std::vector<Vector> omega = {Vector::Constant(1, 1.0), Vector::Constant(1, 2.0),
                                     Vector::Constant(1, 3.0)};
  // (1-2)^2 + (2-3)^2 = 2, counting each undirected edge once.
  CHECK(sheaf_quadratic(omega, s) == doctest::Approx(2.0).epsilon(1e-15));

  // Gradient of (1/2) * quadratic: -1 at the left end, 0 in the middle
  // (the two pulls cancel), +1 at the right end.
  CHECK(sheaf_gradient(omega, s, 0)(0) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(sheaf_gradient(omega, s, 1)(0) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(sheaf_gradient(omega, s, 2)(0) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("sheaf gradient matches central differences of the quadratic") {
  Rng rng(902);
  for (int t = 0; t < 10; ++t) {
    const SheafState s = random_instance(2 + static_cast<int>(rng.below(4)), rng, 0.6);
    std::vector<Vector> omega = random_heads(s, rng);
    const double h = 1e-6;
    for (int i = 0; i < static_cast<int>(omega.size()); ++i) {
      const Vector grad = sheaf_gradient(omega, s, i);
      for (int k = 0; k < omega[static_cast<std::size_t>(i)].size(); ++k) {
        const double keep = omega[static_cast<std::size_t>(i)](k);
        omega[static_cast<std::size_t>(i)](k) = keep + h;
        const double up = sheaf_quadratic(omega, s);
        omega[static_cast<std::size_t>(i)](k) = keep - h;
        const double dn = sheaf_quadratic(omega, s);
        omega[static_cast<std::size_t>(i)](k) = keep;
        // d(q/2)/dw = (up - dn) / (4h)
        CHECK(grad(k) == doctest::Approx((up - dn) / (4.0 * h)).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("block assembly reproduces the quadratic, a PSD Laplacian and the gradient") {
  Rng rng(314);
  for (int t = 0; t < 20; ++t) {
    const SheafState s = random_instance(2 + static_cast<int>(rng.below(4)), rng, 0.7);
    const std::vector<Vector> omega = random_heads(s, rng);
    const Vector w = stack(omega);
    const Matrix b = assemble_block_matrix(s);
    REQUIRE(b.cols() == w.size());

    CHECK((b * w).squaredNorm() == doctest::Approx(sheaf_quadratic(omega, s)).epsilon(1e-12));

    const Matrix lap = b.transpose() * b;
    CHECK((lap - lap.transpose()).norm() <= 1e-12);
    Eigen::SelfAdjointEigenSolver<Matrix> es(lap);
    CHECK(es.eigenvalues().minCoeff() >= -1e-10);

    // Gradient blocks of (1/2) w^T L w are the rows of L * w.
    const Vector full = lap * w;
    int off = 0;
    for (int i = 0; i < static_cast<int>(omega.size()); ++i) {
      const int d = static_cast<int>(omega[static_cast<std::size_t>(i)].size());
      CHECK((sheaf_gradient(omega, s, i) - full.segment(off, d)).norm() <= 1e-10);
      off += d;
    }
  }
}

TEST_CASE("restriction map update with scalar heads") {
  const ClientGraph g = build_graph(2, {{0, 1}}, {{0}, {0}});
  SheafState s = init_restriction_maps(g, {1, 1}, 1.0, SheafInit::identity, 0.01, 7);
  s.lambda = 1.0;
  s.eta = 0.1;
  const std::vector<Vector> omega = {Vector::Constant(1, 2.0), Vector::Constant(1, 1.0)};
  const SheafState next = update_restriction_maps(s, omega);
  // residual r = 1*2 - 1*1 = 1; P_ij <- 1 - 0.1*1*1*2 = 0.8 and
  // P_ji <- 1 + 0.1*1*1*1 = 1.1.
  CHECK(next.edges[0].map_ij(0, 0) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(next.edges[0].map_ji(0, 0) == doctest::Approx(1.1).epsilon(1e-15));
}

TEST_CASE("map update is a no-op when the step or coupling vanishes") {
  Rng rng(58);
  SheafState s = random_instance(3, rng, 0.5);
  const std::vector<Vector> omega = random_heads(s, rng);

  s.lambda = 0.0;
  s.eta = 0.3;
  SheafState frozen = update_restriction_maps(s, omega);
  for (std::size_t e = 0; e < s.edges.size(); ++e) {
    CHECK((frozen.edges[e].map_ij - s.edges[e].map_ij).norm() == 0.0);
    CHECK((frozen.edges[e].map_ji - s.edges[e].map_ji).norm() == 0.0);
  }

  s.lambda = 0.7;
  s.eta = 0.0;
  frozen = update_restriction_maps(s, omega);
  for (std::size_t e = 0; e < s.edges.size(); ++e)
    CHECK((frozen.edges[e].map_ij - s.edges[e].map_ij).norm() == 0.0);
}

TEST_CASE("map update decreases the quadratic for a small step") {
  Rng rng(77);
  for (int t = 0; t < 5; ++t) {
    SheafState s = random_instance(4, rng, 0.8);
    const std::vector<Vector> omega = random_heads(s, rng);
    s.lambda = 1.0;
    s.eta = 1e-3;
    const double before = sheaf_quadratic(omega, s);
    const double after = sheaf_quadratic(omega, update_restriction_maps(s, omega));
    CHECK(after <= before + 1e-12);
  }
}
