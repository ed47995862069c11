#include "sheafdmfl/sheaf.hpp"

#include "sheafdmfl/errors.hpp"
#include "sheafdmfl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sheafdmfl {

SheafInit parse_sheaf_init(const std::string& name) {
  if (name == "identity") return SheafInit::identity;
  if (name == "random") return SheafInit::random;
  throw ConfigError("unknown sheaf init scheme '" + name + "' (expected identity|random)");
}

int edge_dim(int d_i, int d_j, double gamma) {
  if (!(gamma > 0.0) || gamma > 1.0)
    throw InvalidGammaError("gamma must lie in (0, 1], got " + std::to_string(gamma));
  if (d_i <= 0 || d_j <= 0)
    throw DimensionMismatchError("head dimensions must be positive, got " + std::to_string(d_i) +
                                 " and " + std::to_string(d_j));
  const int d = static_cast<int>(std::floor(gamma * static_cast<double>(d_i + d_j) / 2.0));
  return std::max(1, d);
}

namespace {

Matrix identity_map(int rows, int cols) {
  Matrix p = Matrix::Zero(rows, cols);
  const int r = std::min(rows, cols);
  for (int k = 0; k < r; ++k) p(k, k) = 1.0;
  return p;
}

Matrix random_map(int rows, int cols, double sigma, Rng& rng) {
  Matrix p(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) p(r, c) = sigma * rng.normal();
  return p;
}

}  // namespace

SheafState init_restriction_maps(const ClientGraph& g, const std::vector<int>& head_dims,
                                 double gamma, SheafInit scheme, double sigma2,
                                 std::uint64_t seed) {
  if (static_cast<int>(head_dims.size()) != g.n_clients)
    throw DimensionMismatchError("expected " + std::to_string(g.n_clients) + " head dims, got " +
                                 std::to_string(head_dims.size()));
  if (scheme == SheafInit::random && !(sigma2 > 0.0))
    throw InvalidSigmaError("sigma2 must be positive for random init, got " + std::to_string(sigma2));

  SheafState s;
  s.gamma = gamma;
  s.head_dims = head_dims;
  s.incident.assign(static_cast<std::size_t>(g.n_clients), {});
  Rng rng(seed);
  const double sigma = scheme == SheafInit::random ? std::sqrt(sigma2) : 0.0;

  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const auto [i, j] = g.edges[e];
    SheafEdge edge;
    edge.i = i;
    edge.j = j;
    const int d_i = head_dims[static_cast<std::size_t>(i)];
    const int d_j = head_dims[static_cast<std::size_t>(j)];
    edge.stalk_dim = edge_dim(d_i, d_j, gamma);
    if (scheme == SheafInit::identity) {
      edge.map_ij = identity_map(edge.stalk_dim, d_i);
      edge.map_ji = identity_map(edge.stalk_dim, d_j);
    } else {
      edge.map_ij = random_map(edge.stalk_dim, d_i, sigma, rng);
      edge.map_ji = random_map(edge.stalk_dim, d_j, sigma, rng);
    }
    s.incident[static_cast<std::size_t>(i)].push_back(static_cast<int>(e));
    s.incident[static_cast<std::size_t>(j)].push_back(static_cast<int>(e));
    s.edges.push_back(std::move(edge));
  }
  // ClientGraph edges are sorted lexicographically with i < j, so for any
  // client the incident edge indices above already run in ascending
  // neighbor order: partners below the client come first, then partners
  // above, each block sorted.
  return s;
}

namespace {

void check_omega(const std::vector<Vector>& omega, const SheafState& s) {
  if (omega.size() != s.head_dims.size())
    throw DimensionMismatchError("expected " + std::to_string(s.head_dims.size()) +
                                 " head vectors, got " + std::to_string(omega.size()));
  for (std::size_t i = 0; i < omega.size(); ++i)
    if (omega[i].size() != s.head_dims[i])
      throw DimensionMismatchError("head vector " + std::to_string(i) + " has length " +
                                   std::to_string(omega[i].size()) + ", expected " +
                                   std::to_string(s.head_dims[i]));
}

}  // namespace

double sheaf_quadratic(const std::vector<Vector>& omega, const SheafState& s) {
  check_omega(omega, s);
  double total = 0.0;
  for (const auto& e : s.edges) {
    const Vector r = e.map_ij * omega[static_cast<std::size_t>(e.i)] -
                     e.map_ji * omega[static_cast<std::size_t>(e.j)];
    total += r.squaredNorm();
  }
  return total;
}

Matrix assemble_block_matrix(const SheafState& s) {
  const int n = static_cast<int>(s.head_dims.size());
  std::vector<int> col_off(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 0; i < n; ++i)
    col_off[static_cast<std::size_t>(i) + 1] =
        col_off[static_cast<std::size_t>(i)] + s.head_dims[static_cast<std::size_t>(i)];
  int rows = 0;
  for (const auto& e : s.edges) rows += e.stalk_dim;

  Matrix p = Matrix::Zero(rows, col_off.back());
  int row = 0;
  for (const auto& e : s.edges) {
    p.block(row, col_off[static_cast<std::size_t>(e.i)], e.stalk_dim,
            s.head_dims[static_cast<std::size_t>(e.i)]) = e.map_ij;
    p.block(row, col_off[static_cast<std::size_t>(e.j)], e.stalk_dim,
            s.head_dims[static_cast<std::size_t>(e.j)]) = -e.map_ji;
    row += e.stalk_dim;
  }
  return p;
}

Vector sheaf_gradient(const std::vector<Vector>& omega, const SheafState& s, int client) {
  check_omega(omega, s);
  if (client < 0 || client >= static_cast<int>(s.head_dims.size()))
    throw DimensionMismatchError("client " + std::to_string(client) + " out of range");
  Vector g = Vector::Zero(s.head_dims[static_cast<std::size_t>(client)]);
  for (int ei : s.incident[static_cast<std::size_t>(client)]) {
    const auto& e = s.edges[static_cast<std::size_t>(ei)];
    if (e.i == client) {
      const Vector r = e.map_ij * omega[static_cast<std::size_t>(e.i)] -
                       e.map_ji * omega[static_cast<std::size_t>(e.j)];
      g.noalias() += e.map_ij.transpose() * r;
    } else {
      const Vector r = e.map_ji * omega[static_cast<std::size_t>(e.j)] -
                       e.map_ij * omega[static_cast<std::size_t>(e.i)];
      g.noalias() += e.map_ji.transpose() * r;
    }
  }
  return g;
}

SheafState update_restriction_maps(const SheafState& s, const std::vector<Vector>& omega) {
  check_omega(omega, s);
  const double step = s.eta * s.lambda;
  SheafState out = s;
  if (step == 0.0) return out;
  for (std::size_t e = 0; e < out.edges.size(); ++e) {
    auto& edge = out.edges[e];
    const Vector& wi = omega[static_cast<std::size_t>(edge.i)];
    const Vector& wj = omega[static_cast<std::size_t>(edge.j)];
    // Both maps step from the pre-update residual.
    const Vector r = edge.map_ij * wi - edge.map_ji * wj;
    edge.map_ij.noalias() -= step * r * wi.transpose();
    edge.map_ji.noalias() -= step * (-r) * wj.transpose();
    if (!edge.map_ij.allFinite() || !edge.map_ji.allFinite())
      throw NonFiniteError("restriction map update produced non-finite entries on edge (" +
                           std::to_string(edge.i) + "," + std::to_string(edge.j) + ")");
  }
  return out;
}

}  // namespace sheafdmfl
