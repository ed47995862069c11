#pragma once

#include "sheafdmfl/graph.hpp"
#include "sheafdmfl/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sheafdmfl {

enum class SheafInit { identity, random };

SheafInit parse_sheaf_init(const std::string& name);

/// One undirected edge of the sheaf: stalk dimension d_ij and the two
/// restriction maps into it. map_ij projects client i's head parameters
/// (i < j), map_ji projects client j's.
struct SheafEdge {
  int i = 0;
  int j = 0;
  int stalk_dim = 0;
  Matrix map_ij;  // stalk_dim x head_dims[i]
  Matrix map_ji;  // stalk_dim x head_dims[j]
};

struct SheafState {
  std::vector<SheafEdge> edges;            // aligned with ClientGraph::edges
  std::vector<std::vector<int>> incident;  // per client: edge indices, ascending neighbor
  std::vector<int> head_dims;              // d_i per client
  double gamma = 1.0;
  double lambda = 0.0;
  double eta = 0.0;
};

/// Edge stalk dimension max(1, floor(gamma * (d_i + d_j) / 2)).
/// Throws InvalidGammaError unless gamma is in (0, 1].
int edge_dim(int d_i, int d_j, double gamma);

/// Builds restriction maps for every edge. identity: leading rows of the
/// identity (zero rows appended if the stalk outgrows the head). random:
/// i.i.d. N(0, sigma2) entries from a generator seeded with `seed`, drawn
/// in edge order, map_ij before map_ji, row-major. Throws
/// InvalidSigmaError for non-positive sigma2 under the random scheme.
SheafState init_restriction_maps(const ClientGraph& g, const std::vector<int>& head_dims,
                                 double gamma, SheafInit scheme, double sigma2,
                                 std::uint64_t seed);

/// Sum over undirected edges (each counted once) of
/// ||P_ij w_i - P_ji w_j||^2.
double sheaf_quadratic(const std::vector<Vector>& omega, const SheafState& s);

/// Stacked coboundary matrix: block row e carries +P_ij in client i's
/// column block and -P_ji in client j's. Its Gram matrix is the sheaf
/// Laplacian.
Matrix assemble_block_matrix(const SheafState& s);

/// d/d w_i of (1/2) * sheaf_quadratic: sum over incident edges of
/// P_ij^T (P_ij w_i - P_ji w_j). The caller applies any lambda scaling.
Vector sheaf_gradient(const std::vector<Vector>& omega, const SheafState& s, int client);

/// Simultaneous gradient step on every restriction map from the pre-update
/// values: P_ij <- P_ij - eta*lambda*(P_ij w_i - P_ji w_j) w_i^T and
/// symmetrically for P_ji. A no-op when eta*lambda is zero. Throws
/// NonFiniteError naming the edge if an updated map leaves IEEE range.
SheafState update_restriction_maps(const SheafState& s, const std::vector<Vector>& omega);

}  // namespace sheafdmfl
