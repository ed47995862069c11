#pragma once

#include "sheafdmfl/types.hpp"

#include <vector>

namespace sheafdmfl {

/// Undirected client graph with one modality subset per client.
struct ClientGraph {
  int n_clients = 0;
  int n_modalities = 0;
  std::vector<Edge> edges;                      // sorted, deduplicated, i < j
  std::vector<std::vector<int>> modality_sets;  // per client, ascending ids
  std::vector<std::vector<int>> neighbors;      // per client, ascending
};

/// Induced subgraph over the clients holding one modality.
struct ModalitySubgraph {
  int modality = 0;
  std::vector<int> members;      // ascending global client ids
  std::vector<Edge> edges;       // endpoints are local member indices
  std::vector<int> local_index;  // global id -> local index, -1 if absent
};

/// Symmetric doubly stochastic gossip matrix over a modality subgraph.
struct MixingMatrix {
  int modality = 0;
  std::vector<int> members;  // ascending global client ids, row order
  Matrix w;
};

/// Clients sharing an identical modality set.
struct ClientGroup {
  std::vector<int> modalities;  // ascending
  std::vector<int> members;     // ascending
};

/// Validates and normalizes the topology. Throws InvalidEdgeError for
/// out-of-range or self-loop edges and EmptyModalitySetError for clients
/// without modalities. Duplicate edges are merged. When n_modalities is
/// negative it is inferred as max id + 1.
ClientGraph build_graph(int n_clients, std::vector<Edge> edges,
                        std::vector<std::vector<int>> modality_sets,
                        int n_modalities = -1);

/// Induced subgraph for one modality. Throws DisconnectedSubgraphError
/// (listing the components) when the members are not mutually reachable.
/// A singleton or empty member set is vacuously connected.
ModalitySubgraph modality_subgraph(const ClientGraph& g, int modality);

/// Metropolis-Hastings weights on the subgraph: w_ij = 1/(1+max(deg_i,deg_j))
/// for subgraph edges, w_ii absorbs the remainder. Symmetric and doubly
/// stochastic by construction.
MixingMatrix metropolis_weights(const ModalitySubgraph& sub);

/// 1 - |lambda_2| of a mixing matrix, computed by power iteration on
/// W - (1/n) 1 1^T with a deterministic ramp start. Throws
/// NonConvergentError if the estimate has not settled to 1e-10 within
/// 10000 iterations. A 1x1 matrix has gap 1 by definition.
double spectral_gap(const MixingMatrix& w);

/// Distinct modality sets with their members, ordered lexicographically
/// by modality set.
std::vector<ClientGroup> client_groups(const ClientGraph& g);

/// Whether the full graph (ignoring modalities) is one component.
bool graph_connected(const ClientGraph& g);

}  // namespace sheafdmfl
