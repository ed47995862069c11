#include "sheafdmfl/graph.hpp"

#include "sheafdmfl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>

namespace sheafdmfl {

namespace {

std::string edge_str(const Edge& e) {
  return "(" + std::to_string(e.first) + "," + std::to_string(e.second) + ")";
}

// Connected components over local indices 0..n-1.
std::vector<std::vector<int>> components(int n, const std::vector<Edge>& edges) {
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (const auto& [a, b] : edges) {
    adj[static_cast<std::size_t>(a)].push_back(b);
    adj[static_cast<std::size_t>(b)].push_back(a);
  }
  std::vector<int> comp(static_cast<std::size_t>(n), -1);
  std::vector<std::vector<int>> out;
  for (int s = 0; s < n; ++s) {
    if (comp[static_cast<std::size_t>(s)] >= 0) continue;
    const int id = static_cast<int>(out.size());
    out.emplace_back();
    std::vector<int> stack{s};
    comp[static_cast<std::size_t>(s)] = id;
    while (!stack.empty()) {
      int u = stack.back();
      stack.pop_back();
      out[static_cast<std::size_t>(id)].push_back(u);
      for (int v : adj[static_cast<std::size_t>(u)]) {
        if (comp[static_cast<std::size_t>(v)] < 0) {
          comp[static_cast<std::size_t>(v)] = id;
          stack.push_back(v);
        }
      }
    }
    std::sort(out.back().begin(), out.back().end());
  }
  return out;
}

}  // namespace

ClientGraph build_graph(int n_clients, std::vector<Edge> edges,
                        std::vector<std::vector<int>> modality_sets, int n_modalities) {
  if (n_clients <= 0) throw ConfigError("n_clients must be positive, got " + std::to_string(n_clients));
  if (static_cast<int>(modality_sets.size()) != n_clients)
    throw ConfigError("expected " + std::to_string(n_clients) + " modality sets, got " +
                      std::to_string(modality_sets.size()));

  for (auto& e : edges) {
    if (e.first == e.second) throw InvalidEdgeError("self-loop edge " + edge_str(e));
    if (e.first > e.second) std::swap(e.first, e.second);
    if (e.first < 0 || e.second >= n_clients)
      throw InvalidEdgeError("edge " + edge_str(e) + " out of range for " +
                             std::to_string(n_clients) + " clients");
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  int max_id = -1;
  for (int i = 0; i < n_clients; ++i) {
    auto& set = modality_sets[static_cast<std::size_t>(i)];
    if (set.empty()) throw EmptyModalitySetError("client " + std::to_string(i) + " has no modalities");
    std::sort(set.begin(), set.end());
    set.erase(std::unique(set.begin(), set.end()), set.end());
    if (set.front() < 0)
      throw ConfigError("client " + std::to_string(i) + " has a negative modality id");
    max_id = std::max(max_id, set.back());
  }
  if (n_modalities < 0) n_modalities = max_id + 1;
  if (max_id >= n_modalities)
    throw ConfigError("modality id " + std::to_string(max_id) + " exceeds n_modalities " +
                      std::to_string(n_modalities));

  ClientGraph g;
  g.n_clients = n_clients;
  g.n_modalities = n_modalities;
  g.edges = std::move(edges);
  g.modality_sets = std::move(modality_sets);
  g.neighbors.assign(static_cast<std::size_t>(n_clients), {});
  for (const auto& [i, j] : g.edges) {
    g.neighbors[static_cast<std::size_t>(i)].push_back(j);
    g.neighbors[static_cast<std::size_t>(j)].push_back(i);
  }
  for (auto& nb : g.neighbors) std::sort(nb.begin(), nb.end());
  return g;
}

ModalitySubgraph modality_subgraph(const ClientGraph& g, int modality) {
  if (modality < 0 || modality >= g.n_modalities)
    throw ModalityAbsentError("modality " + std::to_string(modality) + " outside [0, " +
                              std::to_string(g.n_modalities) + ")");
  ModalitySubgraph sub;
  sub.modality = modality;
  sub.local_index.assign(static_cast<std::size_t>(g.n_clients), -1);
  for (int i = 0; i < g.n_clients; ++i) {
    const auto& set = g.modality_sets[static_cast<std::size_t>(i)];
    if (std::binary_search(set.begin(), set.end(), modality)) {
      sub.local_index[static_cast<std::size_t>(i)] = static_cast<int>(sub.members.size());
      sub.members.push_back(i);
    }
  }
  for (const auto& [i, j] : g.edges) {
    const int a = sub.local_index[static_cast<std::size_t>(i)];
    const int b = sub.local_index[static_cast<std::size_t>(j)];
    if (a >= 0 && b >= 0) sub.edges.emplace_back(a, b);
  }

  const auto comps = components(static_cast<int>(sub.members.size()), sub.edges);
  if (comps.size() > 1) {
    std::ostringstream msg;
    msg << "modality " << modality << " subgraph is disconnected; components:";
    for (const auto& c : comps) {
      msg << " {";
      for (std::size_t k = 0; k < c.size(); ++k)
        msg << (k ? "," : "") << sub.members[static_cast<std::size_t>(c[k])];
      msg << "}";
    }
    throw DisconnectedSubgraphError(msg.str());
  }
  return sub;
}

MixingMatrix metropolis_weights(const ModalitySubgraph& sub) {
  const int n = static_cast<int>(sub.members.size());
  MixingMatrix mix;
  mix.modality = sub.modality;
  mix.members = sub.members;
  mix.w = Matrix::Zero(n, n);
  if (n == 0) return mix;

  std::vector<int> deg(static_cast<std::size_t>(n), 0);
  for (const auto& [a, b] : sub.edges) {
    ++deg[static_cast<std::size_t>(a)];
    ++deg[static_cast<std::size_t>(b)];
  }
  for (const auto& [a, b] : sub.edges) {
    const double w = 1.0 / (1.0 + std::max(deg[static_cast<std::size_t>(a)],
                                           deg[static_cast<std::size_t>(b)]));
    mix.w(a, b) = w;
    mix.w(b, a) = w;
  }
  for (int i = 0; i < n; ++i) mix.w(i, i) = 1.0 - mix.w.row(i).sum();
  return mix;
}

double spectral_gap(const MixingMatrix& mix) {
  const int n = static_cast<int>(mix.w.rows());
  if (n <= 1) return 1.0;

  // Deflate the known top eigenpair (eigenvalue 1, eigenvector 1/sqrt(n)):
  // on B = W - (1/n) 1 1^T the dominant magnitude is |lambda_2|.
  // Successive-norm estimates of a symmetric matrix converge to that
  // magnitude even when two extreme eigenvalues share it with opposite
  // sign, which Rayleigh quotients would not.
  Vector v(n);
  for (int i = 0; i < n; ++i) v(i) = static_cast<double>(i + 1);
  v.array() -= v.mean();
  v.normalize();

  const double tol = 1e-10;
  double est = -1.0;
  for (int it = 0; it < 10000; ++it) {
    Vector u = mix.w * v;
    u.array() -= u.mean();  // re-deflate against numeric drift
    const double norm = u.norm();
    if (norm < 1e-14) return 1.0;  // lambda_2 is numerically zero
    if (std::abs(norm - est) <= tol * std::max(1.0, norm)) return 1.0 - norm;
    est = norm;
    v = u / norm;
  }
  throw NonConvergentError("spectral gap power iteration on modality " +
                           std::to_string(mix.modality) + " did not settle in 10000 iterations");
}

std::vector<ClientGroup> client_groups(const ClientGraph& g) {
  std::map<std::vector<int>, std::vector<int>> by_set;
  for (int i = 0; i < g.n_clients; ++i)
    by_set[g.modality_sets[static_cast<std::size_t>(i)]].push_back(i);
  std::vector<ClientGroup> out;
  out.reserve(by_set.size());
  for (auto& [set, members] : by_set) out.push_back({set, std::move(members)});
  return out;
}

bool graph_connected(const ClientGraph& g) {
  return components(g.n_clients, g.edges).size() <= 1;
}

}  // namespace sheafdmfl
