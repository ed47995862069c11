#include "sheafdmfl/verify.hpp"

#include "sheafdmfl/config.hpp"
#include "sheafdmfl/errors.hpp"
#include "sheafdmfl/metrics.hpp"
#include "sheafdmfl/rng.hpp"
#include "sheafdmfl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <ostream>
#include <sstream>
#include <utility>

namespace sheafdmfl {

namespace {

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

/// Temporarily pins an environment variable, restoring on destruction.
struct EnvGuard {
  std::string name;
  std::string old_value;
  bool had = false;
  EnvGuard(const char* n, const char* value) : name(n) {
    const char* cur = std::getenv(n);
    had = cur != nullptr;
    if (had) old_value = cur;
    ::setenv(n, value, 1);
  }
  ~EnvGuard() {
    if (had)
      ::setenv(name.c_str(), old_value.c_str(), 1);
    else
      ::unsetenv(name.c_str());
  }
};

// ---------------------------------------------------------------------------
// Gradient / finite-difference agreement
// ---------------------------------------------------------------------------

struct SmallInstance {
  ClientGraph g;
  std::vector<ClientDataset> data;
  FederationState state;
};

/// Three clients on a path with modality sets {0}, {0,1}, {1}; random
/// parameters, random restriction maps, random data.
SmallInstance small_instance(std::uint64_t seed, FusionMode fusion) {
  SmallInstance inst;
  inst.g = build_graph(3, {{0, 1}, {1, 2}}, {{0}, {0, 1}, {1}});
  const std::vector<int> m_k = {3, 2};
  const auto spec = make_latent_spec(4, 2, m_k, 0.3, derive_seed(seed, 11));
  inst.data = generate(spec, inst.g, 8, 0.4);

  Rng rng(derive_seed(seed, 14));
  ModelSettings model;
  model.hidden = 3;
  model.n_classes = 2;
  model.fusion = fusion;
  model.embed_dims = fusion == FusionMode::attention ? std::vector<int>{3, 3}
                                                     : std::vector<int>{3, 2};
  SheafSettings sheaf;
  sheaf.gamma = 0.4 + 0.5 * rng.uniform01();
  sheaf.lambda = 0.3 + 0.8 * rng.uniform01();
  sheaf.init = SheafInit::random;
  sheaf.sigma2 = 0.15;
  sheaf.seed = derive_seed(seed, 12);
  const Algorithm alg =
      fusion == FusionMode::attention ? Algorithm::sheaf_dmfl_att : Algorithm::sheaf_dmfl;
  inst.state = build_state(inst.g, m_k, model, sheaf, alg, derive_seed(seed, 13));

  for (auto& models : inst.state.models)
    for (auto& m : models) {
      Vector v = flatten(m);
      for (Eigen::Index c = 0; c < v.size(); ++c) v(c) = 0.4 * rng.normal();
      unflatten(m, v);
    }
  return inst;
}

struct BlockError {
  double num = 0.0;  // squared norm of (fd - analytic)
  double den = 0.0;  // squared norm of analytic
  void add(double fd, double an) {
    num += (fd - an) * (fd - an);
    den += an * an;
  }
  double rel() const { return std::sqrt(num) / std::max(std::sqrt(den), 1e-10); }
};

struct FdErrors {
  BlockError phi, beta, omega, maps;
  double max_rel() const {
    return std::max(std::max(phi.rel(), beta.rel()), std::max(omega.rel(), maps.rel()));
  }
};

FdErrors fd_instance_errors(const SmallInstance& inst, double eps, double metric_tol,
                            std::string& metric_mismatch) {
  const ClientGraph& g = inst.g;
  const FederationState& state = inst.state;
  const double lambda = state.sheaf.lambda;

  // Consensus (averaged-encoder) copy: analytic gradients live here.
  FederationState tilde = state;
  std::vector<std::vector<int>> members(static_cast<std::size_t>(g.n_modalities));
  for (int k = 0; k < g.n_modalities; ++k) {
    const auto& mem = state.mixing[static_cast<std::size_t>(k)].members;
    members[static_cast<std::size_t>(k)] = mem;
    Vector mean;
    for (int i : mem) {
      const Vector v = flatten_encoder(encoder_of(state, g, i, k));
      if (mean.size() == 0)
        mean = v;
      else
        mean += v;
    }
    mean /= static_cast<double>(mem.size());
    for (int i : mem) set_encoder(encoder_of(tilde, g, i, k), mean);
  }

  std::vector<Vector> heads;
  for (int i = 0; i < g.n_clients; ++i)
    heads.push_back(flatten_head(tilde.models[static_cast<std::size_t>(i)].front().head));

  // Analytic blocks at the consensus point.
  std::vector<Vector> phi_sum(static_cast<std::size_t>(g.n_modalities));
  std::vector<LossGrads> lgs;
  for (int i = 0; i < g.n_clients; ++i) {
    const auto& m = tilde.models[static_cast<std::size_t>(i)].front();
    const auto& ds = inst.data[static_cast<std::size_t>(i)];
    lgs.push_back(loss_and_grads(m, features_for(m, ds), ds.labels,
                                 std::span<const int>(ds.train_idx)));
    for (std::size_t a = 0; a < m.modalities.size(); ++a) {
      const auto k = static_cast<std::size_t>(m.modalities[a]);
      const Vector ge = flatten_encoder(lgs.back().grads.encoders[a]);
      if (phi_sum[k].size() == 0)
        phi_sum[k] = ge;
      else
        phi_sum[k] += ge;
    }
  }

  FdErrors err;
  const auto objective_with = [&](const auto& mutate) {
    FederationState s2 = state;
    mutate(s2);
    return global_objective(s2, g, inst.data);
  };
  const auto central = [&](const auto& bump) {
    const double up = objective_with([&](FederationState& s2) { bump(s2, eps); });
    const double dn = objective_with([&](FederationState& s2) { bump(s2, -eps); });
    return (up - dn) / (2.0 * eps);
  };

  // Phi blocks: gradient w.r.t. the shared average; move every member copy.
  for (int k = 0; k < g.n_modalities; ++k) {
    const auto& mem = members[static_cast<std::size_t>(k)];
    const Vector& an = phi_sum[static_cast<std::size_t>(k)];
    for (Eigen::Index c = 0; c < an.size(); ++c) {
      const double fd = central([&](FederationState& s2, double d) {
        for (int i : mem) {
          Vector v = flatten_encoder(encoder_of(s2, g, i, k));
          v(c) += d;
          set_encoder(encoder_of(s2, g, i, k), v);
        }
      });
      err.phi.add(fd, an(c));
    }
  }

  // Attention scores.
  for (int i = 0; i < g.n_clients; ++i) {
    const auto& grads = lgs[static_cast<std::size_t>(i)].grads;
    for (std::size_t a = 0; a < grads.attention.size(); ++a)
      for (Eigen::Index c = 0; c < grads.attention[a].size(); ++c) {
        const double fd = central([&](FederationState& s2, double d) {
          s2.models[static_cast<std::size_t>(i)].front().attention[a](c) += d;
        });
        err.beta.add(fd, grads.attention[a](c));
      }
  }

  // Heads: loss gradient plus lambda * sheaf gradient.
  for (int i = 0; i < g.n_clients; ++i) {
    const Vector an = flatten_head(lgs[static_cast<std::size_t>(i)].grads.head) +
                      lambda * sheaf_gradient(heads, state.sheaf, i);
    for (Eigen::Index c = 0; c < an.size(); ++c) {
      const double fd = central([&](FederationState& s2, double d) {
        auto& h = s2.models[static_cast<std::size_t>(i)].front().head;
        Vector v = flatten_head(h);
        v(c) += d;
        set_head(h, v);
      });
      err.omega.add(fd, an(c));
    }
  }

  // Restriction maps: d/dP_ij (lambda/2)||r||^2 = lambda r w_i^T.
  for (std::size_t e = 0; e < state.sheaf.edges.size(); ++e) {
    const auto& edge = state.sheaf.edges[e];
    const Vector& wi = heads[static_cast<std::size_t>(edge.i)];
    const Vector& wj = heads[static_cast<std::size_t>(edge.j)];
    const Vector r = edge.map_ij * wi - edge.map_ji * wj;
    const Matrix an_ij = lambda * r * wi.transpose();
    const Matrix an_ji = -lambda * r * wj.transpose();
    for (Eigen::Index row = 0; row < edge.map_ij.rows(); ++row) {
      for (Eigen::Index col = 0; col < edge.map_ij.cols(); ++col) {
        const double fd = central([&](FederationState& s2, double d) {
          s2.sheaf.edges[e].map_ij(row, col) += d;
        });
        err.maps.add(fd, an_ij(row, col));
      }
      for (Eigen::Index col = 0; col < edge.map_ji.cols(); ++col) {
        const double fd = central([&](FederationState& s2, double d) {
          s2.sheaf.edges[e].map_ji(row, col) += d;
        });
        err.maps.add(fd, an_ji(row, col));
      }
    }
  }

  // Cross-check the reported block norms against these analytic vectors.
  const MetricsSnapshot snap = compute_metrics(state, g, inst.data, 0);
  const auto rel_gap = [](double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
  };
  for (int k = 0; k < g.n_modalities; ++k)
    if (rel_gap(snap.blocks.phi[static_cast<std::size_t>(k)],
                phi_sum[static_cast<std::size_t>(k)].squaredNorm()) > metric_tol)
      metric_mismatch = "phi norm mismatch (modality " + std::to_string(k) + ")";
  double beta_sq = 0.0, omega_sq = 0.0, maps_sq = 0.0;
  for (int i = 0; i < g.n_clients; ++i) {
    for (const auto& a : lgs[static_cast<std::size_t>(i)].grads.attention)
      beta_sq += a.squaredNorm();
    omega_sq += (flatten_head(lgs[static_cast<std::size_t>(i)].grads.head) +
                 lambda * sheaf_gradient(heads, state.sheaf, i))
                    .squaredNorm();
  }
  for (const auto& edge : state.sheaf.edges) {
    const Vector r = edge.map_ij * heads[static_cast<std::size_t>(edge.i)] -
                     edge.map_ji * heads[static_cast<std::size_t>(edge.j)];
    maps_sq += lambda * lambda * r.squaredNorm() *
               (heads[static_cast<std::size_t>(edge.i)].squaredNorm() +
                heads[static_cast<std::size_t>(edge.j)].squaredNorm());
  }
  if (rel_gap(snap.blocks.beta, beta_sq) > metric_tol) metric_mismatch = "beta norm mismatch";
  if (rel_gap(snap.blocks.omega, omega_sq) > metric_tol) metric_mismatch = "omega norm mismatch";
  if (rel_gap(snap.blocks.p, maps_sq) > metric_tol) metric_mismatch = "map norm mismatch";
  return err;
}

CheckResult check_gradient_fd(int n_seeds) {
  Timer t;
  CheckResult r;
  r.name = "gradient finite-difference agreement";
  double worst = 0.0;
  std::string mismatch;
  for (int s = 0; s < n_seeds && mismatch.empty(); ++s)
    for (FusionMode fusion : {FusionMode::concat, FusionMode::attention}) {
      const auto inst = small_instance(1000 + static_cast<std::uint64_t>(s), fusion);
      const FdErrors err = fd_instance_errors(inst, 1e-5, 1e-8, mismatch);
      worst = std::max(worst, err.max_rel());
      if (!mismatch.empty()) break;
    }
  r.seconds = t.elapsed();
  r.pass = worst <= 1e-4 && mismatch.empty() && r.seconds < 30.0;
  r.detail = "worst block rel err " + fmt(worst) + " over " + std::to_string(2 * n_seeds) +
             " instances (tol 1e-4)";
  if (!mismatch.empty()) r.detail += "; " + mismatch;
  return r;
}

// ---------------------------------------------------------------------------
// Sheaf algebra against the block assembly
// ---------------------------------------------------------------------------

CheckResult check_sheaf_algebra() {
  Timer t;
  CheckResult r;
  r.name = "sheaf quadratic / Laplacian algebra";
  double worst_quad = 0.0, worst_sym = 0.0, min_eig = std::numeric_limits<double>::infinity();
  double worst_grad = 0.0;
  Rng rng(9001);
  for (int inst = 0; inst < 100; ++inst) {
    const int n = 2 + static_cast<int>(rng.below(4));
    std::vector<Edge> edges;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (rng.uniform01() < 0.5) edges.push_back({i, j});
    if (edges.empty()) edges.push_back({0, 1});
    const ClientGraph g =
        build_graph(n, edges, std::vector<std::vector<int>>(static_cast<std::size_t>(n), {0}));
    std::vector<int> dims;
    for (int i = 0; i < n; ++i) dims.push_back(1 + static_cast<int>(rng.below(8)));
    const double gamma = 0.05 + 0.95 * rng.uniform01();
    const SheafState s = init_restriction_maps(
        g, dims, gamma, SheafInit::random, 0.5, derive_seed(9002, static_cast<std::uint64_t>(inst)));

    std::vector<Vector> omega;
    Eigen::Index total = 0;
    for (int d : dims) total += d;
    Vector stacked(total);
    Eigen::Index at = 0;
    for (int i = 0; i < n; ++i) {
      Vector w(dims[static_cast<std::size_t>(i)]);
      for (Eigen::Index c = 0; c < w.size(); ++c) w(c) = rng.normal();
      stacked.segment(at, w.size()) = w;
      at += w.size();
      omega.push_back(std::move(w));
    }

    const double q = sheaf_quadratic(omega, s);
    const Matrix b = assemble_block_matrix(s);
    const double q2 = (b * stacked).squaredNorm();
    worst_quad = std::max(worst_quad, std::abs(q - q2) / std::max(1.0, q));

    const Matrix lap = b.transpose() * b;
    worst_sym = std::max(worst_sym, (lap - lap.transpose()).cwiseAbs().maxCoeff());
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(lap);
    min_eig = std::min(min_eig, eig.eigenvalues().minCoeff());

    const Vector full = lap * stacked;
    at = 0;
    for (int i = 0; i < n; ++i) {
      const Vector gi = sheaf_gradient(omega, s, i);
      worst_grad = std::max(worst_grad,
                            (full.segment(at, gi.size()) - gi).cwiseAbs().maxCoeff() /
                                std::max(1.0, gi.cwiseAbs().maxCoeff()));
      at += gi.size();
    }
  }
  r.seconds = t.elapsed();
  r.pass = worst_quad <= 1e-10 && worst_sym <= 1e-12 && min_eig >= -1e-10 &&
           worst_grad <= 1e-10 && r.seconds < 10.0;
  r.detail = "quad gap " + fmt(worst_quad) + ", asymmetry " + fmt(worst_sym) + ", min eig " +
             fmt(min_eig) + ", grad gap " + fmt(worst_grad) + " over 100 instances";
  return r;
}

// ---------------------------------------------------------------------------
// Mixing-matrix assumptions
// ---------------------------------------------------------------------------

std::string mixing_violation(const MixingMatrix& mix) {
  const auto n = static_cast<Eigen::Index>(mix.members.size());
  if (mix.w.rows() != n || mix.w.cols() != n) return "shape mismatch";
  const double asym = (mix.w - mix.w.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-12) return "asymmetric by " + fmt(asym);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::abs(mix.w.row(i).sum() - 1.0) > 1e-12)
      return "row " + std::to_string(i) + " sums to " + fmt(mix.w.row(i).sum());
    if (std::abs(mix.w.col(i).sum() - 1.0) > 1e-12)
      return "col " + std::to_string(i) + " sums to " + fmt(mix.w.col(i).sum());
    for (Eigen::Index j = 0; j < n; ++j)
      if (mix.w(i, j) < 0.0) return "negative entry";
  }
  return {};
}

CheckResult check_mixing() {
  Timer t;
  CheckResult r;
  r.name = "mixing matrices symmetric, doubly stochastic, gap > 0";
  double min_gap = std::numeric_limits<double>::infinity();
  std::string violation;
  Rng rng(31);
  for (int inst = 0; inst < 50 && violation.empty(); ++inst) {
    const int n = 2 + static_cast<int>(rng.below(11));
    std::vector<Edge> edges;
    for (int v = 1; v < n; ++v)
      edges.push_back({static_cast<int>(rng.below(static_cast<std::uint64_t>(v))), v});
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (rng.uniform01() < 0.15) edges.push_back({i, j});
    const ClientGraph g =
        build_graph(n, edges, std::vector<std::vector<int>>(static_cast<std::size_t>(n), {0}));
    const MixingMatrix w = metropolis_weights(modality_subgraph(g, 0));
    violation = mixing_violation(w);
    min_gap = std::min(min_gap, spectral_gap(w));
  }
  r.seconds = t.elapsed();
  r.pass = violation.empty() && min_gap > 0.0 && r.seconds < 10.0;
  r.detail = violation.empty()
                 ? "50 random connected subgraphs OK, min spectral gap " + fmt(min_gap)
                 : violation;
  return r;
}

// ---------------------------------------------------------------------------
// Degeneration equivalences
// ---------------------------------------------------------------------------

ExperimentConfig degeneration_config() {
  ExperimentConfig c;
  c.n_clients = 6;
  c.edges = {{0, 1}, {1, 2}, {3, 4}, {4, 5}};
  c.modalities = {{0}, {0}, {0}, {1}, {1}, {1}};
  c.data.latent_dim = 5;
  c.data.n_classes = 3;
  c.data.m_k = {3, 2};
  c.data.noise_std = 0.4;
  c.data.n_per_client = 40;
  c.data.heterogeneity = 0.3;
  c.model.hidden = 5;
  c.model.embed_dims = {4, 4};
  c.model.n_classes = 3;
  c.model.fusion = FusionMode::concat;
  c.sheaf.gamma = 0.5;
  c.sheaf.lambda = 0.0;
  c.sheaf.eta = 0.0;
  c.sheaf.init = SheafInit::identity;
  c.train.rounds = 12;
  c.train.batch_size = 7;
  return c;
}

/// Per-round flattened parameters of every model, in (client, slot) order.
std::vector<Vector> parameter_trajectory(const ExperimentConfig& c) {
  ExperimentSetup setup = build_setup(c);
  const ResolvedSteps steps =
      resolve_steps(setup.state, setup.graph, setup.data, c.train, c.sheaf);
  std::vector<Vector> traj;
  RunHooks hooks;
  hooks.on_state = [&traj](int, const FederationState& s) {
    for (const auto& models : s.models)
      for (const auto& m : models) traj.push_back(flatten(m));
  };
  run(std::move(setup.state), setup.graph, setup.data, c.train, steps, hooks);
  return traj;
}

bool bitwise_equal(const std::vector<Vector>& a, const std::vector<Vector>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
    if (std::memcmp(a[i].data(), b[i].data(),
                    static_cast<std::size_t>(a[i].size()) * sizeof(double)) != 0)
      return false;
  }
  return true;
}

CheckResult check_degeneration_dsgd() {
  Timer t;
  CheckResult r;
  r.name = "lambda=0 single-modality run degenerates to dsgd bitwise";
  ExperimentConfig sheaf_cfg = degeneration_config();
  sheaf_cfg.train.algorithm = Algorithm::sheaf_dmfl;
  ExperimentConfig dsgd_cfg = degeneration_config();
  dsgd_cfg.train.algorithm = Algorithm::dsgd;
  dsgd_cfg.train.dsgd_head_gossip = false;
  const auto a = parameter_trajectory(sheaf_cfg);
  const auto b = parameter_trajectory(dsgd_cfg);
  r.pass = bitwise_equal(a, b);
  r.seconds = t.elapsed();
  r.detail = r.pass ? std::to_string(a.size()) + " parameter vectors identical over " +
                          std::to_string(sheaf_cfg.train.rounds) + " rounds"
                    : "trajectories diverge";
  return r;
}

CheckResult check_degeneration_consensus() {
  Timer t;
  CheckResult r;
  r.name = "gamma=1 identity maps give the exact consensus penalty";
  const int n = 4;
  const ClientGraph g = build_graph(
      n, {{0, 1}, {1, 2}, {2, 3}, {0, 3}},
      std::vector<std::vector<int>>(static_cast<std::size_t>(n), {0, 1}));
  const std::vector<int> dims(static_cast<std::size_t>(n), 27);
  const SheafState s = init_restriction_maps(g, dims, 1.0, SheafInit::identity, 0.01, 1);
  Rng rng(77);
  std::vector<Vector> omega;
  for (int i = 0; i < n; ++i) {
    Vector w(27);
    for (Eigen::Index c = 0; c < w.size(); ++c) w(c) = rng.normal();
    omega.push_back(std::move(w));
  }
  const double q = sheaf_quadratic(omega, s);
  double manual = 0.0;
  for (const auto& e : g.edges)
    manual += (omega[static_cast<std::size_t>(e.first)] -
               omega[static_cast<std::size_t>(e.second)])
                  .squaredNorm();
  bool grads_ok = true;
  for (int i = 0; i < n; ++i) {
    Vector acc = Vector::Zero(27);
    for (int e_idx : s.incident[static_cast<std::size_t>(i)]) {
      const auto& e = s.edges[static_cast<std::size_t>(e_idx)];
      const int other = e.i == i ? e.j : e.i;
      acc += omega[static_cast<std::size_t>(i)] - omega[static_cast<std::size_t>(other)];
    }
    const Vector gi = sheaf_gradient(omega, s, i);
    if ((gi - acc).cwiseAbs().maxCoeff() > 1e-14) grads_ok = false;
  }
  r.pass = q == manual && grads_ok;
  r.seconds = t.elapsed();
  r.detail = "quadratic " + fmt(q) + (q == manual ? " matches bitwise" : " differs") +
             (grads_ok ? ", gradients match" : ", gradients differ");
  return r;
}

CheckResult check_degeneration_local() {
  Timer t;
  CheckResult r;
  r.name = "algorithm=local has zero communication tally";
  ExperimentConfig c = degeneration_config();
  c.train.algorithm = Algorithm::local;
  c.train.rounds = 5;
  ExperimentSetup setup = build_setup(c);
  const ResolvedSteps steps =
      resolve_steps(setup.state, setup.graph, setup.data, c.train, c.sheaf);
  const TrainResult result =
      run(std::move(setup.state), setup.graph, setup.data, c.train, steps, {});
  bool rows_zero = true;
  for (const auto& row : result.log.rows)
    if (row.comm_sheaf != 0 || row.comm_gossip != 0) rows_zero = false;
  r.pass = rows_zero && result.comm_sheaf_total == 0 && result.comm_gossip_total == 0;
  r.seconds = t.elapsed();
  r.detail = "totals sheaf=" + std::to_string(result.comm_sheaf_total) +
             " gossip=" + std::to_string(result.comm_gossip_total);
  return r;
}

// ---------------------------------------------------------------------------
// Fault injection and small-run determinism
// ---------------------------------------------------------------------------

CheckResult check_gossip_tamper() {
  Timer t;
  CheckResult r;
  r.name = "tampered gossip weights are flagged";
  const ClientGraph g =
      build_graph(3, {{0, 1}, {1, 2}}, std::vector<std::vector<int>>(3, {0}));
  MixingMatrix w = metropolis_weights(modality_subgraph(g, 0));
  const std::string clean = mixing_violation(w);
  w.w(0, 1) += 0.05;  // break symmetry and the row sum
  const std::string tampered = mixing_violation(w);
  r.pass = clean.empty() && !tampered.empty();
  r.seconds = t.elapsed();
  r.detail = clean.empty() ? "violation reported: " + tampered
                           : "clean matrix wrongly flagged: " + clean;
  return r;
}

ExperimentConfig mini_config() {
  ExperimentConfig c;
  c.n_clients = 3;
  c.edges = {{0, 1}, {1, 2}};
  c.modalities = {{0}, {0, 1}, {1}};
  c.data.latent_dim = 4;
  c.data.n_classes = 2;
  c.data.m_k = {3, 2};
  c.data.noise_std = 0.4;
  c.data.n_per_client = 30;
  c.data.heterogeneity = 0.2;
  c.model.hidden = 4;
  c.model.embed_dims = {3, 3};
  c.model.n_classes = 2;
  c.model.fusion = FusionMode::attention;
  c.sheaf.gamma = 0.5;
  c.sheaf.lambda = 0.4;
  c.sheaf.init = SheafInit::random;
  c.sheaf.sigma2 = 0.02;
  c.train.algorithm = Algorithm::sheaf_dmfl_att;
  c.train.rounds = 6;
  c.train.batch_size = 8;
  return c;
}

std::string run_to_csv(const ExperimentConfig& c) {
  ExperimentSetup setup = build_setup(c);
  const ResolvedSteps steps =
      resolve_steps(setup.state, setup.graph, setup.data, c.train, c.sheaf);
  RunLog probe;
  probe.n_modalities = setup.graph.n_modalities;
  probe.group_names.resize(setup.state.groups.size());
  std::string csv = csv_header(probe) + "\n";
  const std::string hex = hash_hex(config_hash(c));
  RunHooks hooks;
  hooks.on_row = [&csv, &hex](const RunRow& row) { csv += csv_row(row, hex) + "\n"; };
  run(std::move(setup.state), setup.graph, setup.data, c.train, steps, hooks);
  return csv;
}

CheckResult check_mini_determinism() {
  Timer t;
  CheckResult r;
  r.name = "small run byte-identical across repeats and thread counts";
  const ExperimentConfig c = mini_config();
  const std::string first = run_to_csv(c);
  const std::string second = run_to_csv(c);
  std::string threaded;
  {
    EnvGuard env("SHEAF_SIM_THREADS", "3");
    threaded = run_to_csv(c);
  }
  r.pass = first == second && first == threaded;
  r.seconds = t.elapsed();
  r.detail = r.pass ? std::to_string(first.size()) + " CSV bytes identical"
                    : "runs differ";
  return r;
}

// ---------------------------------------------------------------------------
// Reference-run machinery for the acceptance criteria
// ---------------------------------------------------------------------------

struct RunOutcome {
  TrainResult result;
  std::string csv;
  double seconds = 0.0;
};

RunOutcome execute(const ExperimentConfig& cfg, bool want_csv) {
  Timer t;
  ExperimentSetup setup = build_setup(cfg);
  const ResolvedSteps steps =
      resolve_steps(setup.state, setup.graph, setup.data, cfg.train, cfg.sheaf);
  RunLog probe;
  probe.n_modalities = setup.graph.n_modalities;
  probe.group_names.resize(setup.state.groups.size());
  RunOutcome out;
  RunHooks hooks;
  const std::string hex = hash_hex(config_hash(cfg));
  if (want_csv) {
    out.csv = csv_header(probe) + "\n";
    hooks.on_row = [&out, &hex](const RunRow& row) { out.csv += csv_row(row, hex) + "\n"; };
  }
  out.result = run(std::move(setup.state), setup.graph, setup.data, cfg.train, steps, hooks);
  out.seconds = t.elapsed();
  return out;
}

std::vector<int> member_counts(const FederationState& s) {
  std::vector<int> v_k;
  for (const auto& mix : s.mixing) v_k.push_back(static_cast<int>(mix.members.size()));
  return v_k;
}

double grand_mean(const std::vector<std::vector<double>>& per_seed_group_acc) {
  double sum = 0.0;
  int count = 0;
  for (const auto& accs : per_seed_group_acc)
    for (double a : accs) {
      sum += a;
      ++count;
    }
  return count > 0 ? sum / count : 0.0;
}

/// Mean over seeds, one value per group.
std::vector<double> group_means(const std::vector<std::vector<double>>& per_seed_group_acc) {
  std::vector<double> means;
  if (per_seed_group_acc.empty()) return means;
  means.assign(per_seed_group_acc.front().size(), 0.0);
  for (const auto& accs : per_seed_group_acc)
    for (std::size_t gi = 0; gi < accs.size(); ++gi) means[gi] += accs[gi];
  for (double& m : means) m /= static_cast<double>(per_seed_group_acc.size());
  return means;
}

std::vector<std::vector<double>> sweep_accuracies(const ExperimentConfig& base,
                                                  const std::vector<std::uint64_t>& seeds) {
  std::vector<std::vector<double>> acc;
  for (std::uint64_t s : seeds) {
    ExperimentConfig cfg = base;
    apply_sweep_seed(cfg, s);
    acc.push_back(execute(cfg, false).result.final_metrics.test_acc);
  }
  return acc;
}

}  // namespace

std::vector<CheckResult> run_fast_checks() {
  std::vector<CheckResult> out;
  out.push_back(check_gradient_fd(10));
  out.push_back(check_sheaf_algebra());
  out.push_back(check_mixing());
  out.push_back(check_degeneration_dsgd());
  out.push_back(check_degeneration_consensus());
  out.push_back(check_degeneration_local());
  out.push_back(check_gossip_tamper());
  out.push_back(check_mini_determinism());
  return out;
}

std::vector<CheckResult> run_acceptance_checks(const std::string& reference_config_path) {
  std::vector<CheckResult> out;

  CheckResult c1 = check_gradient_fd(50);
  c1.name = "01 gradient blocks match finite differences";
  out.push_back(std::move(c1));

  CheckResult c2 = check_sheaf_algebra();
  c2.name = "02 sheaf algebra against the block assembly";
  out.push_back(std::move(c2));

  CheckResult c3 = check_mixing();
  c3.name = "03 mixing-matrix assumptions";
  out.push_back(std::move(c3));

  const ExperimentConfig ref = load_config(reference_config_path, {});
  const RunOutcome reference = execute(ref, true);
  const auto& rows = reference.result.log.rows;

  {
    CheckResult r;
    r.name = "04 average-encoder update identity (every round)";
    double worst = 0.0;
    for (const auto& row : rows) worst = std::max(worst, row.lemma1_residual);
    r.pass = !rows.empty() && worst <= 1e-10;
    r.seconds = reference.seconds;
    r.detail = "max residual " + fmt(worst) + " over " + std::to_string(rows.size()) +
               " rounds (tol 1e-10)";
    out.push_back(std::move(r));
  }
  {
    CheckResult r;
    r.name = "05 monotone descent and per-round inequality";
    double max_increase = -std::numeric_limits<double>::infinity();
    double min_residual = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double next_psi =
          i + 1 < rows.size() ? rows[i + 1].psi : reference.result.final_metrics.psi;
      max_increase = std::max(max_increase, next_psi - rows[i].psi);
      min_residual = std::min(min_residual, rows[i].lemma2_residual);
    }
    r.pass = !rows.empty() && max_increase <= 1e-8 && min_residual >= -1e-8;
    r.seconds = reference.seconds;
    r.detail = "max per-round increase " + fmt(max_increase) + " (tol 1e-8), min residual " +
               fmt(min_residual) + " (tol -1e-8)";
    out.push_back(std::move(r));
  }
  {
    CheckResult r;
    r.name = "06 averaged-gradient bound with positive margin";
    const TheoremCheck tc =
        theorem1_check(reference.result.log, reference.result.steps,
                       member_counts(reference.result.state), ref.n_clients,
                       ref.train.algorithm, true);
    r.pass = tc.applicable_plain && tc.margin_plain > 0.0 && reference.seconds < 300.0;
    r.seconds = reference.seconds;
    r.detail = "lhs " + fmt(tc.lhs) + ", rhs " + fmt(tc.rhs_plain) + " (margin " +
               fmt(tc.margin_plain) + "); scaled reading rhs " + fmt(tc.rhs_scaled) +
               (tc.applicable_scaled ? "" : " (precondition fails, logged only)");
    out.push_back(std::move(r));
  }
  {
    CheckResult a = check_degeneration_dsgd();
    CheckResult b = check_degeneration_consensus();
    CheckResult c = check_degeneration_local();
    CheckResult r;
    r.name = "07 degeneration equivalences (dsgd / consensus / local)";
    r.pass = a.pass && b.pass && c.pass;
    r.seconds = a.seconds + b.seconds + c.seconds;
    r.detail = std::string(a.pass ? "dsgd ok" : "dsgd FAILED") + "; " +
               (b.pass ? "consensus ok" : "consensus FAILED") + "; " +
               (c.pass ? "local ok" : "local FAILED");
    out.push_back(std::move(r));
  }

  const std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  Timer sweep_timer;
  ExperimentConfig att_cfg = ref;
  ExperimentConfig local_cfg = ref;
  local_cfg.train.algorithm = Algorithm::local;
  ExperimentConfig dsgd_cfg = ref;
  dsgd_cfg.train.algorithm = Algorithm::dsgd;
  const auto att = sweep_accuracies(att_cfg, seeds);
  const auto local_acc = sweep_accuracies(local_cfg, seeds);
  const auto dsgd_acc = sweep_accuracies(dsgd_cfg, seeds);
  ExperimentConfig att_het = att_cfg;
  att_het.data.heterogeneity = 0.8;
  ExperimentConfig dsgd_het = dsgd_cfg;
  dsgd_het.data.heterogeneity = 0.8;
  const auto att_het_acc = sweep_accuracies(att_het, seeds);
  const auto dsgd_het_acc = sweep_accuracies(dsgd_het, seeds);
  const double sweep_seconds = sweep_timer.elapsed();

  {
    CheckResult r;
    r.name = "08 accuracy ordering across algorithms";
    const std::size_t n_groups = att.front().size();
    bool beats_local = true;
    std::string win_counts;
    for (std::size_t gi = 0; gi < n_groups; ++gi) {
      int wins = 0;
      for (std::size_t s = 0; s < seeds.size(); ++s)
        if (att[s][gi] > local_acc[s][gi]) ++wins;
      if (wins < 4) beats_local = false;
      win_counts += (gi ? "/" : "") + std::to_string(wins);
    }
    const double att_mean = grand_mean(att);
    const double dsgd_mean = grand_mean(dsgd_acc);
    const auto att_het_means = group_means(att_het_acc);
    const auto dsgd_het_means = group_means(dsgd_het_acc);
    bool het_every_group = true;
    for (std::size_t gi = 0; gi < att_het_means.size(); ++gi)
      if (att_het_means[gi] < dsgd_het_means[gi]) het_every_group = false;
    r.pass = beats_local && att_mean >= dsgd_mean && het_every_group && sweep_seconds < 600.0;
    r.seconds = sweep_seconds;
    r.detail = "wins vs local " + win_counts + " (need >=4 each); mean att " + fmt(att_mean) +
               " vs dsgd " + fmt(dsgd_mean) + "; het=0.8 per-group att>=dsgd " +
               (het_every_group ? "yes" : "NO");
    out.push_back(std::move(r));
  }
  {
    CheckResult r;
    Timer t;
    r.name = "09 stalk-ratio ablation direction";
    ExperimentConfig small_gamma = att_cfg;
    small_gamma.sheaf.gamma = 0.1;
    const auto small_acc = sweep_accuracies(small_gamma, seeds);
    const double big_mean = grand_mean(att);
    const double small_mean = grand_mean(small_acc);
    r.pass = big_mean >= small_mean;
    r.seconds = t.elapsed();
    r.detail = "gamma 0.25 mean " + fmt(big_mean) + " vs gamma 0.1 mean " + fmt(small_mean);
    out.push_back(std::move(r));
  }
  {
    CheckResult r;
    Timer t;
    r.name = "10 byte-identical logs across repeats and thread counts";
    std::string threaded;
    {
      EnvGuard env("SHEAF_SIM_THREADS", "4");
      threaded = execute(ref, true).csv;
    }
    const std::string repeat = execute(ref, true).csv;
    r.pass = reference.csv == threaded && reference.csv == repeat;
    r.seconds = t.elapsed();
    r.detail = r.pass ? std::to_string(reference.csv.size()) + " CSV bytes identical"
                      : "log bytes differ";
    out.push_back(std::move(r));
  }
  return out;
}

std::string default_reference_config() {
#ifdef SHEAFDMFL_SOURCE_DIR
  return std::string(SHEAFDMFL_SOURCE_DIR) + "/configs/reference.json";
#else
  return "configs/reference.json";
#endif
}

int report_checks(const std::vector<CheckResult>& results, std::ostream& os) {
  int failures = 0;
  for (const auto& r : results) {
    if (!r.pass) ++failures;
    char timing[32];
    std::snprintf(timing, sizeof(timing), "%7.2fs", r.seconds);
    os << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << "  (" << timing << ")  " << r.detail
       << "\n";
  }
  os << (failures == 0 ? "all checks passed" : std::to_string(failures) + " check(s) FAILED")
     << "\n";
  return failures;
}

}  // namespace sheafdmfl
