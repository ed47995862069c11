#include "sheafdmfl/trainer.hpp"

#include "sheafdmfl/errors.hpp"
#include "sheafdmfl/parallel.hpp"
#include "sheafdmfl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace sheafdmfl {

namespace {

std::span<const int> as_span(const std::vector<int>& v) { return {v.data(), v.size()}; }

bool finite(const Vector& v) { return v.allFinite(); }

void check_grads_finite(const ModelGrads& g, int round, int client) {
  bool ok = true;
  for (const auto& e : g.encoders)
    ok = ok && e.w1.allFinite() && finite(e.b1) && e.w2.allFinite() && finite(e.b2);
  for (const auto& b : g.attention) ok = ok && finite(b);
  ok = ok && g.head.w.allFinite() && finite(g.head.b);
  if (!ok)
    throw NonFiniteError("non-finite gradient at round " + std::to_string(round) + ", client " +
                         std::to_string(client));
}

std::vector<Vector> stacked_heads(const FederationState& s) {
  std::vector<Vector> omega;
  omega.reserve(s.models.size());
  for (const auto& models : s.models) omega.push_back(flatten_head(models.front().head));
  return omega;
}

int slot_of(const std::vector<int>& modalities, int modality) {
  const auto it = std::lower_bound(modalities.begin(), modalities.end(), modality);
  return static_cast<int>(it - modalities.begin());
}

// Encoder gradient for (client, modality), mirroring encoder_of's layout.
const EncoderParams& grad_encoder_of(const FederationState& s, const ClientGraph& g,
                                     const RoundWork& work, int client, int modality) {
  const int a = slot_of(g.modality_sets[static_cast<std::size_t>(client)], modality);
  const auto& grads = work.grads[static_cast<std::size_t>(client)];
  if (s.algorithm == Algorithm::dsgd) return grads[static_cast<std::size_t>(a)].encoders.front();
  return grads.front().encoders[static_cast<std::size_t>(a)];
}

// Per-modality mean of the flattened encoders, members ascending.
std::vector<Vector> modality_encoder_means(const FederationState& s, const ClientGraph& g) {
  std::vector<Vector> out(s.mixing.size());
  for (std::size_t k = 0; k < s.mixing.size(); ++k) {
    const auto& members = s.mixing[k].members;
    Vector sum;
    for (int i : members) {
      const Vector v = flatten_encoder(encoder_of(s, g, i, static_cast<int>(k)));
      if (sum.size() == 0)
        sum = v;
      else
        sum += v;
    }
    sum /= static_cast<double>(members.size());
    out[k] = std::move(sum);
  }
  return out;
}

}  // namespace

std::vector<int> round_batch(const ClientDataset& ds, const TrainConfig& cfg, int round) {
  if (cfg.full_batch || cfg.batch_size <= 0 ||
      cfg.batch_size >= static_cast<int>(ds.train_idx.size()))
    return ds.train_idx;
  std::vector<int> order = ds.train_idx;
  Rng rng(derive_seed(cfg.seeds.shuffle,
                      {static_cast<std::uint64_t>(ds.client), static_cast<std::uint64_t>(round)}));
  rng.shuffle(order);
  order.resize(static_cast<std::size_t>(cfg.batch_size));
  return order;
}

RoundWork compute_gradients(const FederationState& s, const ClientGraph& g,
                            const std::vector<ClientDataset>& data, const TrainConfig& cfg,
                            int round) {
  RoundWork work;
  const auto n = static_cast<std::size_t>(g.n_clients);
  work.batches.resize(n);
  work.grads.resize(n);
  work.losses.resize(n);
  parallel_for(g.n_clients, [&](int i) {
    const auto ui = static_cast<std::size_t>(i);
    const auto& ds = data[ui];
    work.batches[ui] = round_batch(ds, cfg, round);
    for (const auto& model : s.models[ui]) {
      auto lg =
          loss_and_grads(model, features_for(model, ds), ds.labels, as_span(work.batches[ui]));
      check_grads_finite(lg.grads, round, i);
      work.losses[ui].push_back(lg.loss);
      work.grads[ui].push_back(std::move(lg.grads));
    }
  });
  return work;
}

void local_step(FederationState& s, const ClientGraph& g, const RoundWork& work,
                const ResolvedSteps& steps) {
  parallel_for(g.n_clients, [&](int i) {
    const auto ui = static_cast<std::size_t>(i);
    auto& models = s.models[ui];
    for (std::size_t a = 0; a < models.size(); ++a) {
      auto& m = models[a];
      const auto& gr = work.grads[ui][a];
      for (std::size_t e = 0; e < m.encoders.size(); ++e) {
        const double eta = steps.eta_phi[static_cast<std::size_t>(m.modalities[e])];
        m.encoders[e].w1 -= eta * gr.encoders[e].w1;
        m.encoders[e].b1 -= eta * gr.encoders[e].b1;
        m.encoders[e].w2 -= eta * gr.encoders[e].w2;
        m.encoders[e].b2 -= eta * gr.encoders[e].b2;
      }
      for (std::size_t e = 0; e < m.attention.size(); ++e)
        m.attention[e] -= steps.eta_beta * gr.attention[e];
    }
  });
}

std::uint64_t gossip_encoders(FederationState& s, const ClientGraph& g) {
  if (s.algorithm == Algorithm::local)
    throw ConfigError("the local baseline does not gossip");
  // Mixing reads a frozen snapshot of the intermediate parameters.
  std::vector<std::vector<Vector>> snap(s.mixing.size());
  for (std::size_t k = 0; k < s.mixing.size(); ++k) {
    const auto& mix = s.mixing[k];
    snap[k].reserve(mix.members.size());
    for (int i : mix.members)
      snap[k].push_back(flatten_encoder(encoder_of(s, g, i, static_cast<int>(k))));
  }
  std::uint64_t payload = 0;
  for (std::size_t k = 0; k < s.mixing.size(); ++k) {
    const auto& mix = s.mixing[k];
    const auto& sk = snap[k];
    const auto members = static_cast<int>(mix.members.size());
    std::uint64_t directed_edges = 0;
    for (int a = 0; a < members; ++a) {
      Vector mixed = Vector::Zero(sk.front().size());
      for (int b = 0; b < members; ++b) {
        const double w = mix.w(a, b);
        if (w == 0.0) continue;
        mixed += w * sk[static_cast<std::size_t>(b)];
        if (a != b) ++directed_edges;
      }
      set_encoder(encoder_of(s, g, mix.members[static_cast<std::size_t>(a)], static_cast<int>(k)),
                  mixed);
    }
    // One encoder crosses the network per directed subgraph edge.
    payload += directed_edges * static_cast<std::uint64_t>(sk.front().size());
  }
  return payload;
}

std::uint64_t update_heads(FederationState& s, const ClientGraph& g, const RoundWork& work,
                           const ResolvedSteps& steps, bool dsgd_head_gossip) {
  const bool sheaf_term = is_sheaf(s.algorithm) && steps.lambda != 0.0;
  std::vector<Vector> omega;
  if (sheaf_term) omega = stacked_heads(s);

  parallel_for(g.n_clients, [&](int i) {
    const auto ui = static_cast<std::size_t>(i);
    auto& models = s.models[ui];
    for (std::size_t a = 0; a < models.size(); ++a) {
      Vector grad = flatten_head(work.grads[ui][a].head);
      if (sheaf_term) grad += steps.lambda * sheaf_gradient(omega, s.sheaf, i);
      const Vector w = flatten_head(models[a].head) - steps.alpha * grad;
      set_head(models[a].head, w);
    }
  });

  if (s.algorithm != Algorithm::dsgd || !dsgd_head_gossip) return 0;
  // Head averaging within identical-modality-set groups, one slot at a time.
  std::uint64_t payload = 0;
  for (const auto& grp : s.groups) {
    const auto size = static_cast<std::uint64_t>(grp.members.size());
    if (size < 2) continue;
    const auto& first = s.models[static_cast<std::size_t>(grp.members.front())];
    for (std::size_t a = 0; a < first.size(); ++a) {
      Vector mean = Vector::Zero(flatten_head(first[a].head).size());
      for (int i : grp.members) mean += flatten_head(s.models[static_cast<std::size_t>(i)][a].head);
      mean /= static_cast<double>(size);
      for (int i : grp.members) set_head(s.models[static_cast<std::size_t>(i)][a].head, mean);
      payload += size * (size - 1) * static_cast<std::uint64_t>(mean.size());
    }
  }
  return payload;
}

std::uint64_t exchange_and_update_maps(FederationState& s, const ResolvedSteps& steps) {
  if (!is_sheaf(s.algorithm)) return 0;
  s.sheaf.lambda = steps.lambda;
  s.sheaf.eta = steps.eta_p;
  s.sheaf = update_restriction_maps(s.sheaf, stacked_heads(s));
  // Each ordered incidence exchanges a stalk-dimensional projection twice
  // per round (pre- and post-update heads), even when the map step is a
  // no-op, so the tally is a closed-form function of graph and gamma.
  std::uint64_t payload = 0;
  for (const auto& e : s.sheaf.edges) payload += 4ull * static_cast<std::uint64_t>(e.stalk_dim);
  return payload;
}

namespace {

double monitor(double initial_norm) { return std::max(10.0 * initial_norm, 1.0); }

}  // namespace

ResolvedSteps resolve_steps(const FederationState& s, const ClientGraph& g,
                            const std::vector<ClientDataset>& data, const TrainConfig& cfg,
                            const SheafSettings& sheaf_cfg) {
  ResolvedSteps out;
  out.lambda = is_sheaf(cfg.algorithm) ? sheaf_cfg.lambda : 0.0;

  // Smoothness estimate: three times the largest Gauss-Newton spectral norm
  // over every deployed model at the start point, full train batch. The
  // start-point curvature understates what the trajectory visits once logits
  // sharpen, so the multiple leaves headroom for the descent inequality.
  std::vector<double> l_per_client(static_cast<std::size_t>(g.n_clients), 0.0);
  parallel_for(g.n_clients, [&](int i) {
    const auto ui = static_cast<std::size_t>(i);
    const auto& ds = data[ui];
    double l = 0.0;
    for (const auto& m : s.models[ui])
      l = std::max(l, gauss_newton_spectral_norm(m, features_for(m, ds), ds.labels,
                                                 as_span(ds.train_idx)));
    l_per_client[ui] = l;
  });
  double gn = 0.0;
  for (double l : l_per_client) gn = std::max(gn, l);
  out.l_hat = 3.0 * gn;
  if (!(out.l_hat > 0.0) || !std::isfinite(out.l_hat))
    throw NumericError("smoothness estimate failed: L_hat = " + std::to_string(out.l_hat));

  out.alpha = cfg.alpha > 0.0 ? cfg.alpha : 1.0 / out.l_hat;
  out.eta_beta = cfg.eta_beta > 0.0 ? cfg.eta_beta : 1.0 / out.l_hat;
  out.eta_phi.assign(static_cast<std::size_t>(g.n_modalities), 0.0);
  for (int k = 0; k < g.n_modalities; ++k) {
    const double vk = static_cast<double>(s.mixing[static_cast<std::size_t>(k)].members.size());
    out.eta_phi[static_cast<std::size_t>(k)] = cfg.eta_phi > 0.0 ? cfg.eta_phi : vk / out.l_hat;
  }

  // Norm monitors from the initial parameters.
  double head0 = 0.0, beta0 = 0.0;
  std::vector<double> phi0(static_cast<std::size_t>(g.n_modalities), 0.0);
  for (int i = 0; i < g.n_clients; ++i) {
    for (const auto& m : s.models[static_cast<std::size_t>(i)]) {
      head0 = std::max(head0, flatten_head(m.head).norm());
      for (const auto& b : m.attention) beta0 = std::max(beta0, b.norm());
      for (std::size_t e = 0; e < m.encoders.size(); ++e) {
        auto& slot = phi0[static_cast<std::size_t>(m.modalities[e])];
        slot = std::max(slot, flatten_encoder(m.encoders[e]).norm());
      }
    }
  }
  out.d_omega_hat = monitor(head0);
  out.d_beta_hat = monitor(beta0);
  out.d_phi_hat.resize(phi0.size());
  for (std::size_t k = 0; k < phi0.size(); ++k) out.d_phi_hat[k] = monitor(phi0[k]);

  if (out.lambda > 0.0)
    out.eta_p = sheaf_cfg.eta > 0.0 ? sheaf_cfg.eta
                                    : 1.0 / (out.lambda * out.d_omega_hat * out.d_omega_hat);
  else
    out.eta_p = 0.0;
  return out;
}

TrainResult run(FederationState state, const ClientGraph& g,
                const std::vector<ClientDataset>& data, const TrainConfig& cfg,
                const ResolvedSteps& steps, const RunHooks& hooks) {
  state.sheaf.lambda = steps.lambda;
  state.sheaf.eta = steps.eta_p;

  TrainResult result;
  result.log.n_modalities = g.n_modalities;
  for (const auto& grp : state.groups) {
    std::string name;
    for (int k : grp.modalities) name += (name.empty() ? "" : "+") + std::to_string(k);
    result.log.group_names.push_back(name);
  }
  std::vector<int> v_k(state.mixing.size());
  for (std::size_t k = 0; k < state.mixing.size(); ++k)
    v_k[k] = static_cast<int>(state.mixing[k].members.size());

  MetricsSnapshot entering = compute_metrics(state, g, data, state.round);

  for (int round = state.round; round < cfg.rounds; ++round) {
    const auto work = compute_gradients(state, g, data, cfg, round);

    // The descent-lemma head term uses the realized head change and the
    // gossip identity uses the realized encoder means, so snapshot both.
    std::vector<Vector> omega_before;
    omega_before.reserve(state.models.size());
    for (const auto& models : state.models) {
      int total = 0;
      for (const auto& m : models) total += head_dim(m);
      Vector v(total);
      int off = 0;
      for (const auto& m : models) {
        const Vector h = flatten_head(m.head);
        v.segment(off, h.size()) = h;
        off += static_cast<int>(h.size());
      }
      omega_before.push_back(std::move(v));
    }
    const auto mean_before = modality_encoder_means(state, g);

    local_step(state, g, work, steps);
    std::uint64_t gossip_payload = 0;
    if (state.algorithm != Algorithm::local) gossip_payload = gossip_encoders(state, g);
    gossip_payload += update_heads(state, g, work, steps, cfg.dsgd_head_gossip);
    const std::uint64_t sheaf_payload = exchange_and_update_maps(state, steps);
    state.round = round + 1;

    // Gossip identity: the modality mean moves by exactly minus step times
    // the mean applied gradient (double stochasticity preserves means).
    const auto mean_after = modality_encoder_means(state, g);
    double lemma1 = 0.0;
    for (std::size_t k = 0; k < state.mixing.size(); ++k) {
      const auto& members = state.mixing[k].members;
      Vector gmean;
      for (int i : members) {
        const Vector v =
            flatten_encoder(grad_encoder_of(state, g, work, i, static_cast<int>(k)));
        if (gmean.size() == 0)
          gmean = v;
        else
          gmean += v;
      }
      gmean /= static_cast<double>(members.size());
      const Vector resid = mean_after[k] - mean_before[k] + steps.eta_phi[k] * gmean;
      lemma1 = std::max(lemma1, resid.cwiseAbs().maxCoeff());
    }

    std::vector<Vector> omega_delta(omega_before.size());
    for (std::size_t i = 0; i < omega_before.size(); ++i) {
      int off = 0;
      Vector now(omega_before[i].size());
      for (const auto& m : state.models[i]) {
        const Vector h = flatten_head(m.head);
        now.segment(off, h.size()) = h;
        off += static_cast<int>(h.size());
      }
      omega_delta[i] = now - omega_before[i];
    }

    MetricsSnapshot next = compute_metrics(state, g, data, state.round);

    RunRow row;
    row.round = round;
    row.psi = entering.psi;
    row.loss_sum = entering.loss_sum;
    row.quad = entering.quad;
    row.grad_total = entering.blocks.total();
    row.grad_omega = entering.blocks.omega;
    row.grad_beta = entering.blocks.beta;
    row.grad_p = entering.blocks.p;
    row.grad_phi = entering.blocks.phi;
    row.lemma1_residual = lemma1;
    const auto l2 = lemma2_residual(entering, next, omega_delta, steps, v_k);
    row.lemma2_residual = l2.residual;
    row.lemma2_residual_stated = l2.residual_stated;
    row.train_acc = entering.train_acc;
    row.test_acc = entering.test_acc;
    row.comm_sheaf = sheaf_payload;
    row.comm_gossip = gossip_payload;
    row.max_head_norm = entering.max_head_norm;
    result.comm_sheaf_total += sheaf_payload;
    result.comm_gossip_total += gossip_payload;
    if (entering.max_head_norm > steps.d_omega_hat) result.head_bound_violated = true;
    if (entering.max_beta_norm > steps.d_beta_hat) result.encoder_bound_violated = true;
    for (std::size_t k = 0; k < entering.max_phi_norm.size(); ++k)
      if (entering.max_phi_norm[k] > steps.d_phi_hat[k]) result.encoder_bound_violated = true;

    result.log.rows.push_back(row);
    if (hooks.on_row) hooks.on_row(row);
    if (hooks.on_state) hooks.on_state(state.round, state);
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 &&
        state.round % hooks.checkpoint_every == 0 && state.round < cfg.rounds)
      hooks.on_checkpoint(state.round, state, steps);

    entering = std::move(next);
  }

  result.final_metrics = std::move(entering);
  result.steps = steps;
  result.state = std::move(state);
  return result;
}

namespace {

constexpr std::uint64_t kCheckpointMagic = 0x53484d464c434b31ull;
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_u64(std::ofstream& f, std::uint64_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_f64(std::ofstream& f, double v) { f.write(reinterpret_cast<const char*>(&v), sizeof v); }
void put_vec(std::ofstream& f, const Vector& v) {
  put_u64(f, static_cast<std::uint64_t>(v.size()));
  f.write(reinterpret_cast<const char*>(v.data()),
          static_cast<std::streamsize>(sizeof(double)) * v.size());
}
void put_mat(std::ofstream& f, const Matrix& m) {
  put_u64(f, static_cast<std::uint64_t>(m.rows()));
  put_u64(f, static_cast<std::uint64_t>(m.cols()));
  f.write(reinterpret_cast<const char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double)) * m.size());
}
void put_str(std::ofstream& f, const std::string& s) {
  put_u64(f, s.size());
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::ifstream& f) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
std::uint64_t get_u64(std::ifstream& f) {
  std::uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
double get_f64(std::ifstream& f) {
  double v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
Vector get_vec(std::ifstream& f) {
  Vector v(static_cast<Eigen::Index>(get_u64(f)));
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(double)) * v.size());
  return v;
}
Matrix get_mat(std::ifstream& f) {
  const auto rows = static_cast<Eigen::Index>(get_u64(f));
  const auto cols = static_cast<Eigen::Index>(get_u64(f));
  Matrix m(rows, cols);
  f.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double)) * m.size());
  return m;
}
std::string get_str(std::ifstream& f) {
  std::string s(get_u64(f), '\0');
  f.read(s.data(), static_cast<std::streamsize>(s.size()));
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, std::uint64_t config_hash, int round,
                     const ResolvedSteps& steps, const FederationState& state,
                     const std::vector<std::string>& csv_rows) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot open checkpoint for writing: " + path);
  put_u64(f, kCheckpointMagic);
  put_u32(f, kCheckpointVersion);
  put_u64(f, config_hash);
  put_u32(f, static_cast<std::uint32_t>(round));

  put_f64(f, steps.alpha);
  put_f64(f, steps.eta_beta);
  put_f64(f, steps.eta_p);
  put_f64(f, steps.lambda);
  put_f64(f, steps.l_hat);
  put_f64(f, steps.d_omega_hat);
  put_f64(f, steps.d_beta_hat);
  put_u64(f, steps.eta_phi.size());
  for (double v : steps.eta_phi) put_f64(f, v);
  for (double v : steps.d_phi_hat) put_f64(f, v);

  put_u64(f, state.models.size());
  for (const auto& models : state.models) {
    put_u64(f, models.size());
    for (const auto& m : models) put_vec(f, flatten(m));
  }
  put_u64(f, state.sheaf.edges.size());
  for (const auto& e : state.sheaf.edges) {
    put_mat(f, e.map_ij);
    put_mat(f, e.map_ji);
  }
  put_u64(f, csv_rows.size());
  for (const auto& row : csv_rows) put_str(f, row);
  if (!f) throw ConfigError("checkpoint write failed: " + path);
}

CheckpointData load_checkpoint(const std::string& path, std::uint64_t config_hash,
                               FederationState& state) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint: " + path);
  if (get_u64(f) != kCheckpointMagic) throw ConfigError("not a checkpoint file: " + path);
  if (get_u32(f) != kCheckpointVersion) throw ConfigError("unsupported checkpoint version");
  if (get_u64(f) != config_hash)
    throw ConfigError("checkpoint was written under a different configuration");

  CheckpointData out;
  out.round = static_cast<int>(get_u32(f));

  out.steps.alpha = get_f64(f);
  out.steps.eta_beta = get_f64(f);
  out.steps.eta_p = get_f64(f);
  out.steps.lambda = get_f64(f);
  out.steps.l_hat = get_f64(f);
  out.steps.d_omega_hat = get_f64(f);
  out.steps.d_beta_hat = get_f64(f);
  const auto n_mod = get_u64(f);
  out.steps.eta_phi.resize(n_mod);
  for (auto& v : out.steps.eta_phi) v = get_f64(f);
  out.steps.d_phi_hat.resize(n_mod);
  for (auto& v : out.steps.d_phi_hat) v = get_f64(f);

  if (get_u64(f) != state.models.size()) throw ConfigError("checkpoint client count mismatch");
  for (auto& models : state.models) {
    if (get_u64(f) != models.size()) throw ConfigError("checkpoint model count mismatch");
    for (auto& m : models) {
      const Vector v = get_vec(f);
      if (v.size() != param_count(m)) throw ConfigError("checkpoint parameter shape mismatch");
      unflatten(m, v);
    }
  }
  if (get_u64(f) != state.sheaf.edges.size()) throw ConfigError("checkpoint edge count mismatch");
  for (auto& e : state.sheaf.edges) {
    const Matrix a = get_mat(f);
    const Matrix b = get_mat(f);
    if (a.rows() != e.map_ij.rows() || a.cols() != e.map_ij.cols() ||
        b.rows() != e.map_ji.rows() || b.cols() != e.map_ji.cols())
      throw ConfigError("checkpoint map shape mismatch");
    e.map_ij = a;
    e.map_ji = b;
  }
  const auto n_rows = get_u64(f);
  out.csv_rows.resize(n_rows);
  for (auto& row : out.csv_rows) row = get_str(f);
  if (!f) throw ConfigError("truncated checkpoint: " + path);
  state.round = out.round;
  return out;
}

}  // namespace sheafdmfl
