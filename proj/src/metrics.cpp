#include "sheafdmfl/metrics.hpp"

#include "sheafdmfl/errors.hpp"
#include "sheafdmfl/parallel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

namespace sheafdmfl {

double BlockNorms::total() const {
  double t = omega + beta + p;
  for (double v : phi) t += v;
  return t;
}

namespace {

// Per-modality average of the flattened encoder parameters, summed in
// ascending member order.
std::vector<Vector> encoder_averages(const FederationState& s, const ClientGraph& g) {
  std::vector<Vector> phi_bar(static_cast<std::size_t>(g.n_modalities));
  for (int k = 0; k < g.n_modalities; ++k) {
    const auto& members = s.mixing[static_cast<std::size_t>(k)].members;
    Vector sum;
    for (int i : members) {
      const Vector v = flatten_encoder(encoder_of(s, g, i, k));
      if (sum.size() == 0)
        sum = v;
      else
        sum += v;
    }
    if (sum.size() != 0) sum /= static_cast<double>(members.size());
    phi_bar[static_cast<std::size_t>(k)] = std::move(sum);
  }
  return phi_bar;
}

// Client models with every encoder replaced by its modality average.
std::vector<ClientModel> tilde_models(const FederationState& s, const ClientGraph& g, int client,
                                      const std::vector<Vector>& phi_bar) {
  std::vector<ClientModel> out = s.models[static_cast<std::size_t>(client)];
  const auto& set = g.modality_sets[static_cast<std::size_t>(client)];
  for (std::size_t a = 0; a < set.size(); ++a) {
    const int k = set[a];
    EncoderParams& enc = s.algorithm == Algorithm::dsgd ? out[a].encoders.front()
                                                        : out.front().encoders[a];
    set_encoder(enc, phi_bar[static_cast<std::size_t>(k)]);
  }
  return out;
}

std::span<const int> as_span(const std::vector<int>& v) { return {v.data(), v.size()}; }

struct ClientEval {
  double loss = 0.0;
  std::vector<Vector> enc_grads;   // per slot for the client's modality list
  std::vector<Vector> beta_grads;  // per slot, attention mode
  Vector head_grad;                // models stacked
  std::vector<double> train_acc;   // per model (dsgd) or single entry
  std::vector<double> test_acc;
};

ClientEval eval_client(const FederationState& s, const ClientGraph& g,
                       const std::vector<ClientDataset>& data,
                       const std::vector<Vector>& phi_bar, int i) {
  const auto& ds = data[static_cast<std::size_t>(i)];
  const auto tilde = tilde_models(s, g, i, phi_bar);
  const auto& deployed = s.models[static_cast<std::size_t>(i)];
  ClientEval ev;

  int head_total = 0;
  for (const auto& m : tilde) head_total += head_dim(m);
  ev.head_grad.resize(head_total);

  int head_off = 0;
  for (std::size_t a = 0; a < tilde.size(); ++a) {
    const auto feats = features_for(tilde[a], ds);
    const auto lg = loss_and_grads(tilde[a], feats, ds.labels, as_span(ds.train_idx));
    ev.loss += lg.loss;
    for (const auto& enc : lg.grads.encoders) ev.enc_grads.push_back(flatten_encoder(enc));
    for (const auto& b : lg.grads.attention) ev.beta_grads.push_back(b);
    const Vector hg = flatten_head(lg.grads.head);
    ev.head_grad.segment(head_off, hg.size()) = hg;
    head_off += static_cast<int>(hg.size());

    const auto dfeats = features_for(deployed[a], ds);
    ev.train_acc.push_back(accuracy(deployed[a], dfeats, ds.labels, as_span(ds.train_idx)));
    ev.test_acc.push_back(ds.test_idx.empty()
                              ? std::numeric_limits<double>::quiet_NaN()
                              : accuracy(deployed[a], dfeats, ds.labels, as_span(ds.test_idx)));
  }
  return ev;
}

}  // namespace

MetricsSnapshot compute_metrics(const FederationState& s, const ClientGraph& g,
                                const std::vector<ClientDataset>& data, int round) {
  const auto phi_bar = encoder_averages(s, g);
  std::vector<ClientEval> evals(static_cast<std::size_t>(g.n_clients));
  parallel_for(g.n_clients,
               [&](int i) { evals[static_cast<std::size_t>(i)] = eval_client(s, g, data, phi_bar, i); });

  MetricsSnapshot m;
  m.max_phi_norm.assign(static_cast<std::size_t>(g.n_modalities), 0.0);
  m.head_loss_grads.reserve(static_cast<std::size_t>(g.n_clients));

  // Loss sum and the stacked loss-only head gradients, ascending clients.
  for (int i = 0; i < g.n_clients; ++i) {
    m.loss_sum += evals[static_cast<std::size_t>(i)].loss;
    m.head_loss_grads.push_back(evals[static_cast<std::size_t>(i)].head_grad);
  }

  // Encoder blocks: gradient w.r.t. the shared per-modality average is the
  // sum of the member gradients.
  m.blocks.phi.assign(static_cast<std::size_t>(g.n_modalities), 0.0);
  for (int k = 0; k < g.n_modalities; ++k) {
    Vector sum;
    for (int i = 0; i < g.n_clients; ++i) {
      const auto& set = g.modality_sets[static_cast<std::size_t>(i)];
      const auto it = std::lower_bound(set.begin(), set.end(), k);
      if (it == set.end() || *it != k) continue;
      const auto& v =
          evals[static_cast<std::size_t>(i)].enc_grads[static_cast<std::size_t>(it - set.begin())];
      if (sum.size() == 0)
        sum = v;
      else
        sum += v;
    }
    if (sum.size() != 0) m.blocks.phi[static_cast<std::size_t>(k)] = sum.squaredNorm();
  }

  for (const auto& ev : evals)
    for (const auto& b : ev.beta_grads) m.blocks.beta += b.squaredNorm();

  // Head block: loss part plus, for sheaf runs, the coupling gradient.
  std::vector<Vector> omega;
  if (is_sheaf(s.algorithm)) {
    omega.reserve(static_cast<std::size_t>(g.n_clients));
    for (int i = 0; i < g.n_clients; ++i)
      omega.push_back(flatten_head(s.models[static_cast<std::size_t>(i)].front().head));
  }
  for (int i = 0; i < g.n_clients; ++i) {
    Vector hg = evals[static_cast<std::size_t>(i)].head_grad;
    if (is_sheaf(s.algorithm) && s.sheaf.lambda != 0.0)
      hg += s.sheaf.lambda * sheaf_gradient(omega, s.sheaf, i);
    m.blocks.omega += hg.squaredNorm();
  }

  // Map block and the quadratic, one pass over the edges.
  if (is_sheaf(s.algorithm)) {
    for (const auto& e : s.sheaf.edges) {
      const Vector r = e.map_ij * omega[static_cast<std::size_t>(e.i)] -
                       e.map_ji * omega[static_cast<std::size_t>(e.j)];
      m.quad += r.squaredNorm();
      m.blocks.p += s.sheaf.lambda * s.sheaf.lambda * r.squaredNorm() *
                    (omega[static_cast<std::size_t>(e.i)].squaredNorm() +
                     omega[static_cast<std::size_t>(e.j)].squaredNorm());
    }
  }
  m.psi = m.loss_sum + 0.5 * s.sheaf.lambda * m.quad;
  if (!std::isfinite(m.psi))
    throw NonFiniteError("objective is not finite at round " + std::to_string(round));

  // Group accuracies: member means; dsgd reports the best modality.
  for (const auto& grp : s.groups) {
    const std::size_t n_models = s.models[static_cast<std::size_t>(grp.members.front())].size();
    double best_train = -1.0, best_test = -1.0;
    for (std::size_t a = 0; a < n_models; ++a) {
      double tr = 0.0, te = 0.0;
      for (int i : grp.members) {
        tr += evals[static_cast<std::size_t>(i)].train_acc[a];
        te += evals[static_cast<std::size_t>(i)].test_acc[a];
      }
      tr /= static_cast<double>(grp.members.size());
      te /= static_cast<double>(grp.members.size());
      best_train = std::max(best_train, tr);
      best_test = std::max(best_test, te);
    }
    m.train_acc.push_back(best_train);
    m.test_acc.push_back(best_test);
  }
  for (int i = 0; i < g.n_clients; ++i) {
    const auto& accs = evals[static_cast<std::size_t>(i)].test_acc;
    m.client_test_acc.push_back(*std::max_element(accs.begin(), accs.end()));
  }

  // Norm monitors on the deployed parameters.
  for (int i = 0; i < g.n_clients; ++i) {
    for (const auto& model : s.models[static_cast<std::size_t>(i)]) {
      m.max_head_norm = std::max(m.max_head_norm, flatten_head(model.head).norm());
      for (const auto& b : model.attention) m.max_beta_norm = std::max(m.max_beta_norm, b.norm());
    }
    for (int k : g.modality_sets[static_cast<std::size_t>(i)]) {
      auto& slot = m.max_phi_norm[static_cast<std::size_t>(k)];
      slot = std::max(slot, flatten_encoder(encoder_of(s, g, i, k)).norm());
    }
  }
  return m;
}

double global_objective(const FederationState& s, const ClientGraph& g,
                        const std::vector<ClientDataset>& data) {
  const auto phi_bar = encoder_averages(s, g);
  double loss = 0.0;
  for (int i = 0; i < g.n_clients; ++i) {
    const auto tilde = tilde_models(s, g, i, phi_bar);
    const auto& ds = data[static_cast<std::size_t>(i)];
    for (const auto& model : tilde)
      loss += batch_loss(model, features_for(model, ds), ds.labels, as_span(ds.train_idx));
  }
  if (!is_sheaf(s.algorithm)) return loss;
  std::vector<Vector> omega;
  for (int i = 0; i < g.n_clients; ++i)
    omega.push_back(flatten_head(s.models[static_cast<std::size_t>(i)].front().head));
  return loss + 0.5 * s.sheaf.lambda * sheaf_quadratic(omega, s.sheaf);
}

Lemma2Terms lemma2_residual(const MetricsSnapshot& prev, const MetricsSnapshot& next,
                            const std::vector<Vector>& omega_delta, const ResolvedSteps& steps,
                            const std::vector<int>& v_k) {
  const double f_prev = prev.psi - 0.5 * steps.lambda * prev.quad;
  const double f_next = next.psi - 0.5 * steps.lambda * next.quad;
  const double l = steps.l_hat;

  const double beta_term = steps.eta_beta * (1.0 - l * steps.eta_beta / 2.0) * prev.blocks.beta;

  // The encoder descent measured against the gradient w.r.t. the shared
  // average (phi block of the global objective). The "stated" variant keys
  // the printed |V_k|^2 coefficient to the average member gradient instead.
  double phi_term = 0.0;
  double phi_term_stated = 0.0;
  for (std::size_t k = 0; k < v_k.size(); ++k) {
    const double vk = static_cast<double>(v_k[k]);
    if (vk == 0.0) continue;
    const double eta = steps.eta_phi[k];
    const double damp = 1.0 - l * eta / (2.0 * vk);
    phi_term += (eta / vk) * damp * prev.blocks.phi[k];
    phi_term_stated += eta * vk * vk * damp * (prev.blocks.phi[k] / (vk * vk));
  }

  double omega_term = 0.0;
  double delta_sq = 0.0;
  for (std::size_t i = 0; i < omega_delta.size(); ++i) {
    omega_term += prev.head_loss_grads[i].dot(omega_delta[i]);
    delta_sq += omega_delta[i].squaredNorm();
  }
  omega_term += 0.5 * l * delta_sq;

  Lemma2Terms out;
  out.residual = (f_prev - beta_term - phi_term + omega_term) - f_next;
  out.residual_stated = (f_prev - beta_term - phi_term_stated + omega_term) - f_next;
  return out;
}

namespace {

void append_double(std::string& s, double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  s.append(buf, res.ptr);
}

void append_u64(std::string& s, std::uint64_t v) {
  char buf[24];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  s.append(buf, res.ptr);
}

}  // namespace

std::string csv_header(const RunLog& log) {
  std::string h = "round,psi,loss_sum,sheaf_quad,grad_sq_total,grad_sq_omega,grad_sq_beta,grad_sq_p";
  for (int k = 0; k < log.n_modalities; ++k) h += ",grad_sq_phi" + std::to_string(k);
  h += ",lemma1_residual,lemma2_residual,lemma2_residual_stated";
  for (std::size_t g = 0; g < log.group_names.size(); ++g) h += ",train_acc_g" + std::to_string(g);
  for (std::size_t g = 0; g < log.group_names.size(); ++g) h += ",test_acc_g" + std::to_string(g);
  h += ",comm_sheaf,comm_gossip,max_head_norm,config_hash";
  return h;
}

std::string csv_row(const RunRow& r, const std::string& config_hash) {
  std::string s;
  s.reserve(512);
  append_u64(s, static_cast<std::uint64_t>(r.round));
  for (double v : {r.psi, r.loss_sum, r.quad, r.grad_total, r.grad_omega, r.grad_beta, r.grad_p}) {
    s.push_back(',');
    append_double(s, v);
  }
  for (double v : r.grad_phi) {
    s.push_back(',');
    append_double(s, v);
  }
  for (double v : {r.lemma1_residual, r.lemma2_residual, r.lemma2_residual_stated}) {
    s.push_back(',');
    append_double(s, v);
  }
  for (double v : r.train_acc) {
    s.push_back(',');
    append_double(s, v);
  }
  for (double v : r.test_acc) {
    s.push_back(',');
    append_double(s, v);
  }
  s.push_back(',');
  append_u64(s, r.comm_sheaf);
  s.push_back(',');
  append_u64(s, r.comm_gossip);
  s.push_back(',');
  append_double(s, r.max_head_norm);
  s.push_back(',');
  s += config_hash;
  return s;
}

TheoremCheck theorem1_check(const RunLog& log, const ResolvedSteps& steps,
                            const std::vector<int>& v_k, int n_clients, Algorithm algorithm,
                            bool attention) {
  TheoremCheck out;
  if (log.rows.empty()) return out;
  const double r_count = static_cast<double>(log.rows.size());
  for (const auto& row : log.rows) out.lhs += row.grad_total;
  out.lhs /= r_count;

  const double l = steps.l_hat;
  double rho = steps.alpha * (1.0 - l * steps.alpha / 2.0);
  if (attention) rho = std::min(rho, steps.eta_beta * (1.0 - l * steps.eta_beta / 2.0));
  for (std::size_t k = 0; k < v_k.size(); ++k) {
    const double vk = static_cast<double>(v_k[k]);
    if (vk == 0.0) continue;
    const double eta = steps.eta_phi[k];
    rho = std::min(rho, (eta / vk) * (1.0 - l * eta / (2.0 * vk)));
  }

  const bool has_maps = is_sheaf(algorithm) && steps.lambda > 0.0 && steps.eta_p > 0.0;
  const double d2 = steps.d_omega_hat * steps.d_omega_hat;
  double rho_plain = rho;
  double rho_scaled = rho;
  if (has_maps) {
    rho_plain = std::min(rho, steps.eta_p * (1.0 - steps.eta_p * steps.lambda * d2 / 2.0));
    rho_scaled = std::min(rho, steps.eta_p * (1.0 - steps.eta_p * steps.lambda *
                                                        static_cast<double>(n_clients) * d2 / 2.0));
  }
  out.rho_plain = rho_plain;
  out.rho_scaled = rho_scaled;
  out.applicable_plain = rho_plain > 0.0;
  out.applicable_scaled = rho_scaled > 0.0;
  const double psi0 = log.rows.front().psi;
  if (out.applicable_plain) {
    out.rhs_plain = psi0 / (rho_plain * r_count);
    out.margin_plain = out.rhs_plain - out.lhs;
  }
  if (out.applicable_scaled) {
    out.rhs_scaled = psi0 / (rho_scaled * r_count);
    out.margin_scaled = out.rhs_scaled - out.lhs;
  }
  return out;
}

}  // namespace sheafdmfl
