#pragma once

#include "sheafdmfl/state.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sheafdmfl {

/// Squared gradient norms of the global objective at the averaged-encoder
/// point, split by parameter block.
struct BlockNorms {
  double omega = 0.0;
  double beta = 0.0;
  double p = 0.0;
  std::vector<double> phi;  // per modality, gradient w.r.t. the shared average
  double total() const;
};

/// Everything measured at one federation state: objective pieces at the
/// averaged-encoder point, block gradient norms there, accuracies of the
/// deployed per-client models, and norm monitors.
struct MetricsSnapshot {
  double psi = 0.0;       // sum of client losses + (lambda/2) * sheaf quadratic
  double loss_sum = 0.0;  // at averaged encoders
  double quad = 0.0;
  BlockNorms blocks;
  std::vector<Vector> head_loss_grads;  // per client, loss part only, models stacked
  std::vector<double> train_acc;        // per group
  std::vector<double> test_acc;         // per group
  std::vector<double> client_test_acc;  // per client
  double max_head_norm = 0.0;
  double max_beta_norm = 0.0;
  std::vector<double> max_phi_norm;  // per modality
};

/// Full evaluation at the current state. Group accuracy is the member mean;
/// dsgd groups report the best modality (max over per-modality group
/// means, and per client the best unimodal model). Throws NonFiniteError
/// naming the round if the objective leaves IEEE range.
MetricsSnapshot compute_metrics(const FederationState& s, const ClientGraph& g,
                                const std::vector<ClientDataset>& data, int round);

/// Objective at the averaged-encoder point only (no gradients).
double global_objective(const FederationState& s, const ClientGraph& g,
                        const std::vector<ClientDataset>& data);

struct Lemma2Terms {
  double residual = 0.0;         // derivable per-round descent inequality
  double residual_stated = 0.0;  // printed coefficient, average-gradient reading
};

/// RHS - LHS of the per-round descent inequality for the transition between
/// two measured states. omega_delta holds per-client stacked head changes;
/// v_k the per-modality member counts. Non-negative residual confirms the
/// inequality for that round.
Lemma2Terms lemma2_residual(const MetricsSnapshot& prev, const MetricsSnapshot& next,
                            const std::vector<Vector>& omega_delta, const ResolvedSteps& steps,
                            const std::vector<int>& v_k);

/// One emitted row per round; metrics describe the state entering the
/// round, the residual/communication fields the transition out of it.
struct RunRow {
  int round = 0;
  double psi = 0.0;
  double loss_sum = 0.0;
  double quad = 0.0;
  double grad_total = 0.0;
  double grad_omega = 0.0;
  double grad_beta = 0.0;
  double grad_p = 0.0;
  std::vector<double> grad_phi;
  double lemma1_residual = 0.0;
  double lemma2_residual = 0.0;
  double lemma2_residual_stated = 0.0;
  std::vector<double> train_acc;
  std::vector<double> test_acc;
  std::uint64_t comm_sheaf = 0;
  std::uint64_t comm_gossip = 0;
  double max_head_norm = 0.0;
};

struct RunLog {
  int n_modalities = 0;
  std::vector<std::string> group_names;
  std::vector<RunRow> rows;
};

/// Stable CSV schema: round, psi, loss_sum, sheaf_quad, grad_sq_total,
/// grad_sq_omega, grad_sq_beta, grad_sq_p, grad_sq_phi<k>..., then
/// lemma1_residual, lemma2_residual, lemma2_residual_stated,
/// train_acc_g<j>..., test_acc_g<j>..., comm_sheaf, comm_gossip,
/// max_head_norm, config_hash. Floats use shortest round-trip formatting.
std::string csv_header(const RunLog& log);
std::string csv_row(const RunRow& row, const std::string& config_hash);

struct TheoremCheck {
  double lhs = 0.0;  // mean over rounds of the total squared gradient norm
  double rho_plain = 0.0;   // map-block coefficient with the per-client head bound
  double rho_scaled = 0.0;  // same with the N-scaled head bound
  double rhs_plain = 0.0;
  double rhs_scaled = 0.0;
  double margin_plain = 0.0;
  double margin_scaled = 0.0;
  bool applicable_plain = false;  // all participating coefficients positive
  bool applicable_scaled = false;
};

/// Average-gradient bound over a completed log: lhs <= psi_0 / (rho * R)
/// with the minimum stationarity coefficient over the blocks the run
/// actually updates (attention flag selects the beta coefficient). Both
/// readings of the map-step coefficient are reported.
TheoremCheck theorem1_check(const RunLog& log, const ResolvedSteps& steps,
                            const std::vector<int>& v_k, int n_clients, Algorithm algorithm,
                            bool attention);

}  // namespace sheafdmfl
