#pragma once

#include "sheafdmfl/metrics.hpp"
#include "sheafdmfl/state.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace sheafdmfl {

/// Per-round scratch: the batch gradients for every model, computed once
/// and reused by the encoder, attention and head updates of that round.
struct RoundWork {
  std::vector<std::vector<int>> batches;         // per client
  std::vector<std::vector<ModelGrads>> grads;    // aligned with state.models
  std::vector<std::vector<double>> losses;       // batch losses, diagnostics
};

/// Batch rows for one client and round: the whole (sorted) train split in
/// full-batch mode, otherwise the head of a seeded per-round shuffle.
std::vector<int> round_batch(const ClientDataset& ds, const TrainConfig& cfg, int round);

/// Gradients for every model at the current parameters. Throws
/// NonFiniteError naming round and client on non-finite values.
RoundWork compute_gradients(const FederationState& s, const ClientGraph& g,
                            const std::vector<ClientDataset>& data, const TrainConfig& cfg,
                            int round);

/// Gradient step on encoders (eta_phi per modality) and attention vectors
/// (eta_beta). Heads are untouched.
void local_step(FederationState& s, const ClientGraph& g, const RoundWork& work,
                const ResolvedSteps& steps);

/// Synchronous mixing of encoder parameters within every modality
/// subgraph, from a snapshot of the current values; returns the scalar
/// payload counted over directed edges. The local baseline must not call
/// this.
std::uint64_t gossip_encoders(FederationState& s, const ClientGraph& g);

/// Head update. Sheaf variants: omega_i -= alpha * (grad_f + lambda *
/// sheaf_gradient), all clients reading the pre-round heads and maps.
/// local/dsgd: plain gradient step; dsgd then averages heads within
/// identical-modality-set groups when enabled (returns that payload).
std::uint64_t update_heads(FederationState& s, const ClientGraph& g, const RoundWork& work,
                           const ResolvedSteps& steps, bool dsgd_head_gossip = true);

/// Restriction map update from the freshly updated heads (pre-update maps
/// on both sides); returns the projection payload: each ordered incidence
/// exchanges a stalk-dimensional vector twice per round.
std::uint64_t exchange_and_update_maps(FederationState& s, const ResolvedSteps& steps);

/// Theory-default step sizes from the initial state: alpha = eta_beta =
/// 1/L_hat, eta_phi_k = |V_k|/L_hat, eta_p = 1/(lambda * D_omega_hat^2),
/// with L_hat three times the largest Gauss-Newton spectral norm over
/// clients at the averaged-encoder start point. Explicit positive values
/// in the configs win over the derived ones.
ResolvedSteps resolve_steps(const FederationState& s, const ClientGraph& g,
                            const std::vector<ClientDataset>& data, const TrainConfig& cfg,
                            const SheafSettings& sheaf_cfg);

struct RunHooks {
  std::function<void(const RunRow&)> on_row;
  std::function<void(int, const FederationState&, const ResolvedSteps&)> on_checkpoint;
  int checkpoint_every = 0;
  std::function<void(int, const FederationState&)> on_state;  // after every round's updates
};

struct TrainResult {
  RunLog log;
  FederationState state;  // after the last round
  ResolvedSteps steps;
  MetricsSnapshot final_metrics;
  std::uint64_t comm_sheaf_total = 0;
  std::uint64_t comm_gossip_total = 0;
  bool head_bound_violated = false;     // max head norm exceeded d_omega_hat
  bool encoder_bound_violated = false;  // encoder or attention norms exceeded their monitors
};

/// Runs rounds [state.round, cfg.rounds). The state carries its own round
/// counter so a checkpointed state resumes mid-schedule and reproduces the
/// uninterrupted run bit for bit.
TrainResult run(FederationState state, const ClientGraph& g,
                const std::vector<ClientDataset>& data, const TrainConfig& cfg,
                const ResolvedSteps& steps, const RunHooks& hooks = {});

/// Versioned binary checkpoint: config hash, completed round, resolved
/// steps, every model parameter vector and every restriction map, plus the
/// already-emitted CSV rows so a resumed run rewrites an identical log.
void save_checkpoint(const std::string& path, std::uint64_t config_hash, int round,
                     const ResolvedSteps& steps, const FederationState& state,
                     const std::vector<std::string>& csv_rows);

struct CheckpointData {
  int round = 0;
  ResolvedSteps steps;
  std::vector<std::string> csv_rows;
};

/// Restores parameters and maps into a freshly built state (which fixes
/// all shapes). Throws ConfigError on hash or shape mismatch.
CheckpointData load_checkpoint(const std::string& path, std::uint64_t config_hash,
                               FederationState& state);

}  // namespace sheafdmfl
