#pragma once

#include "sheafdmfl/data.hpp"
#include "sheafdmfl/graph.hpp"
#include "sheafdmfl/model.hpp"
#include "sheafdmfl/sheaf.hpp"
#include "sheafdmfl/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sheafdmfl {

enum class Algorithm { sheaf_dmfl, sheaf_dmfl_att, local, dsgd };

Algorithm parse_algorithm(const std::string& name);
std::string algorithm_name(Algorithm a);

inline bool is_sheaf(Algorithm a) {
  return a == Algorithm::sheaf_dmfl || a == Algorithm::sheaf_dmfl_att;
}

struct TrainSeeds {
  std::uint64_t data = 1;
  std::uint64_t model = 2;
  std::uint64_t shuffle = 3;
};

/// User-facing knobs. Non-positive step sizes mean "derive from theory at
/// initialization"; batch_size 0 or full_batch selects full-batch rounds.
struct TrainConfig {
  Algorithm algorithm = Algorithm::sheaf_dmfl;
  int rounds = 100;
  double alpha = 0.0;
  double eta_phi = 0.0;
  double eta_beta = 0.0;
  int batch_size = 0;
  bool full_batch = false;
  bool dsgd_head_gossip = true;
  TrainSeeds seeds;
};

struct ModelSettings {
  int hidden = 16;
  std::vector<int> embed_dims;  // per global modality
  int n_classes = 0;
  FusionMode fusion = FusionMode::concat;
};

struct SheafSettings {
  double gamma = 0.25;
  double lambda = 0.0;
  double eta = 0.0;  // non-positive: derive 1/(lambda * D_omega^2)
  SheafInit init = SheafInit::identity;
  double sigma2 = 0.01;
  std::uint64_t seed = 7;
};

/// Step sizes and bound constants actually used by a run, after the
/// auto-derivation pass.
struct ResolvedSteps {
  double alpha = 0.0;
  double eta_beta = 0.0;
  double eta_p = 0.0;
  double lambda = 0.0;
  std::vector<double> eta_phi;  // per modality
  double l_hat = 0.0;           // 3x max Gauss-Newton spectral norm at the start point
  double d_omega_hat = 0.0;     // head norm bound (10x initial, floored at 1)
  double d_beta_hat = 0.0;
  std::vector<double> d_phi_hat;
};

/// The federation: one multimodal model per client for the sheaf variants
/// and the local baseline, one unimodal model per held modality for dsgd.
/// Model slots align with the client's ascending modality list.
struct FederationState {
  Algorithm algorithm = Algorithm::sheaf_dmfl;
  std::vector<std::vector<ClientModel>> models;
  SheafState sheaf;                  // edgeless for local/dsgd
  std::vector<MixingMatrix> mixing;  // per modality
  std::vector<double> gaps;          // spectral gaps per modality
  std::vector<ClientGroup> groups;
  int round = 0;
};

/// Encoder for (client, modality) regardless of algorithm layout.
EncoderParams& encoder_of(FederationState& s, const ClientGraph& g, int client, int modality);
const EncoderParams& encoder_of(const FederationState& s, const ClientGraph& g, int client,
                                int modality);

/// Feature block pointers for a model, resolved against the client dataset.
std::vector<const Matrix*> features_for(const ClientModel& m, const ClientDataset& ds);

/// Builds models, mixing matrices (validating per-modality connectivity)
/// and, for the sheaf variants, the restriction maps.
FederationState build_state(const ClientGraph& g, const std::vector<int>& m_k,
                            const ModelSettings& model_cfg, const SheafSettings& sheaf_cfg,
                            Algorithm algorithm, std::uint64_t model_seed);

}  // namespace sheafdmfl
