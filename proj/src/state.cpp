#include "sheafdmfl/state.hpp"

#include "sheafdmfl/errors.hpp"

#include <algorithm>

namespace sheafdmfl {

Algorithm parse_algorithm(const std::string& name) {
  if (name == "sheaf_dmfl") return Algorithm::sheaf_dmfl;
  if (name == "sheaf_dmfl_att") return Algorithm::sheaf_dmfl_att;
  if (name == "local") return Algorithm::local;
  if (name == "dsgd") return Algorithm::dsgd;
  throw ConfigError("unknown algorithm '" + name +
                    "' (expected sheaf_dmfl|sheaf_dmfl_att|local|dsgd)");
}

std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::sheaf_dmfl: return "sheaf_dmfl";
    case Algorithm::sheaf_dmfl_att: return "sheaf_dmfl_att";
    case Algorithm::local: return "local";
    case Algorithm::dsgd: return "dsgd";
  }
  return "?";
}

namespace {

int slot_of(const std::vector<int>& modalities, int modality) {
  const auto it = std::lower_bound(modalities.begin(), modalities.end(), modality);
  if (it == modalities.end() || *it != modality)
    throw ModalityAbsentError("modality " + std::to_string(modality) + " not held");
  return static_cast<int>(it - modalities.begin());
}

}  // namespace

EncoderParams& encoder_of(FederationState& s, const ClientGraph& g, int client, int modality) {
  const int a = slot_of(g.modality_sets[static_cast<std::size_t>(client)], modality);
  auto& models = s.models[static_cast<std::size_t>(client)];
  if (s.algorithm == Algorithm::dsgd)
    return models[static_cast<std::size_t>(a)].encoders.front();
  return models.front().encoders[static_cast<std::size_t>(a)];
}

const EncoderParams& encoder_of(const FederationState& s, const ClientGraph& g, int client,
                                int modality) {
  return encoder_of(const_cast<FederationState&>(s), g, client, modality);
}

std::vector<const Matrix*> features_for(const ClientModel& m, const ClientDataset& ds) {
  std::vector<const Matrix*> out;
  out.reserve(m.modalities.size());
  for (int k : m.modalities) {
    const int a = slot_of(ds.modalities, k);
    out.push_back(&ds.features[static_cast<std::size_t>(a)]);
  }
  return out;
}

FederationState build_state(const ClientGraph& g, const std::vector<int>& m_k,
                            const ModelSettings& model_cfg, const SheafSettings& sheaf_cfg,
                            Algorithm algorithm, std::uint64_t model_seed) {
  if (static_cast<int>(m_k.size()) != g.n_modalities)
    throw DimensionMismatchError("m_k covers " + std::to_string(m_k.size()) +
                                 " modalities, graph has " + std::to_string(g.n_modalities));
  if (static_cast<int>(model_cfg.embed_dims.size()) != g.n_modalities)
    throw DimensionMismatchError("embed_dims must list one dimension per modality");
  if (model_cfg.n_classes <= 0) throw ConfigError("n_classes must be positive");

  FederationState s;
  s.algorithm = algorithm;
  s.groups = client_groups(g);

  // Per-modality connectivity is a precondition for every algorithm; it
  // also fixes the gossip matrices and their spectral gaps.
  for (int k = 0; k < g.n_modalities; ++k) {
    const auto sub = modality_subgraph(g, k);
    s.mixing.push_back(metropolis_weights(sub));
    s.gaps.push_back(spectral_gap(s.mixing.back()));
  }

  const FusionMode fusion =
      algorithm == Algorithm::sheaf_dmfl_att ? FusionMode::attention : model_cfg.fusion;

  s.models.resize(static_cast<std::size_t>(g.n_clients));
  for (int i = 0; i < g.n_clients; ++i) {
    const auto& set = g.modality_sets[static_cast<std::size_t>(i)];
    auto& models = s.models[static_cast<std::size_t>(i)];
    if (algorithm == Algorithm::dsgd) {
      // One unimodal concat model per held modality; encoder streams match
      // the multimodal layout so equal seeds align parameter for parameter.
      for (int k : set) {
        models.push_back(init_client_model(
            i, {k}, {m_k[static_cast<std::size_t>(k)]}, model_cfg.hidden,
            {model_cfg.embed_dims[static_cast<std::size_t>(k)]}, model_cfg.n_classes,
            FusionMode::concat, model_seed, g.n_modalities));
      }
    } else {
      std::vector<int> input_dims, embed_dims;
      for (int k : set) {
        input_dims.push_back(m_k[static_cast<std::size_t>(k)]);
        embed_dims.push_back(model_cfg.embed_dims[static_cast<std::size_t>(k)]);
      }
      models.push_back(init_client_model(i, set, input_dims, model_cfg.hidden, embed_dims,
                                         model_cfg.n_classes, fusion, model_seed,
                                         g.n_modalities));
    }
  }

  if (is_sheaf(algorithm)) {
    std::vector<int> head_dims;
    head_dims.reserve(static_cast<std::size_t>(g.n_clients));
    for (int i = 0; i < g.n_clients; ++i)
      head_dims.push_back(head_dim(s.models[static_cast<std::size_t>(i)].front()));
    s.sheaf = init_restriction_maps(g, head_dims, sheaf_cfg.gamma, sheaf_cfg.init,
                                    sheaf_cfg.sigma2, sheaf_cfg.seed);
    s.sheaf.lambda = sheaf_cfg.lambda;
    s.sheaf.eta = sheaf_cfg.eta;
  } else {
    // Edgeless sheaf: the quadratic and its gradients vanish identically.
    s.sheaf.incident.assign(static_cast<std::size_t>(g.n_clients), {});
    for (int i = 0; i < g.n_clients; ++i)
      s.sheaf.head_dims.push_back(head_dim(s.models[static_cast<std::size_t>(i)].front()));
    s.sheaf.lambda = 0.0;
    s.sheaf.eta = 0.0;
  }
  return s;
}

}  // namespace sheafdmfl
