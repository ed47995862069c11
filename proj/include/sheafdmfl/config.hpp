#pragma once

#include "sheafdmfl/data.hpp"
#include "sheafdmfl/state.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace sheafdmfl {

struct OcclusionSettings {
  int modality = 0;
  double frac = 0.5;
};

struct DataSettings {
  int latent_dim = 8;
  int n_classes = 3;
  std::vector<int> m_k;
  double noise_std = 0.5;
  int n_per_client = 250;
  double heterogeneity = 0.0;
  double split_frac = 0.8;
  std::optional<OcclusionSettings> occlusion;
};

struct OutputSettings {
  std::string dir = "out";
  int checkpoint_every = 0;  // rounds between checkpoints; 0 disables
  int log_every = 0;         // stdout progress cadence; 0 silences
  bool resume = false;       // continue from <dir>/checkpoint.bin if present
};

/// Fully resolved experiment description. Aliased keys (train.lambda /
/// sheaf.lambda, train.eta_p / sheaf.eta, model.init_seed /
/// train.seeds.model, model.n_classes / data.n_classes, data.seed /
/// train.seeds.data) are folded into one canonical slot at parse time.
struct ExperimentConfig {
  int n_clients = 0;
  std::vector<Edge> edges;
  std::vector<std::vector<int>> modalities;
  DataSettings data;
  ModelSettings model;
  SheafSettings sheaf;
  TrainConfig train;
  OutputSettings output;
};

/// Parses and validates a config file plus repeatable dotted overrides
/// ("train.rounds=5"). Unknown keys, alias contradictions and malformed
/// values raise ConfigError.
ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

/// Same validation applied to an in-memory JSON text.
ExperimentConfig parse_config_text(const std::string& text,
                                   const std::vector<std::string>& overrides = {});

/// Canonical single-line JSON rendering of every result-affecting field
/// (output.* excluded), with sorted keys; the config hash is FNV-1a over
/// these bytes.
std::string canonical_dump(const ExperimentConfig& c);
std::uint64_t config_hash(const ExperimentConfig& c);
std::string hash_hex(std::uint64_t h);

/// Everything a run needs, constructed in one validated pass.
struct ExperimentSetup {
  ClientGraph graph;
  LatentTaskSpec spec;
  std::vector<ClientDataset> data;
  FederationState state;
};

ExperimentSetup build_setup(const ExperimentConfig& c);

/// Rewrites the four stream seeds from one sweep seed; used by the sweep
/// command so per-seed runs differ in every stochastic ingredient.
void apply_sweep_seed(ExperimentConfig& c, std::uint64_t seed);

}  // namespace sheafdmfl
