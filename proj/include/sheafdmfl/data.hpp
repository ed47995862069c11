#pragma once

#include "sheafdmfl/graph.hpp"
#include "sheafdmfl/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sheafdmfl {

/// Shared generative task: a latent Gaussian z, one projection per modality
/// and a linear labeling rule label = argmax(label_weights * z).
struct LatentTaskSpec {
  int latent_dim = 0;
  int n_classes = 0;
  std::vector<Matrix> modality_projections;  // A_k, m_k x latent_dim
  Matrix label_weights;                      // n_classes x latent_dim, orthonormal rows
  double noise_std = 0.0;
  std::uint64_t seed = 0;
};

/// Per-client samples. Feature blocks align with the client's ascending
/// modality ids; rows are samples shared across blocks.
struct ClientDataset {
  int client = 0;
  std::vector<int> modalities;
  std::vector<Matrix> features;
  IntVector labels;
  std::vector<int> train_idx;
  std::vector<int> test_idx;
};

/// Draws the task matrices from `seed`. Projections are regenerated until
/// full rank; label rows are orthonormalized so class scores are
/// exchangeable (requires n_classes <= latent_dim).
LatentTaskSpec make_latent_spec(int latent_dim, int n_classes, const std::vector<int>& m_k,
                                double noise_std, std::uint64_t seed);

/// Samples n_per_client points per client: z ~ N(0, I), features
/// R_ik A_k z + noise. R_ik blends the identity with a client-specific
/// random rotation; heterogeneity 0 gives identical views, 1 fully rotated
/// ones. Split is a seeded shuffle with the first floor(split_frac * n)
/// rows as train. All streams derive from spec.seed and the client id.
std::vector<ClientDataset> generate(const LatentTaskSpec& spec, const ClientGraph& g,
                                    int n_per_client, double heterogeneity,
                                    double split_frac = 0.8);

/// Zeroes the first floor(frac * m_k) coordinates of one modality across
/// all of a client's samples. Throws ModalityAbsentError if the client
/// lacks the modality and InvalidFractionError for frac outside [0, 1].
void occlude(ClientDataset& ds, int modality, double frac);

/// Writes client<i>_mod<k>.csv per feature block and client<i>_labels.csv
/// (label plus split column) under dir.
void export_csv(const ClientDataset& ds, const std::string& dir);

/// Blend of identity and a seeded random rotation, re-orthonormalized; the
/// rotation applied to modality features under heterogeneity t.
Matrix heterogeneity_rotation(int dim, double t, std::uint64_t seed);

}  // namespace sheafdmfl
