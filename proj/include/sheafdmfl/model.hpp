#pragma once

#include "sheafdmfl/types.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace sheafdmfl {

enum class FusionMode { concat, attention };

FusionMode parse_fusion(const std::string& name);

/// Two-layer MLP encoder h = W2 relu(W1 x + b1) + b2.
struct EncoderParams {
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
};

/// Linear classification head logits = W u + b over the fused embedding.
struct HeadParams {
  Matrix w;
  Vector b;
};

/// Per-client model. Encoder slots align with the ascending modality ids in
/// `modalities`; `attention` is empty in concat mode and holds one score
/// vector per slot otherwise.
struct ClientModel {
  std::vector<int> modalities;
  std::vector<EncoderParams> encoders;
  std::vector<Vector> attention;
  HeadParams head;
  FusionMode fusion = FusionMode::concat;
};

/// Gradient (or tangent) container with the same shapes as the model.
struct ModelGrads {
  std::vector<EncoderParams> encoders;
  std::vector<Vector> attention;
  HeadParams head;
};

struct LossGrads {
  double loss = 0.0;
  ModelGrads grads;
};

/// Deterministic initialization: weights are N(0, 1/fan_in) drawn from
/// seeded streams. Encoder streams are keyed by (seed, modality) so all
/// clients sharing a modality start from the same encoder; the head is
/// keyed by (seed, client, n_modalities + smallest modality). Biases and
/// attention vectors start at zero. Attention mode requires a single
/// shared embedding dimension.
ClientModel init_client_model(int client, const std::vector<int>& modalities,
                              const std::vector<int>& input_dims, int hidden,
                              const std::vector<int>& embed_dims, int n_classes,
                              FusionMode fusion, std::uint64_t model_seed, int n_modalities);

ModelGrads zeros_like(const ClientModel& m);

int fused_dim(const ClientModel& m);
int head_dim(const ClientModel& m);  // n_classes * fused_dim + n_classes
int param_count(const ClientModel& m);

/// Flatten layouts are fixed: per encoder slot ascending (W1 row-major, b1,
/// W2 row-major, b2), then attention vectors per slot, then head (W
/// row-major, b). Round-trips are bitwise exact.
Vector flatten(const ClientModel& m);
void unflatten(ClientModel& m, const Vector& v);
Vector flatten_grads(const ClientModel& m, const ModelGrads& g);

Vector flatten_encoder(const EncoderParams& e);
void set_encoder(EncoderParams& e, const Vector& v);
int encoder_param_count(const EncoderParams& e);

Vector flatten_head(const HeadParams& h);
void set_head(HeadParams& h, const Vector& v);

/// Mean softmax cross-entropy over the selected rows plus exact
/// reverse-mode gradients for every parameter. `features` holds one matrix
/// per encoder slot (rows are samples). Throws EmptyBatchError,
/// LabelOutOfRangeError or DimensionMismatchError on malformed input.
LossGrads loss_and_grads(const ClientModel& m, const std::vector<const Matrix*>& features,
                         const IntVector& labels, std::span<const int> idx);

double batch_loss(const ClientModel& m, const std::vector<const Matrix*>& features,
                  const IntVector& labels, std::span<const int> idx);

int predict(const ClientModel& m, const std::vector<const Matrix*>& features, int row);

double accuracy(const ClientModel& m, const std::vector<const Matrix*>& features,
                const IntVector& labels, std::span<const int> idx);

/// Central-difference gradients of batch_loss with step eps, same shapes as
/// loss_and_grads. Test oracle; O(param_count) loss evaluations.
ModelGrads finite_diff_grads(const ClientModel& m, const std::vector<const Matrix*>& features,
                             const IntVector& labels, std::span<const int> idx, double eps);

/// Largest eigenvalue of the Gauss-Newton matrix (1/n) sum_j J_j^T H_j J_j
/// of the batch loss, by power iteration with a deterministic ramp start.
double gauss_newton_spectral_norm(const ClientModel& m,
                                  const std::vector<const Matrix*>& features,
                                  const IntVector& labels, std::span<const int> idx,
                                  int iters = 50);

}  // namespace sheafdmfl
