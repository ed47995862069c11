#include "sheafdmfl/model.hpp"

#include "sheafdmfl/errors.hpp"
#include "sheafdmfl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>

namespace sheafdmfl {

FusionMode parse_fusion(const std::string& name) {
  if (name == "concat") return FusionMode::concat;
  if (name == "attention") return FusionMode::attention;
  throw ConfigError("unknown fusion mode '" + name + "' (expected concat|attention)");
}

namespace {

Matrix gaussian_matrix(int rows, int cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
  return m;
}

int slot_count(const ClientModel& m) { return static_cast<int>(m.modalities.size()); }

void check_features(const ClientModel& m, const std::vector<const Matrix*>& features) {
  if (features.size() != m.encoders.size())
    throw DimensionMismatchError("expected " + std::to_string(m.encoders.size()) +
                                 " feature blocks, got " + std::to_string(features.size()));
  for (std::size_t a = 0; a < features.size(); ++a) {
    if (!features[a]) throw DimensionMismatchError("feature block " + std::to_string(a) + " is null");
    if (features[a]->cols() != m.encoders[a].w1.cols())
      throw DimensionMismatchError("feature block " + std::to_string(a) + " has " +
                                   std::to_string(features[a]->cols()) + " columns, encoder expects " +
                                   std::to_string(m.encoders[a].w1.cols()));
  }
}

struct Cache {
  std::vector<Vector> x;
  std::vector<Vector> pre;
  std::vector<Vector> act;
  std::vector<Vector> emb;
  Vector scores;
  Vector alphas;
  Vector fused;
  Vector logits;
  Vector probs;
};

Cache forward(const ClientModel& m, const std::vector<const Matrix*>& features, int row) {
  const int slots = slot_count(m);
  Cache c;
  c.x.resize(static_cast<std::size_t>(slots));
  c.pre.resize(static_cast<std::size_t>(slots));
  c.act.resize(static_cast<std::size_t>(slots));
  c.emb.resize(static_cast<std::size_t>(slots));
  for (int a = 0; a < slots; ++a) {
    const auto& enc = m.encoders[static_cast<std::size_t>(a)];
    c.x[static_cast<std::size_t>(a)] = features[static_cast<std::size_t>(a)]->row(row).transpose();
    c.pre[static_cast<std::size_t>(a)] = enc.w1 * c.x[static_cast<std::size_t>(a)] + enc.b1;
    c.act[static_cast<std::size_t>(a)] = c.pre[static_cast<std::size_t>(a)].cwiseMax(0.0);
    c.emb[static_cast<std::size_t>(a)] = enc.w2 * c.act[static_cast<std::size_t>(a)] + enc.b2;
  }
  if (m.fusion == FusionMode::attention) {
    c.scores.resize(slots);
    for (int a = 0; a < slots; ++a)
      c.scores(a) = std::tanh(m.attention[static_cast<std::size_t>(a)]
                                  .dot(c.emb[static_cast<std::size_t>(a)]));
    const double mx = c.scores.maxCoeff();
    c.alphas = (c.scores.array() - mx).exp().matrix();
    c.alphas /= c.alphas.sum();
    c.fused = Vector::Zero(c.emb[0].size());
    for (int a = 0; a < slots; ++a)
      c.fused.noalias() += c.alphas(a) * c.emb[static_cast<std::size_t>(a)];
  } else {
    int total = 0;
    for (int a = 0; a < slots; ++a) total += static_cast<int>(c.emb[static_cast<std::size_t>(a)].size());
    c.fused.resize(total);
    int off = 0;
    for (int a = 0; a < slots; ++a) {
      const auto& h = c.emb[static_cast<std::size_t>(a)];
      c.fused.segment(off, h.size()) = h;
      off += static_cast<int>(h.size());
    }
  }
  c.logits = m.head.w * c.fused + m.head.b;
  const double mx = c.logits.maxCoeff();
  c.probs = (c.logits.array() - mx).exp().matrix();
  c.probs /= c.probs.sum();
  return c;
}

// Reverse pass from a logit cotangent dz, accumulating into g.
void accumulate_vjp(const ClientModel& m, const Cache& c, const Vector& dz, ModelGrads& g) {
  const int slots = slot_count(m);
  g.head.w.noalias() += dz * c.fused.transpose();
  g.head.b += dz;
  Vector dfused = m.head.w.transpose() * dz;

  std::vector<Vector> demb(static_cast<std::size_t>(slots));
  if (m.fusion == FusionMode::attention) {
    Vector dalpha(slots);
    for (int a = 0; a < slots; ++a) {
      demb[static_cast<std::size_t>(a)] = c.alphas(a) * dfused;
      dalpha(a) = dfused.dot(c.emb[static_cast<std::size_t>(a)]);
    }
    const double mix = c.alphas.dot(dalpha);
    for (int a = 0; a < slots; ++a) {
      const double de = c.alphas(a) * (dalpha(a) - mix);
      const double dt = de * (1.0 - c.scores(a) * c.scores(a));
      g.attention[static_cast<std::size_t>(a)].noalias() += dt * c.emb[static_cast<std::size_t>(a)];
      demb[static_cast<std::size_t>(a)].noalias() += dt * m.attention[static_cast<std::size_t>(a)];
    }
  } else {
    int off = 0;
    for (int a = 0; a < slots; ++a) {
      const int l = static_cast<int>(c.emb[static_cast<std::size_t>(a)].size());
      demb[static_cast<std::size_t>(a)] = dfused.segment(off, l);
      off += l;
    }
  }

  for (int a = 0; a < slots; ++a) {
    const auto& enc = m.encoders[static_cast<std::size_t>(a)];
    auto& ge = g.encoders[static_cast<std::size_t>(a)];
    const Vector& dh = demb[static_cast<std::size_t>(a)];
    ge.w2.noalias() += dh * c.act[static_cast<std::size_t>(a)].transpose();
    ge.b2 += dh;
    Vector dact = enc.w2.transpose() * dh;
    const Vector ds =
        (c.pre[static_cast<std::size_t>(a)].array() > 0.0).select(dact, Vector::Zero(dact.size()));
    ge.w1.noalias() += ds * c.x[static_cast<std::size_t>(a)].transpose();
    ge.b1 += ds;
  }
}

// Forward-mode directional derivative of the logits along tangent t.
Vector logits_jvp(const ClientModel& m, const Cache& c, const ModelGrads& t) {
  const int slots = slot_count(m);
  std::vector<Vector> demb(static_cast<std::size_t>(slots));
  for (int a = 0; a < slots; ++a) {
    const auto& enc = m.encoders[static_cast<std::size_t>(a)];
    const auto& te = t.encoders[static_cast<std::size_t>(a)];
    Vector dpre = te.w1 * c.x[static_cast<std::size_t>(a)] + te.b1;
    const Vector dact =
        (c.pre[static_cast<std::size_t>(a)].array() > 0.0).select(dpre, Vector::Zero(dpre.size()));
    demb[static_cast<std::size_t>(a)] =
        te.w2 * c.act[static_cast<std::size_t>(a)] + enc.w2 * dact + te.b2;
  }
  Vector dfused;
  if (m.fusion == FusionMode::attention) {
    Vector dscore(slots);
    for (int a = 0; a < slots; ++a) {
      const double dt = t.attention[static_cast<std::size_t>(a)].dot(c.emb[static_cast<std::size_t>(a)]) +
                        m.attention[static_cast<std::size_t>(a)].dot(demb[static_cast<std::size_t>(a)]);
      dscore(a) = (1.0 - c.scores(a) * c.scores(a)) * dt;
    }
    const double mix = c.alphas.dot(dscore);
    dfused = Vector::Zero(c.fused.size());
    for (int a = 0; a < slots; ++a) {
      const double dalpha = c.alphas(a) * (dscore(a) - mix);
      dfused.noalias() += dalpha * c.emb[static_cast<std::size_t>(a)] +
                          c.alphas(a) * demb[static_cast<std::size_t>(a)];
    }
  } else {
    dfused.resize(c.fused.size());
    int off = 0;
    for (int a = 0; a < slots; ++a) {
      const int l = static_cast<int>(demb[static_cast<std::size_t>(a)].size());
      dfused.segment(off, l) = demb[static_cast<std::size_t>(a)];
      off += l;
    }
  }
  return t.head.w * c.fused + m.head.w * dfused + t.head.b;
}

void check_batch(const ClientModel& m, const std::vector<const Matrix*>& features,
                 const IntVector& labels, std::span<const int> idx) {
  check_features(m, features);
  if (idx.empty()) throw EmptyBatchError("batch index list is empty");
  const int n_rows = static_cast<int>(features.empty() ? 0 : features[0]->rows());
  const int n_classes = static_cast<int>(m.head.w.rows());
  for (int r : idx) {
    if (r < 0 || r >= n_rows)
      throw DimensionMismatchError("batch row " + std::to_string(r) + " outside [0, " +
                                   std::to_string(n_rows) + ")");
    if (labels(r) < 0 || labels(r) >= n_classes)
      throw LabelOutOfRangeError("label " + std::to_string(labels(r)) + " at row " +
                                 std::to_string(r) + " outside [0, " +
                                 std::to_string(n_classes) + ")");
  }
}

double sample_loss(const Cache& c, int label) {
  const double mx = c.logits.maxCoeff();
  const double lse = std::log((c.logits.array() - mx).exp().sum());
  return lse - (c.logits(label) - mx);
}

}  // namespace

ClientModel init_client_model(int client, const std::vector<int>& modalities,
                              const std::vector<int>& input_dims, int hidden,
                              const std::vector<int>& embed_dims, int n_classes,
                              FusionMode fusion, std::uint64_t model_seed, int n_modalities) {
  if (modalities.empty()) throw EmptyModalitySetError("client " + std::to_string(client) + " has no modalities");
  if (!std::is_sorted(modalities.begin(), modalities.end()))
    throw DimensionMismatchError("modalities must be ascending");
  if (input_dims.size() != modalities.size() || embed_dims.size() != modalities.size())
    throw DimensionMismatchError("per-modality dimension lists must match the modality count");
  if (hidden <= 0 || n_classes <= 0)
    throw ConfigError("hidden and n_classes must be positive");
  if (fusion == FusionMode::attention)
    for (int l : embed_dims)
      if (l != embed_dims.front())
        throw ConfigError("attention fusion requires one shared embedding dimension");

  ClientModel m;
  m.modalities = modalities;
  m.fusion = fusion;
  for (std::size_t a = 0; a < modalities.size(); ++a) {
    // Same-modality encoders start identical across clients: the stream is
    // keyed by modality alone, giving exact within-modality consensus at
    // round zero.
    Rng rng(derive_seed(model_seed, static_cast<std::uint64_t>(modalities[a])));
    EncoderParams enc;
    const int in = input_dims[a];
    const int out = embed_dims[a];
    enc.w1 = gaussian_matrix(hidden, in, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    enc.b1 = Vector::Zero(hidden);
    enc.w2 = gaussian_matrix(out, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    enc.b2 = Vector::Zero(out);
    m.encoders.push_back(std::move(enc));
    if (fusion == FusionMode::attention) m.attention.push_back(Vector::Zero(out));
  }
  const int fd = fusion == FusionMode::attention
                     ? embed_dims.front()
                     : std::accumulate(embed_dims.begin(), embed_dims.end(), 0);
  Rng rng(derive_seed(model_seed, static_cast<std::uint64_t>(client),
                      static_cast<std::uint64_t>(n_modalities + modalities.front())));
  m.head.w = gaussian_matrix(n_classes, fd, 1.0 / std::sqrt(static_cast<double>(fd)), rng);
  m.head.b = Vector::Zero(n_classes);
  return m;
}

ModelGrads zeros_like(const ClientModel& m) {
  ModelGrads g;
  for (const auto& enc : m.encoders) {
    EncoderParams z;
    z.w1 = Matrix::Zero(enc.w1.rows(), enc.w1.cols());
    z.b1 = Vector::Zero(enc.b1.size());
    z.w2 = Matrix::Zero(enc.w2.rows(), enc.w2.cols());
    z.b2 = Vector::Zero(enc.b2.size());
    g.encoders.push_back(std::move(z));
  }
  for (const auto& b : m.attention) g.attention.push_back(Vector::Zero(b.size()));
  g.head.w = Matrix::Zero(m.head.w.rows(), m.head.w.cols());
  g.head.b = Vector::Zero(m.head.b.size());
  return g;
}

int fused_dim(const ClientModel& m) {
  if (m.fusion == FusionMode::attention) return static_cast<int>(m.encoders.front().w2.rows());
  int total = 0;
  for (const auto& enc : m.encoders) total += static_cast<int>(enc.w2.rows());
  return total;
}

int head_dim(const ClientModel& m) {
  return static_cast<int>(m.head.w.rows() * m.head.w.cols() + m.head.b.size());
}

int encoder_param_count(const EncoderParams& e) {
  return static_cast<int>(e.w1.size() + e.b1.size() + e.w2.size() + e.b2.size());
}

int param_count(const ClientModel& m) {
  int total = 0;
  for (const auto& enc : m.encoders) total += encoder_param_count(enc);
  for (const auto& b : m.attention) total += static_cast<int>(b.size());
  return total + head_dim(m);
}

namespace {

int pack_matrix(const Matrix& m, Vector& v, int off) {
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) v(off++) = m(r, c);
  return off;
}

int pack_vector(const Vector& x, Vector& v, int off) {
  v.segment(off, x.size()) = x;
  return off + static_cast<int>(x.size());
}

int unpack_matrix(Matrix& m, const Vector& v, int off) {
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) m(r, c) = v(off++);
  return off;
}

int unpack_vector(Vector& x, const Vector& v, int off) {
  x = v.segment(off, x.size());
  return off + static_cast<int>(x.size());
}

}  // namespace

Vector flatten(const ClientModel& m) {
  Vector v(param_count(m));
  int off = 0;
  for (const auto& enc : m.encoders) {
    off = pack_matrix(enc.w1, v, off);
    off = pack_vector(enc.b1, v, off);
    off = pack_matrix(enc.w2, v, off);
    off = pack_vector(enc.b2, v, off);
  }
  for (const auto& b : m.attention) off = pack_vector(b, v, off);
  off = pack_matrix(m.head.w, v, off);
  pack_vector(m.head.b, v, off);
  return v;
}

void unflatten(ClientModel& m, const Vector& v) {
  if (v.size() != param_count(m))
    throw DimensionMismatchError("flat vector length " + std::to_string(v.size()) +
                                 " does not match parameter count " + std::to_string(param_count(m)));
  int off = 0;
  for (auto& enc : m.encoders) {
    off = unpack_matrix(enc.w1, v, off);
    off = unpack_vector(enc.b1, v, off);
    off = unpack_matrix(enc.w2, v, off);
    off = unpack_vector(enc.b2, v, off);
  }
  for (auto& b : m.attention) off = unpack_vector(b, v, off);
  off = unpack_matrix(m.head.w, v, off);
  unpack_vector(m.head.b, v, off);
}

Vector flatten_grads(const ClientModel& m, const ModelGrads& g) {
  Vector v(param_count(m));
  int off = 0;
  for (const auto& enc : g.encoders) {
    off = pack_matrix(enc.w1, v, off);
    off = pack_vector(enc.b1, v, off);
    off = pack_matrix(enc.w2, v, off);
    off = pack_vector(enc.b2, v, off);
  }
  for (const auto& b : g.attention) off = pack_vector(b, v, off);
  off = pack_matrix(g.head.w, v, off);
  pack_vector(g.head.b, v, off);
  return v;
}

Vector flatten_encoder(const EncoderParams& e) {
  Vector v(encoder_param_count(e));
  int off = 0;
  off = pack_matrix(e.w1, v, off);
  off = pack_vector(e.b1, v, off);
  off = pack_matrix(e.w2, v, off);
  pack_vector(e.b2, v, off);
  return v;
}

void set_encoder(EncoderParams& e, const Vector& v) {
  if (v.size() != encoder_param_count(e))
    throw DimensionMismatchError("encoder vector length mismatch");
  int off = 0;
  off = unpack_matrix(e.w1, v, off);
  off = unpack_vector(e.b1, v, off);
  off = unpack_matrix(e.w2, v, off);
  unpack_vector(e.b2, v, off);
}

Vector flatten_head(const HeadParams& h) {
  Vector v(h.w.size() + h.b.size());
  int off = pack_matrix(h.w, v, 0);
  pack_vector(h.b, v, off);
  return v;
}

void set_head(HeadParams& h, const Vector& v) {
  if (v.size() != h.w.size() + h.b.size())
    throw DimensionMismatchError("head vector length mismatch");
  int off = unpack_matrix(h.w, v, 0);
  unpack_vector(h.b, v, off);
}

LossGrads loss_and_grads(const ClientModel& m, const std::vector<const Matrix*>& features,
                         const IntVector& labels, std::span<const int> idx) {
  check_batch(m, features, labels, idx);
  LossGrads out;
  out.grads = zeros_like(m);
  const double inv_n = 1.0 / static_cast<double>(idx.size());
  for (int row : idx) {
    const Cache c = forward(m, features, row);
    out.loss += sample_loss(c, labels(row));
    Vector dz = c.probs;
    dz(labels(row)) -= 1.0;
    dz *= inv_n;
    accumulate_vjp(m, c, dz, out.grads);
  }
  out.loss *= inv_n;
  return out;
}

double batch_loss(const ClientModel& m, const std::vector<const Matrix*>& features,
                  const IntVector& labels, std::span<const int> idx) {
  check_batch(m, features, labels, idx);
  double loss = 0.0;
  for (int row : idx) loss += sample_loss(forward(m, features, row), labels(row));
  return loss / static_cast<double>(idx.size());
}

int predict(const ClientModel& m, const std::vector<const Matrix*>& features, int row) {
  const Cache c = forward(m, features, row);
  int best = 0;
  for (int k = 1; k < c.logits.size(); ++k)
    if (c.logits(k) > c.logits(best)) best = k;
  return best;
}

double accuracy(const ClientModel& m, const std::vector<const Matrix*>& features,
                const IntVector& labels, std::span<const int> idx) {
  check_batch(m, features, labels, idx);
  int hits = 0;
  for (int row : idx)
    if (predict(m, features, row) == labels(row)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

namespace {

ModelGrads grads_from_vector(const ClientModel& m, const Vector& v) {
  ClientModel scratch = m;
  unflatten(scratch, v);
  ModelGrads g;
  g.encoders = std::move(scratch.encoders);
  g.attention = std::move(scratch.attention);
  g.head = std::move(scratch.head);
  return g;
}

}  // namespace

ModelGrads finite_diff_grads(const ClientModel& m, const std::vector<const Matrix*>& features,
                             const IntVector& labels, std::span<const int> idx, double eps) {
  const Vector base = flatten(m);
  Vector g(base.size());
  ClientModel scratch = m;
  for (int k = 0; k < base.size(); ++k) {
    Vector v = base;
    v(k) = base(k) + eps;
    unflatten(scratch, v);
    const double up = batch_loss(scratch, features, labels, idx);
    v(k) = base(k) - eps;
    unflatten(scratch, v);
    const double down = batch_loss(scratch, features, labels, idx);
    g(k) = (up - down) / (2.0 * eps);
  }
  return grads_from_vector(m, g);
}

double gauss_newton_spectral_norm(const ClientModel& m,
                                  const std::vector<const Matrix*>& features,
                                  const IntVector& labels, std::span<const int> idx,
                                  int iters) {
  check_batch(m, features, labels, idx);
  std::vector<Cache> caches;
  caches.reserve(idx.size());
  for (int row : idx) caches.push_back(forward(m, features, row));

  const int p = param_count(m);
  Vector v(p);
  for (int k = 0; k < p; ++k) v(k) = static_cast<double>(k + 1);
  v.normalize();

  const double inv_n = 1.0 / static_cast<double>(idx.size());
  double est = 0.0;
  for (int it = 0; it < iters; ++it) {
    const ModelGrads tangent = grads_from_vector(m, v);
    ModelGrads acc = zeros_like(m);
    for (const auto& c : caches) {
      const Vector t = logits_jvp(m, c, tangent);
      // H t with H = diag(p) - p p^T, the softmax cross-entropy curvature.
      const Vector ht = c.probs.cwiseProduct(t) - c.probs * c.probs.dot(t);
      accumulate_vjp(m, c, inv_n * ht, acc);
    }
    const Vector g = flatten_grads(m, acc);
    est = g.norm();
    if (est < 1e-300) return 0.0;
    v = g / est;
  }
  return est;
}

}  // namespace sheafdmfl
