#include "sheafdmfl/data.hpp"

#include "sheafdmfl/errors.hpp"
#include "sheafdmfl/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace sheafdmfl {

namespace {

Matrix gaussian_matrix(int rows, int cols, Rng& rng) {
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.normal();
  return m;
}

// Householder QR orthonormalization with the sign convention that makes the
// factorization unique (positive R diagonal), so results are reproducible.
Matrix orthonormal_columns(const Matrix& m) {
  Eigen::HouseholderQR<Matrix> qr(m);
  Matrix q = qr.householderQ() * Matrix::Identity(m.rows(), m.cols());
  const Matrix r = qr.matrixQR().topRows(m.cols()).triangularView<Eigen::Upper>();
  for (int c = 0; c < q.cols(); ++c)
    if (r(c, c) < 0.0) q.col(c) = -q.col(c);
  return q;
}

int matrix_rank(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& sv = svd.singularValues();
  const double tol = 1e-10 * std::max(m.rows(), m.cols()) * (sv.size() ? sv(0) : 0.0);
  int rank = 0;
  for (int k = 0; k < sv.size(); ++k)
    if (sv(k) > tol) ++rank;
  return rank;
}

void write_double(std::ofstream& out, double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.write(buf, res.ptr - buf);
}

}  // namespace

Matrix heterogeneity_rotation(int dim, double t, std::uint64_t seed) {
  if (t < 0.0 || t > 1.0)
    throw InvalidFractionError("heterogeneity must lie in [0, 1], got " + std::to_string(t));
  if (t == 0.0) return Matrix::Identity(dim, dim);
  Rng rng(seed);
  const Matrix q = orthonormal_columns(gaussian_matrix(dim, dim, rng));
  return orthonormal_columns((1.0 - t) * Matrix::Identity(dim, dim) + t * q);
}

LatentTaskSpec make_latent_spec(int latent_dim, int n_classes, const std::vector<int>& m_k,
                                double noise_std, std::uint64_t seed) {
  if (latent_dim <= 0 || n_classes <= 0)
    throw ConfigError("latent_dim and n_classes must be positive");
  if (n_classes > latent_dim)
    throw ConfigError("n_classes " + std::to_string(n_classes) + " exceeds latent_dim " +
                      std::to_string(latent_dim) + "; class scores cannot be exchangeable");
  if (noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
  if (m_k.empty()) throw ConfigError("at least one modality dimension is required");

  LatentTaskSpec spec;
  spec.latent_dim = latent_dim;
  spec.n_classes = n_classes;
  spec.noise_std = noise_std;
  spec.seed = seed;

  for (std::size_t k = 0; k < m_k.size(); ++k) {
    if (m_k[k] <= 0) throw ConfigError("modality dimension must be positive");
    Rng rng(derive_seed(seed, {0xA11ull, static_cast<std::uint64_t>(k)}));
    Matrix a = gaussian_matrix(m_k[k], latent_dim, rng);
    while (matrix_rank(a) < std::min(m_k[k], latent_dim)) a = gaussian_matrix(m_k[k], latent_dim, rng);
    spec.modality_projections.push_back(std::move(a));
  }

  Rng rng(derive_seed(seed, {0x1abull}));
  Matrix w = gaussian_matrix(latent_dim, n_classes, rng);
  while (matrix_rank(w) < n_classes) w = gaussian_matrix(latent_dim, n_classes, rng);
  spec.label_weights = orthonormal_columns(w).transpose();
  return spec;
}

std::vector<ClientDataset> generate(const LatentTaskSpec& spec, const ClientGraph& g,
                                    int n_per_client, double heterogeneity, double split_frac) {
  if (n_per_client <= 0) throw ConfigError("n_per_client must be positive");
  if (split_frac <= 0.0 || split_frac > 1.0)
    throw InvalidFractionError("split_frac must lie in (0, 1], got " + std::to_string(split_frac));
  if (static_cast<int>(spec.modality_projections.size()) < g.n_modalities)
    throw DimensionMismatchError("task spec covers " +
                                 std::to_string(spec.modality_projections.size()) +
                                 " modalities, graph needs " + std::to_string(g.n_modalities));

  std::vector<ClientDataset> out;
  out.reserve(static_cast<std::size_t>(g.n_clients));
  for (int i = 0; i < g.n_clients; ++i) {
    ClientDataset ds;
    ds.client = i;
    ds.modalities = g.modality_sets[static_cast<std::size_t>(i)];

    std::vector<Matrix> rot;
    for (int k : ds.modalities) {
      const int dim = static_cast<int>(spec.modality_projections[static_cast<std::size_t>(k)].rows());
      rot.push_back(heterogeneity_rotation(
          dim, heterogeneity,
          derive_seed(spec.seed, {0x07ull, static_cast<std::uint64_t>(i),
                                  static_cast<std::uint64_t>(k)})));
    }

    Rng rng(derive_seed(spec.seed, {0x5a11ull, static_cast<std::uint64_t>(i)}));
    ds.labels.resize(n_per_client);
    for (std::size_t a = 0; a < ds.modalities.size(); ++a) {
      const auto& proj = spec.modality_projections[static_cast<std::size_t>(ds.modalities[a])];
      ds.features.emplace_back(n_per_client, proj.rows());
    }
    Vector z(spec.latent_dim);
    for (int s = 0; s < n_per_client; ++s) {
      for (int d = 0; d < spec.latent_dim; ++d) z(d) = rng.normal();
      const Vector scores = spec.label_weights * z;
      int label = 0;
      for (int c = 1; c < scores.size(); ++c)
        if (scores(c) > scores(label)) label = c;
      ds.labels(s) = label;
      for (std::size_t a = 0; a < ds.modalities.size(); ++a) {
        const auto& proj = spec.modality_projections[static_cast<std::size_t>(ds.modalities[a])];
        Vector x = rot[a] * (proj * z);
        for (int d = 0; d < x.size(); ++d) x(d) += spec.noise_std * rng.normal();
        ds.features[a].row(s) = x.transpose();
      }
    }

    std::vector<int> order(static_cast<std::size_t>(n_per_client));
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(derive_seed(spec.seed, {0x59ull, static_cast<std::uint64_t>(i)}));
    split_rng.shuffle(order);
    const int n_train = static_cast<int>(std::floor(split_frac * n_per_client));
    ds.train_idx.assign(order.begin(), order.begin() + n_train);
    ds.test_idx.assign(order.begin() + n_train, order.end());
    std::sort(ds.train_idx.begin(), ds.train_idx.end());
    std::sort(ds.test_idx.begin(), ds.test_idx.end());
    out.push_back(std::move(ds));
  }
  return out;
}

void occlude(ClientDataset& ds, int modality, double frac) {
  if (frac < 0.0 || frac > 1.0)
    throw InvalidFractionError("occlusion fraction must lie in [0, 1], got " + std::to_string(frac));
  const auto it = std::find(ds.modalities.begin(), ds.modalities.end(), modality);
  if (it == ds.modalities.end())
    throw ModalityAbsentError("client " + std::to_string(ds.client) + " has no modality " +
                              std::to_string(modality));
  auto& block = ds.features[static_cast<std::size_t>(it - ds.modalities.begin())];
  const int zeroed = static_cast<int>(std::floor(frac * static_cast<double>(block.cols())));
  block.leftCols(zeroed).setZero();
}

void export_csv(const ClientDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (std::size_t a = 0; a < ds.modalities.size(); ++a) {
    const auto& block = ds.features[a];
    std::ofstream out(fs::path(dir) / ("client" + std::to_string(ds.client) + "_mod" +
                                       std::to_string(ds.modalities[a]) + ".csv"));
    for (int c = 0; c < block.cols(); ++c) out << (c ? ",x" : "x") << c;
    out << "\n";
    for (int r = 0; r < block.rows(); ++r) {
      for (int c = 0; c < block.cols(); ++c) {
        if (c) out << ",";
        write_double(out, block(r, c));
      }
      out << "\n";
    }
  }
  std::ofstream out(fs::path(dir) / ("client" + std::to_string(ds.client) + "_labels.csv"));
  out << "label,split\n";
  std::vector<char> is_train(static_cast<std::size_t>(ds.labels.size()), 0);
  for (int r : ds.train_idx) is_train[static_cast<std::size_t>(r)] = 1;
  for (int r = 0; r < ds.labels.size(); ++r)
    out << ds.labels(r) << "," << (is_train[static_cast<std::size_t>(r)] ? "train" : "test") << "\n";
}

}  // namespace sheafdmfl
