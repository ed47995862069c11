#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "sheafdmfl/data.hpp"
#include "sheafdmfl/errors.hpp"
#include "sheafdmfl/graph.hpp"

using namespace sheafdmfl;
namespace fs = std::filesystem;

namespace {

ClientGraph three_clients() {
  return build_graph(3, {{0, 1}, {1, 2}}, {{0}, {1}, {0, 1}});
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  int n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("latent task spec is orthonormal, full rank and deterministic") {
  const LatentTaskSpec spec = make_latent_spec(6, 4, {5, 7}, 0.3, 99);
  REQUIRE(spec.label_weights.rows() == 4);
  REQUIRE(spec.label_weights.cols() == 6);
  const Matrix gram = spec.label_weights * spec.label_weights.transpose();
  CHECK((gram - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() <= 1e-12);

  REQUIRE(spec.modality_projections.size() == 2);
  CHECK(spec.modality_projections[0].rows() == 5);
  CHECK(spec.modality_projections[1].rows() == 7);
  for (const Matrix& a : spec.modality_projections) {
    CHECK(a.cols() == 6);
    Eigen::JacobiSVD<Matrix> svd(a);
    CHECK(svd.singularValues().minCoeff() > 1e-8);  // full column/row rank
  }

  const LatentTaskSpec again = make_latent_spec(6, 4, {5, 7}, 0.3, 99);
  CHECK(again.label_weights == spec.label_weights);
  for (std::size_t k = 0; k < spec.modality_projections.size(); ++k)
    CHECK(again.modality_projections[k] == spec.modality_projections[k]);

  CHECK_THROWS_AS(make_latent_spec(3, 4, {5}, 0.1, 1), ConfigError);
}

TEST_CASE("heterogeneity rotation: exact identity at zero, orthonormal, seeded") {
  const Matrix r0 = heterogeneity_rotation(5, 0.0, 77);
  CHECK(r0 == Matrix::Identity(5, 5));

  const Matrix r = heterogeneity_rotation(5, 0.6, 77);
  CHECK((r.transpose() * r - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((r - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff() > 1e-3);
  CHECK(heterogeneity_rotation(5, 0.6, 77) == r);

  CHECK_THROWS_AS(heterogeneity_rotation(5, -0.1, 77), InvalidFractionError);
  CHECK_THROWS_AS(heterogeneity_rotation(5, 1.5, 77), InvalidFractionError);
}

TEST_CASE("generated datasets have the right shapes, labels and split") {
  const ClientGraph g = three_clients();
  const LatentTaskSpec spec = make_latent_spec(6, 4, {5, 7}, 0.5, 3);
  const std::vector<ClientDataset> data = generate(spec, g, 220, 0.3, 0.35);

  REQUIRE(data.size() == 3);
  const std::vector<std::vector<int>> expected_cols = {{5}, {7}, {5, 7}};
  for (int i = 0; i < 3; ++i) {
    const ClientDataset& ds = data[static_cast<std::size_t>(i)];
    CHECK(ds.client == i);
    CHECK(ds.modalities == g.modality_sets[static_cast<std::size_t>(i)]);
    REQUIRE(ds.features.size() == expected_cols[static_cast<std::size_t>(i)].size());
    for (std::size_t a = 0; a < ds.features.size(); ++a) {
      CHECK(ds.features[a].rows() == 220);
      CHECK(ds.features[a].cols() == expected_cols[static_cast<std::size_t>(i)][a]);
    }
    REQUIRE(ds.labels.size() == 220);
    std::vector<int> per_class(4, 0);
    for (int r = 0; r < 220; ++r) {
      REQUIRE(ds.labels(r) >= 0);
      REQUIRE(ds.labels(r) < 4);
      ++per_class[static_cast<std::size_t>(ds.labels(r))];
    }
    // Orthonormal label rows make the classes exchangeable: each count sits
    // within 5 standard deviations of the uniform mean 55.
    for (int c = 0; c < 4; ++c) {
      CHECK(per_class[static_cast<std::size_t>(c)] >= 23);
      CHECK(per_class[static_cast<std::size_t>(c)] <= 87);
    }

    CHECK(ds.train_idx.size() == 77);  // floor(0.35 * 220)
    CHECK(ds.test_idx.size() == 143);
    std::set<int> seen(ds.train_idx.begin(), ds.train_idx.end());
    seen.insert(ds.test_idx.begin(), ds.test_idx.end());
    CHECK(seen.size() == 220);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == 219);
  }

  const std::vector<ClientDataset> rerun = generate(spec, g, 220, 0.3, 0.35);
  for (int i = 0; i < 3; ++i) {
    const auto& a = data[static_cast<std::size_t>(i)];
    const auto& b = rerun[static_cast<std::size_t>(i)];
    CHECK(a.labels == b.labels);
    CHECK(a.train_idx == b.train_idx);
    for (std::size_t k = 0; k < a.features.size(); ++k)
      CHECK(a.features[k] == b.features[k]);
  }
}

TEST_CASE("occlusion zeroes leading columns, is idempotent and validates input") {
  const ClientGraph g = three_clients();
  const LatentTaskSpec spec = make_latent_spec(6, 4, {5, 7}, 0.5, 3);
  std::vector<ClientDataset> data = generate(spec, g, 40, 0.3, 0.5);

  ClientDataset& ds = data[2];
  const Matrix orig0 = ds.features[0];
  const Matrix orig1 = ds.features[1];

  occlude(ds, 1, 0.3);  // floor(0.3 * 7) = 2 leading columns
  CHECK(ds.features[1].leftCols(2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(ds.features[1].rightCols(5) == orig1.rightCols(5));
  CHECK(ds.features[0] == orig0);

  const Matrix once = ds.features[1];
  occlude(ds, 1, 0.3);
  CHECK(ds.features[1] == once);

  CHECK_THROWS_AS(occlude(data[0], 1, 0.5), ModalityAbsentError);
  CHECK_THROWS_AS(occlude(ds, 1, -0.1), InvalidFractionError);
  CHECK_THROWS_AS(occlude(ds, 1, 1.2), InvalidFractionError);
}

TEST_CASE("csv export writes one file per block plus labels") {
  const ClientGraph g = three_clients();
  const LatentTaskSpec spec = make_latent_spec(6, 4, {5, 7}, 0.5, 3);
  const std::vector<ClientDataset> data = generate(spec, g, 30, 0.3, 0.5);

  const fs::path dir = fs::temp_directory_path() / "sheafdmfl_csv_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  export_csv(data[2], dir.string());

  const fs::path mod0 = dir / "client2_mod0.csv";
  const fs::path mod1 = dir / "client2_mod1.csv";
  const fs::path labels = dir / "client2_labels.csv";
  REQUIRE(fs::exists(mod0));
  REQUIRE(fs::exists(mod1));
  REQUIRE(fs::exists(labels));
  CHECK(count_lines(mod0) == 31);  // header + one row per sample
  CHECK(count_lines(mod1) == 31);
  CHECK(count_lines(labels) == 31);

  std::ifstream in(labels);
  std::string header;
  std::getline(in, header);
  CHECK(header == "label,split");
  std::string first;
  std::getline(in, first);
  CHECK((first.find(",train") != std::string::npos || first.find(",test") != std::string::npos));

  std::ifstream fin(mod0);
  std::getline(fin, header);
  CHECK(header.rfind("x0,", 0) == 0);

  fs::remove_all(dir);
}
