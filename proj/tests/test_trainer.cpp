#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sheafdmfl/cli.hpp"
#include "sheafdmfl/config.hpp"
#include "sheafdmfl/errors.hpp"
#include "sheafdmfl/metrics.hpp"
#include "sheafdmfl/rng.hpp"
#include "sheafdmfl/sheaf.hpp"
#include "sheafdmfl/trainer.hpp"

using namespace sheafdmfl;
namespace fs = std::filesystem;

namespace {

// 3 clients on a path through the bimodal one; both modality subgraphs are
// single edges, so one gossip round averages each pair exactly.
const char* kSmall = R"({
  "graph": {"n_clients": 3, "edges": [[0,2],[1,2]], "modalities": [[0],[1],[0,1]]},
  "data": {"latent_dim": 5, "n_classes": 3, "m_k": [4,5], "noise_std": 0.4,
           "n_per_client": 40, "heterogeneity": 0.2, "split_frac": 0.5, "seed": 31},
  "model": {"hidden": 5, "embed_dim": 4, "fusion": "attention", "init_seed": 32},
  "sheaf": {"gamma": 0.5, "lambda": 0.8, "init": "identity"},
  "train": {"algorithm": "sheaf_dmfl_att", "rounds": 4, "full_batch": true,
            "seeds": {"shuffle": 33}}
})";

// 4 clients where clients 0 and 1 share the modality set {0}, so the dsgd
// head averaging has one nontrivial group.
const char* kDsgd = R"({
  "graph": {"n_clients": 4, "edges": [[0,1],[1,3],[2,3]], "modalities": [[0],[0],[1],[0,1]]},
  "data": {"latent_dim": 5, "n_classes": 3, "m_k": [4,5], "noise_std": 0.4,
           "n_per_client": 40, "heterogeneity": 0.2, "split_frac": 0.5, "seed": 31},
  "model": {"hidden": 5, "embed_dim": 4, "init_seed": 32},
  "train": {"algorithm": "dsgd", "rounds": 3, "full_batch": true, "seeds": {"shuffle": 33}}
})";

ExperimentConfig small_cfg(const std::vector<std::string>& overrides = {}) {
  return parse_config_text(kSmall, overrides);
}

std::vector<Vector> stacked_heads_of(const FederationState& s) {
  std::vector<Vector> out;
  for (const auto& models : s.models) out.push_back(flatten_head(models[0].head));
  return out;
}

Vector modality_mean(const FederationState& s, const ClientGraph& g, int k) {
  const auto& members = s.mixing[static_cast<std::size_t>(k)].members;
  Vector mean;
  for (int i : members) {
    const Vector v = flatten_encoder(encoder_of(s, g, i, k));
    mean = mean.size() == 0 ? v : Vector(mean + v);
  }
  return mean / static_cast<double>(members.size());
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

TEST_CASE("derived step sizes follow the smoothness and bound constants") {
  const ExperimentConfig cfg = small_cfg();
  const ExperimentSetup s = build_setup(cfg);
  const ResolvedSteps st = resolve_steps(s.state, s.graph, s.data, cfg.train, cfg.sheaf);

  double gn = 0.0;
  double head0 = 0.0;
  for (int i = 0; i < s.graph.n_clients; ++i) {
    const auto& m = s.state.models[static_cast<std::size_t>(i)][0];
    const auto& ds = s.data[static_cast<std::size_t>(i)];
    gn = std::max(gn, gauss_newton_spectral_norm(m, features_for(m, ds), ds.labels, ds.train_idx));
    head0 = std::max(head0, flatten_head(m.head).norm());
  }
  CHECK(st.l_hat == doctest::Approx(3.0 * gn).epsilon(1e-12));
  CHECK(st.alpha == doctest::Approx(1.0 / st.l_hat).epsilon(1e-15));
  CHECK(st.eta_beta == st.alpha);
  REQUIRE(st.eta_phi.size() == 2);
  // Both modalities are held by two clients.
  CHECK(st.eta_phi[0] == doctest::Approx(2.0 / st.l_hat).epsilon(1e-15));
  CHECK(st.eta_phi[1] == doctest::Approx(2.0 / st.l_hat).epsilon(1e-15));
  CHECK(st.d_omega_hat == doctest::Approx(std::max(10.0 * head0, 1.0)).epsilon(1e-12));
  CHECK(st.lambda == 0.8);
  CHECK(st.eta_p == doctest::Approx(1.0 / (0.8 * st.d_omega_hat * st.d_omega_hat)).epsilon(1e-12));

  // Explicit positive values win over the derived ones.
  ExperimentConfig manual = small_cfg(
      {"train.alpha=0.05", "train.eta_beta=0.03", "train.eta_phi=0.02", "sheaf.eta=0.01"});
  const ResolvedSteps st2 =
      resolve_steps(s.state, s.graph, s.data, manual.train, manual.sheaf);
  CHECK(st2.alpha == 0.05);
  CHECK(st2.eta_beta == 0.03);
  CHECK(st2.eta_phi[0] == 0.02);
  CHECK(st2.eta_phi[1] == 0.02);
  CHECK(st2.eta_p == 0.01);
  CHECK(st2.l_hat == st.l_hat);

  // Non-sheaf algorithms never see a coupling weight.
  const ExperimentConfig loc = small_cfg({"train.algorithm=local"});
  const ExperimentSetup sl = build_setup(loc);
  const ResolvedSteps st3 = resolve_steps(sl.state, sl.graph, sl.data, loc.train, loc.sheaf);
  CHECK(st3.lambda == 0.0);
  CHECK(st3.eta_p == 0.0);
}

TEST_CASE("round batches: full batch is the sorted split, minibatches are seeded") {
  const ExperimentConfig cfg = small_cfg();
  const ExperimentSetup s = build_setup(cfg);
  const ClientDataset& ds = s.data[0];

  std::vector<int> sorted_train = ds.train_idx;
  std::sort(sorted_train.begin(), sorted_train.end());
  CHECK(round_batch(ds, cfg.train, 0) == sorted_train);
  CHECK(round_batch(ds, cfg.train, 7) == sorted_train);

  const ExperimentConfig mb = small_cfg({"train.full_batch=false", "train.batch_size=8"});
  const std::vector<int> b0 = round_batch(ds, mb.train, 0);
  CHECK(b0.size() == 8);
  CHECK(round_batch(ds, mb.train, 0) == b0);  // same round, same batch
  const std::set<int> train_set(ds.train_idx.begin(), ds.train_idx.end());
  const std::set<int> batch_set(b0.begin(), b0.end());
  CHECK(batch_set.size() == 8);  // no duplicate rows
  for (int r : b0) CHECK(train_set.count(r) == 1);
}

TEST_CASE("encoder gossip preserves modality means and averages pairs exactly") {
  const ExperimentConfig cfg = small_cfg();
  ExperimentSetup s = build_setup(cfg);

  // Initialization gives every member of a modality the same encoder; spread
  // them out so mixing has something to do.
  Rng rng(909);
  for (int k = 0; k < 2; ++k)
    for (int i : s.state.mixing[static_cast<std::size_t>(k)].members) {
      EncoderParams& enc = encoder_of(s.state, s.graph, i, k);
      Vector v = flatten_encoder(enc);
      for (int t = 0; t < v.size(); ++t) v(t) += 0.1 * rng.normal();
      set_encoder(enc, v);
    }

  std::vector<Vector> before(2), members_before[2];
  std::uint64_t expected_payload = 0;
  for (int k = 0; k < 2; ++k) {
    before[static_cast<std::size_t>(k)] = modality_mean(s.state, s.graph, k);
    const auto& mem = s.state.mixing[static_cast<std::size_t>(k)].members;
    for (int i : mem)
      members_before[k].push_back(flatten_encoder(encoder_of(s.state, s.graph, i, k)));
    // Both subgraphs are single edges: two directed messages of one encoder.
    expected_payload += 2ull * static_cast<std::uint64_t>(members_before[k][0].size());
  }

  const std::uint64_t payload = gossip_encoders(s.state, s.graph);
  CHECK(payload == expected_payload);

  for (int k = 0; k < 2; ++k) {
    const Vector after = modality_mean(s.state, s.graph, k);
    CHECK((after - before[static_cast<std::size_t>(k)]).cwiseAbs().maxCoeff() <= 1e-13);
    // Metropolis weights on a two-member subgraph are 1/2 everywhere, so one
    // round lands both members on the pair average.
    const auto& mem = s.state.mixing[static_cast<std::size_t>(k)].members;
    const Vector pair_mean = 0.5 * (members_before[k][0] + members_before[k][1]);
    for (std::size_t a = 0; a < mem.size(); ++a) {
      const Vector got = flatten_encoder(encoder_of(s.state, s.graph, mem[a], k));
      CHECK((got - pair_mean).cwiseAbs().maxCoeff() <= 1e-14);
    }
  }

  // The purely local baseline has no mixing step.
  ExperimentSetup loc = build_setup(small_cfg({"train.algorithm=local"}));
  CHECK_THROWS_AS(gossip_encoders(loc.state, loc.graph), ConfigError);
}

TEST_CASE("head update follows the coupled gradient formula") {
  const ExperimentConfig cfg = small_cfg();
  ExperimentSetup s = build_setup(cfg);
  const ResolvedSteps steps = resolve_steps(s.state, s.graph, s.data, cfg.train, cfg.sheaf);
  const RoundWork work = compute_gradients(s.state, s.graph, s.data, cfg.train, 0);

  const std::vector<Vector> omega = stacked_heads_of(s.state);
  std::vector<Vector> expected;
  for (int i = 0; i < s.graph.n_clients; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    Vector grad = flatten_head(work.grads[ui][0].head);
    grad += steps.lambda * sheaf_gradient(omega, s.state.sheaf, i);
    expected.push_back(omega[ui] - steps.alpha * grad);
  }

  const std::uint64_t payload = update_heads(s.state, s.graph, work, steps);
  CHECK(payload == 0);  // only dsgd averaging ships head bytes
  for (int i = 0; i < s.graph.n_clients; ++i) {
    const Vector got = flatten_head(s.state.models[static_cast<std::size_t>(i)][0].head);
    CHECK((got - expected[static_cast<std::size_t>(i)]).cwiseAbs().maxCoeff() <= 1e-14);
  }
}

TEST_CASE("zero gradients and zero coupling leave heads untouched") {
  const ExperimentConfig cfg = parse_config_text(kDsgd);
  ExperimentSetup s = build_setup(cfg);

  RoundWork work;
  work.grads.resize(static_cast<std::size_t>(s.graph.n_clients));
  for (int i = 0; i < s.graph.n_clients; ++i)
    for (const auto& m : s.state.models[static_cast<std::size_t>(i)])
      work.grads[static_cast<std::size_t>(i)].push_back(zeros_like(m));

  ResolvedSteps steps;
  steps.alpha = 0.1;

  // Without dsgd head gossip nothing changes at all.
  const std::vector<Vector> before = [&] {
    std::vector<Vector> v;
    for (const auto& models : s.state.models)
      for (const auto& m : models) v.push_back(flatten_head(m.head));
    return v;
  }();
  std::uint64_t payload = update_heads(s.state, s.graph, work, steps, false);
  CHECK(payload == 0);
  std::size_t slot = 0;
  for (const auto& models : s.state.models)
    for (const auto& m : models) CHECK(flatten_head(m.head) == before[slot++]);

  // With gossip, clients 0 and 1 (the only multi-member group) land exactly
  // on their pre-update average; the payload counts the exchanged vectors.
  const Vector mean = 0.5 * (flatten_head(s.state.models[0][0].head) +
                             flatten_head(s.state.models[1][0].head));
  payload = update_heads(s.state, s.graph, work, steps, true);
  const auto dim = static_cast<std::uint64_t>(mean.size());
  CHECK(payload == 2ull * 1ull * dim);
  CHECK((flatten_head(s.state.models[0][0].head) - mean).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK((flatten_head(s.state.models[1][0].head) - mean).cwiseAbs().maxCoeff() <= 1e-15);
  // Client 3's models sit in singleton groups and keep their heads.
  CHECK(flatten_head(s.state.models[3][0].head) == before[3]);
  CHECK(flatten_head(s.state.models[3][1].head) == before[4]);
}

TEST_CASE("map exchange pays the projection cost even when the step is a no-op") {
  // Coupling disabled: lambda = 0 resolves to a zero map step.
  const ExperimentConfig cfg =
      small_cfg({"train.algorithm=sheaf_dmfl", "model.fusion=concat", "sheaf.lambda=0.0"});
  ExperimentSetup s = build_setup(cfg);
  const ResolvedSteps steps = resolve_steps(s.state, s.graph, s.data, cfg.train, cfg.sheaf);
  CHECK(steps.lambda == 0.0);
  CHECK(steps.eta_p == 0.0);

  std::uint64_t expected = 0;
  std::vector<Matrix> maps_before;
  for (const auto& e : s.state.sheaf.edges) {
    expected += 4ull * static_cast<std::uint64_t>(e.stalk_dim);
    maps_before.push_back(e.map_ij);
    maps_before.push_back(e.map_ji);
  }
  REQUIRE(expected > 0);

  const std::uint64_t payload = exchange_and_update_maps(s.state, steps);
  CHECK(payload == expected);
  std::size_t at = 0;
  for (const auto& e : s.state.sheaf.edges) {
    CHECK(e.map_ij == maps_before[at++]);
    CHECK(e.map_ji == maps_before[at++]);
  }

  // Baselines without a sheaf ship nothing.
  ExperimentSetup loc = build_setup(small_cfg({"train.algorithm=local"}));
  CHECK(exchange_and_update_maps(loc.state, steps) == 0);
}

TEST_CASE("short run: exact gossip identity, round counters and payload totals") {
  const ExperimentConfig cfg = small_cfg();
  ExperimentSetup s = build_setup(cfg);
  const ResolvedSteps steps = resolve_steps(s.state, s.graph, s.data, cfg.train, cfg.sheaf);
  const TrainResult r = run(s.state, s.graph, s.data, cfg.train, steps);

  REQUIRE(r.log.rows.size() == 4);
  CHECK(r.state.round == 4);
  // Groups are ordered lexicographically by modality set: {0} < {0,1} < {1}.
  CHECK(r.log.group_names == std::vector<std::string>{"0", "0+1", "1"});
  std::uint64_t sheaf_sum = 0, gossip_sum = 0;
  for (const auto& row : r.log.rows) {
    CHECK(row.lemma1_residual <= 1e-12);
    sheaf_sum += row.comm_sheaf;
    gossip_sum += row.comm_gossip;
  }
  CHECK(sheaf_sum == r.comm_sheaf_total);
  CHECK(gossip_sum == r.comm_gossip_total);
  CHECK(r.comm_sheaf_total > 0);
  CHECK(r.comm_gossip_total > 0);

  // CSV rendering stays aligned with the header column count.
  const std::string header = csv_header(r.log);
  const std::string line = csv_row(r.log.rows[0], "deadbeefdeadbeef");
  CHECK(std::count(header.begin(), header.end(), ',') ==
        std::count(line.begin(), line.end(), ','));
}

TEST_CASE("an interrupted schedule reproduces the uninterrupted run bit for bit") {
  const ExperimentConfig cfg8 = small_cfg({"train.rounds=8"});

  ExperimentSetup a = build_setup(cfg8);
  const ResolvedSteps steps = resolve_steps(a.state, a.graph, a.data, cfg8.train, cfg8.sheaf);
  const TrainResult straight = run(a.state, a.graph, a.data, cfg8.train, steps);

  ExperimentSetup b = build_setup(cfg8);
  TrainConfig first_half = cfg8.train;
  first_half.rounds = 4;
  const TrainResult part1 = run(b.state, b.graph, b.data, first_half, steps);
  CHECK(part1.state.round == 4);
  const TrainResult part2 = run(part1.state, b.graph, b.data, cfg8.train, steps);

  REQUIRE(part1.log.rows.size() + part2.log.rows.size() == straight.log.rows.size());
  for (std::size_t r = 0; r < straight.log.rows.size(); ++r) {
    const RunRow& got = r < 4 ? part1.log.rows[r] : part2.log.rows[r - 4];
    CHECK(csv_row(got, "h") == csv_row(straight.log.rows[r], "h"));
  }
  for (int i = 0; i < 3; ++i) {
    CHECK(flatten(part2.state.models[static_cast<std::size_t>(i)][0]) ==
          flatten(straight.state.models[static_cast<std::size_t>(i)][0]));
  }
}

TEST_CASE("checkpoints restore parameters, maps, steps and log rows") {
  const ExperimentConfig cfg = small_cfg();
  ExperimentSetup s = build_setup(cfg);
  const ResolvedSteps steps = resolve_steps(s.state, s.graph, s.data, cfg.train, cfg.sheaf);
  const TrainResult r = run(s.state, s.graph, s.data, cfg.train, steps);

  const fs::path path = fs::temp_directory_path() / "sheafdmfl_ck_test.bin";
  const std::vector<std::string> rows = {"row-a", "row-b"};
  save_checkpoint(path.string(), config_hash(cfg), r.state.round, steps, r.state, rows);

  ExperimentSetup fresh = build_setup(cfg);
  const CheckpointData ck = load_checkpoint(path.string(), config_hash(cfg), fresh.state);
  CHECK(ck.round == 4);
  CHECK(ck.csv_rows == rows);
  CHECK(ck.steps.alpha == steps.alpha);
  CHECK(ck.steps.eta_p == steps.eta_p);
  CHECK(ck.steps.l_hat == steps.l_hat);
  REQUIRE(ck.steps.eta_phi.size() == steps.eta_phi.size());
  CHECK(ck.steps.eta_phi[0] == steps.eta_phi[0]);

  for (int i = 0; i < 3; ++i)
    CHECK(flatten(fresh.state.models[static_cast<std::size_t>(i)][0]) ==
          flatten(r.state.models[static_cast<std::size_t>(i)][0]));
  REQUIRE(fresh.state.sheaf.edges.size() == r.state.sheaf.edges.size());
  for (std::size_t e = 0; e < fresh.state.sheaf.edges.size(); ++e) {
    CHECK(fresh.state.sheaf.edges[e].map_ij == r.state.sheaf.edges[e].map_ij);
    CHECK(fresh.state.sheaf.edges[e].map_ji == r.state.sheaf.edges[e].map_ji);
  }

  // A different configuration must refuse the file.
  ExperimentSetup other = build_setup(cfg);
  CHECK_THROWS_AS(load_checkpoint(path.string(), config_hash(cfg) ^ 1ull, other.state),
                  ConfigError);
  fs::remove(path);
}

TEST_CASE("worker count changes speed only, never results") {
  const ExperimentConfig cfg = small_cfg();

  const auto signature = [&]() {
    ExperimentSetup s = build_setup(cfg);
    const ResolvedSteps steps = resolve_steps(s.state, s.graph, s.data, cfg.train, cfg.sheaf);
    const TrainResult r = run(s.state, s.graph, s.data, cfg.train, steps);
    std::string sig;
    for (const auto& row : r.log.rows) sig += csv_row(row, "h") + "\n";
    std::vector<Vector> params;
    for (const auto& models : r.state.models) params.push_back(flatten(models[0]));
    return std::make_pair(sig, params);
  };

  setenv("SHEAF_SIM_THREADS", "1", 1);
  const auto one = signature();
  setenv("SHEAF_SIM_THREADS", "4", 1);
  const auto four = signature();
  unsetenv("SHEAF_SIM_THREADS");

  CHECK(one.first == four.first);
  REQUIRE(one.second.size() == four.second.size());
  for (std::size_t i = 0; i < one.second.size(); ++i) CHECK(one.second[i] == four.second[i]);
}

TEST_CASE("run_experiment resume rewrites an identical runlog") {
  const fs::path dir = fs::temp_directory_path() / "sheafdmfl_resume_test";
  fs::remove_all(dir);

  // rounds=6 with checkpoint_every=3 leaves a mid-run checkpoint behind
  // (the final round is never checkpointed), so the rerun below really does
  // resume from round 3 and replay the rest.
  ExperimentConfig cfg = small_cfg({"train.rounds=6", "output.checkpoint_every=3"});
  cfg.output.dir = (dir / "a").string();
  const TrainResult full = run_experiment(cfg);
  const std::string straight = read_file(dir / "a" / "runlog.csv");
  REQUIRE(fs::exists(dir / "a" / "checkpoint.bin"));
  REQUIRE(fs::exists(dir / "a" / "summary.json"));
  REQUIRE(fs::exists(dir / "a" / "timing.csv"));

  ExperimentConfig resumed = cfg;
  resumed.output.resume = true;
  const TrainResult again = run_experiment(resumed);
  CHECK(read_file(dir / "a" / "runlog.csv") == straight);
  for (int i = 0; i < 3; ++i)
    CHECK(flatten(again.state.models[static_cast<std::size_t>(i)][0]) ==
          flatten(full.state.models[static_cast<std::size_t>(i)][0]));

  fs::remove_all(dir);
}
