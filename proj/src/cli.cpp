#include "sheafdmfl/cli.hpp"

#include "sheafdmfl/errors.hpp"
#include "sheafdmfl/verify.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace sheafdmfl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json steps_json(const ResolvedSteps& s) {
  json j;
  j["alpha"] = s.alpha;
  j["eta_beta"] = s.eta_beta;
  j["eta_p"] = s.eta_p;
  j["lambda"] = s.lambda;
  j["eta_phi"] = s.eta_phi;
  j["l_hat"] = s.l_hat;
  j["d_omega_hat"] = s.d_omega_hat;
  j["d_beta_hat"] = s.d_beta_hat;
  j["d_phi_hat"] = s.d_phi_hat;
  return j;
}

bool uses_attention(const FederationState& s) {
  for (const auto& models : s.models)
    for (const auto& m : models)
      if (m.fusion == FusionMode::attention) return true;
  return false;
}

json summary_json(const ExperimentConfig& cfg, const ExperimentSetup& setup,
                  const TrainResult& result, std::uint64_t hash) {
  json j;
  j["config_hash"] = hash_hex(hash);
  j["algorithm"] = algorithm_name(cfg.train.algorithm);
  j["rounds"] = static_cast<int>(result.log.rows.size());
  j["group_names"] = result.log.group_names;
  j["spectral_gaps"] = result.state.gaps;
  j["graph_connected"] = graph_connected(setup.graph);
  j["steps"] = steps_json(result.steps);

  const auto& fm = result.final_metrics;
  j["final"]["psi"] = fm.psi;
  j["final"]["loss_sum"] = fm.loss_sum;
  j["final"]["sheaf_quad"] = fm.quad;
  j["final"]["train_acc"] = fm.train_acc;
  j["final"]["test_acc"] = fm.test_acc;
  j["final"]["client_test_acc"] = fm.client_test_acc;

  j["comm"]["sheaf_total"] = result.comm_sheaf_total;
  j["comm"]["gossip_total"] = result.comm_gossip_total;

  double lemma1_max = 0.0;
  double lemma2_min = std::numeric_limits<double>::infinity();
  double lemma2_stated_min = std::numeric_limits<double>::infinity();
  double psi_increase_max = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < result.log.rows.size(); ++r) {
    const auto& row = result.log.rows[r];
    lemma1_max = std::max(lemma1_max, row.lemma1_residual);
    lemma2_min = std::min(lemma2_min, row.lemma2_residual);
    lemma2_stated_min = std::min(lemma2_stated_min, row.lemma2_residual_stated);
    const double next_psi =
        r + 1 < result.log.rows.size() ? result.log.rows[r + 1].psi : fm.psi;
    psi_increase_max = std::max(psi_increase_max, next_psi - row.psi);
  }
  j["theory"]["lemma1_residual_max"] = lemma1_max;
  j["theory"]["lemma2_residual_min"] = result.log.rows.empty() ? 0.0 : lemma2_min;
  j["theory"]["lemma2_residual_stated_min"] = result.log.rows.empty() ? 0.0 : lemma2_stated_min;
  j["theory"]["psi_increase_max"] = result.log.rows.empty() ? 0.0 : psi_increase_max;
  j["theory"]["psi_star"] = 0.0;
  j["theory"]["head_bound_violated"] = result.head_bound_violated;
  j["theory"]["encoder_bound_violated"] = result.encoder_bound_violated;

  std::vector<int> v_k;
  for (const auto& mix : result.state.mixing) v_k.push_back(static_cast<int>(mix.members.size()));
  const TheoremCheck tc =
      theorem1_check(result.log, result.steps, v_k, setup.graph.n_clients, cfg.train.algorithm,
                     uses_attention(result.state));
  j["theory"]["theorem"]["lhs"] = tc.lhs;
  j["theory"]["theorem"]["rho_plain"] = tc.rho_plain;
  j["theory"]["theorem"]["rho_scaled"] = tc.rho_scaled;
  j["theory"]["theorem"]["rhs_plain"] = tc.rhs_plain;
  j["theory"]["theorem"]["rhs_scaled"] = tc.rhs_scaled;
  j["theory"]["theorem"]["margin_plain"] = tc.margin_plain;
  j["theory"]["theorem"]["margin_scaled"] = tc.margin_scaled;
  j["theory"]["theorem"]["applicable_plain"] = tc.applicable_plain;
  j["theory"]["theorem"]["applicable_scaled"] = tc.applicable_scaled;
  return j;
}

}  // namespace

TrainResult run_experiment(const ExperimentConfig& cfg) {
  ExperimentSetup setup = build_setup(cfg);
  const std::uint64_t hash = config_hash(cfg);
  const fs::path dir(cfg.output.dir);
  fs::create_directories(dir);
  const fs::path ck_path = dir / "checkpoint.bin";

  ResolvedSteps steps;
  std::vector<std::string> rows;
  if (cfg.output.resume && fs::exists(ck_path)) {
    const CheckpointData ck = load_checkpoint(ck_path.string(), hash, setup.state);
    steps = ck.steps;
    rows = ck.csv_rows;
  } else {
    steps = resolve_steps(setup.state, setup.graph, setup.data, cfg.train, cfg.sheaf);
  }

  std::ofstream config_echo(dir / "config.json");
  config_echo << canonical_dump(cfg) << "\n";
  config_echo.close();

  RunLog header_probe;
  header_probe.n_modalities = setup.graph.n_modalities;
  header_probe.group_names.resize(setup.state.groups.size());

  std::ofstream runlog(dir / "runlog.csv", std::ios::trunc);
  if (!runlog) throw ConfigError("cannot write to output directory: " + cfg.output.dir);
  runlog << csv_header(header_probe) << "\n";
  for (const auto& r : rows) runlog << r << "\n";
  runlog.flush();

  std::ofstream timing(dir / "timing.csv", std::ios::trunc);
  timing << "round,seconds,config_hash\n";

  const std::string hex = hash_hex(hash);
  auto last = std::chrono::steady_clock::now();
  double total_seconds = 0.0;

  RunHooks hooks;
  hooks.checkpoint_every = cfg.output.checkpoint_every;
  hooks.on_row = [&](const RunRow& row) {
    const std::string line = csv_row(row, hex);
    rows.push_back(line);
    runlog << line << "\n";
    runlog.flush();
    const auto now = std::chrono::steady_clock::now();
    const double sec = std::chrono::duration<double>(now - last).count();
    last = now;
    total_seconds += sec;
    timing << row.round << "," << sec << "," << hex << "\n";
    if (cfg.output.log_every > 0 && (row.round + 1) % cfg.output.log_every == 0)
      std::cout << "round " << row.round << "  psi " << row.psi << "  grad_sq " << row.grad_total
                << "\n";
  };
  hooks.on_checkpoint = [&](int round, const FederationState& state, const ResolvedSteps& st) {
    save_checkpoint(ck_path.string(), hash, round, st, state, rows);
  };

  TrainResult result = run(std::move(setup.state), setup.graph, setup.data, cfg.train, steps, hooks);
  timing << "total," << total_seconds << "," << hex << "\n";

  std::ofstream summary(dir / "summary.json");
  summary << summary_json(cfg, setup, result, hash).dump(2) << "\n";
  return result;
}

int run_sweep(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("sweep needs a nonempty seed list");
  const fs::path dir(base.output.dir);
  fs::create_directories(dir);

  json agg;
  agg["config_hash_base"] = hash_hex(config_hash(base));
  agg["algorithm"] = algorithm_name(base.train.algorithm);
  int failures = 0;
  std::vector<std::string> group_names;
  // per group: accuracy per seed
  std::vector<std::vector<double>> test_acc, train_acc;
  std::ofstream table(dir / "aggregate.csv", std::ios::trunc);
  table << "seed,group,train_acc,test_acc\n";

  for (const std::uint64_t s : seeds) {
    ExperimentConfig cfg = base;
    apply_sweep_seed(cfg, s);
    cfg.output.dir = (dir / ("seed_" + std::to_string(s))).string();
    try {
      const TrainResult result = run_experiment(cfg);
      if (group_names.empty()) {
        group_names = result.log.group_names;
        test_acc.resize(group_names.size());
        train_acc.resize(group_names.size());
      }
      for (std::size_t g = 0; g < group_names.size(); ++g) {
        test_acc[g].push_back(result.final_metrics.test_acc[g]);
        train_acc[g].push_back(result.final_metrics.train_acc[g]);
        table << s << "," << group_names[g] << "," << result.final_metrics.train_acc[g] << ","
              << result.final_metrics.test_acc[g] << "\n";
      }
      table.flush();
      agg["seeds"][std::to_string(s)]["status"] = "ok";
    } catch (const SimError& e) {
      ++failures;
      agg["seeds"][std::to_string(s)]["status"] = std::string("failed: ") + e.what();
    }
  }

  auto mean_sd = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s2 = 0.0;
    for (double x : v) s2 += (x - m) * (x - m);
    const double sd = v.size() > 1 ? std::sqrt(s2 / static_cast<double>(v.size() - 1)) : 0.0;
    return std::pair<double, double>(m, sd);
  };
  for (std::size_t g = 0; g < group_names.size(); ++g) {
    if (test_acc[g].empty()) continue;
    const auto [tm, tsd] = mean_sd(test_acc[g]);
    const auto [rm, rsd] = mean_sd(train_acc[g]);
    agg["groups"][group_names[g]]["test_acc_mean"] = tm;
    agg["groups"][group_names[g]]["test_acc_sd"] = tsd;
    agg["groups"][group_names[g]]["train_acc_mean"] = rm;
    agg["groups"][group_names[g]]["train_acc_sd"] = rsd;
  }
  std::ofstream summary(dir / "sweep_summary.json");
  summary << agg.dump(2) << "\n";
  return failures;
}

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const std::string part = text.substr(start, comma - start);
    if (!part.empty()) {
      try {
        seeds.push_back(std::stoull(part));
      } catch (const std::exception&) {
        throw ConfigError("bad seed '" + part + "' in --seeds");
      }
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (seeds.empty()) throw ConfigError("--seeds must list at least one integer");
  return seeds;
}

}  // namespace

int main_cli(int argc, char** argv) {
  CLI::App app{"sheaf-based decentralized multimodal federated learning simulator"};
  app.require_subcommand(1);

  std::string config_path, out_dir, seeds_text, level = "fast";
  std::vector<std::string> overrides;

  CLI::App* cmd_run = app.add_subcommand("run", "execute one experiment");
  cmd_run->add_option("--config", config_path, "experiment config (JSON)")->required();
  cmd_run->add_option("--set", overrides, "dotted-key override, e.g. train.rounds=5");
  cmd_run->add_option("--out", out_dir, "output directory (overrides output.dir)");

  CLI::App* cmd_sweep = app.add_subcommand("sweep", "run a seed sweep");
  cmd_sweep->add_option("--config", config_path, "experiment config (JSON)")->required();
  cmd_sweep->add_option("--set", overrides, "dotted-key override");
  cmd_sweep->add_option("--out", out_dir, "output directory (overrides output.dir)");
  cmd_sweep->add_option("--seeds", seeds_text, "comma-separated seed list")->required();

  CLI::App* cmd_verify = app.add_subcommand("verify", "run the verification suites");
  cmd_verify->add_option("--level", level, "fast|full")->check(CLI::IsMember({"fast", "full"}));
  cmd_verify->add_option("--config", config_path, "reference config for the full level");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (cmd_run->parsed()) {
      ExperimentConfig cfg = load_config(config_path, overrides);
      if (!out_dir.empty()) cfg.output.dir = out_dir;
      std::cout << "config_hash " << hash_hex(config_hash(cfg)) << "\n";
      const TrainResult result = run_experiment(cfg);
      std::cout << "rounds " << result.log.rows.size() << "  final_psi "
                << result.final_metrics.psi << "\n";
      return 0;
    }
    if (cmd_sweep->parsed()) {
      ExperimentConfig cfg = load_config(config_path, overrides);
      if (!out_dir.empty()) cfg.output.dir = out_dir;
      const int failures = run_sweep(cfg, parse_seed_list(seeds_text));
      if (failures > 0) {
        std::cerr << failures << " seed run(s) failed\n";
        return 3;
      }
      return 0;
    }
    // verify
    std::vector<CheckResult> results;
    if (level == "fast") {
      results = run_fast_checks();
    } else {
      const std::string ref = config_path.empty() ? default_reference_config() : config_path;
      results = run_acceptance_checks(ref);
    }
    const int failures = report_checks(results, std::cout);
    return failures > 0 ? 1 : 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const SimError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace sheafdmfl
