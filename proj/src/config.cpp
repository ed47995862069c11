#include "sheafdmfl/config.hpp"

#include "sheafdmfl/errors.hpp"
#include "sheafdmfl/rng.hpp"
#include "sheafdmfl/trainer.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace sheafdmfl {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& msg) { throw ConfigError(msg); }

// Schema: every accepted key path. Anything else is rejected so typos
// cannot silently fall back to defaults.
const std::vector<std::string> kKnownKeys = {
    "graph.n_clients",
    "graph.edges",
    "graph.modalities",
    "data.latent_dim",
    "data.n_classes",
    "data.m_k",
    "data.noise_std",
    "data.n_per_client",
    "data.heterogeneity",
    "data.split_frac",
    "data.seed",
    "data.occlusion.modality",
    "data.occlusion.frac",
    "model.hidden",
    "model.embed_dim",
    "model.n_classes",
    "model.fusion",
    "model.init_seed",
    "sheaf.gamma",
    "sheaf.lambda",
    "sheaf.eta",
    "sheaf.init",
    "sheaf.sigma2",
    "sheaf.seed",
    "train.algorithm",
    "train.rounds",
    "train.alpha",
    "train.eta_phi",
    "train.eta_beta",
    "train.eta_p",
    "train.lambda",
    "train.batch_size",
    "train.full_batch",
    "train.dsgd_head_gossip",
    "train.seeds.data",
    "train.seeds.model",
    "train.seeds.shuffle",
    "output.dir",
    "output.checkpoint_every",
    "output.log_every",
    "output.resume",
};

void collect_paths(const json& node, const std::string& prefix, std::vector<std::string>& out) {
  if (!node.is_object()) {
    out.push_back(prefix);
    return;
  }
  for (const auto& [key, value] : node.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    // graph.edges / graph.modalities / data.m_k are arrays, not key trees.
    collect_paths(value, path, out);
  }
}

void reject_unknown_keys(const json& root) {
  std::vector<std::string> paths;
  collect_paths(root, "", paths);
  for (const auto& p : paths) {
    bool known = false;
    for (const auto& k : kKnownKeys)
      if (p == k) {
        known = true;
        break;
      }
    if (!known) bad("unknown config key '" + p + "'");
  }
}

const json* find(const json& root, const std::string& dotted) {
  const json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string part = dotted.substr(start, dot - start);
    if (!node->is_object() || !node->contains(part)) return nullptr;
    node = &(*node)[part];
    if (dot == std::string::npos) return node;
    start = dot + 1;
  }
}

double as_number(const json& v, const std::string& key) {
  if (!v.is_number()) bad("config key '" + key + "' must be a number");
  return v.get<double>();
}

int as_int(const json& v, const std::string& key) {
  if (!v.is_number_integer()) bad("config key '" + key + "' must be an integer");
  return v.get<int>();
}

std::uint64_t as_seed(const json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0)
    return static_cast<std::uint64_t>(v.get<std::int64_t>());
  bad("config key '" + key + "' must be a nonnegative integer");
}

bool as_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) bad("config key '" + key + "' must be a boolean");
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& key) {
  if (!v.is_string()) bad("config key '" + key + "' must be a string");
  return v.get<std::string>();
}

// Folds an alias pair: both keys may appear, but only with equal values.
const json* resolve_alias(const json& root, const std::string& canonical,
                          const std::string& alias) {
  const json* a = find(root, canonical);
  const json* b = find(root, alias);
  if (a && b && *a != *b)
    bad("config keys '" + canonical + "' and '" + alias + "' are aliases but disagree");
  return a ? a : b;
}

void apply_override(json& root, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) bad("override must look like key=value: '" + kv + "'");
  const std::string key = kv.substr(0, eq);
  const std::string raw = kv.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // bare words (e.g. algorithm names) are strings
  }
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) bad("override key has an empty segment: '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

ExperimentConfig from_json(const json& root) {
  if (!root.is_object()) bad("config root must be a JSON object");
  reject_unknown_keys(root);

  ExperimentConfig c;

  // graph
  const json* gn = find(root, "graph.n_clients");
  if (!gn) bad("missing required key 'graph.n_clients'");
  c.n_clients = as_int(*gn, "graph.n_clients");
  const json* ge = find(root, "graph.edges");
  if (!ge || !ge->is_array()) bad("'graph.edges' must be an array of [i,j] pairs");
  for (const auto& e : *ge) {
    if (!e.is_array() || e.size() != 2) bad("'graph.edges' entries must be [i,j] pairs");
    c.edges.emplace_back(as_int(e[0], "graph.edges"), as_int(e[1], "graph.edges"));
  }
  const json* gm = find(root, "graph.modalities");
  if (!gm || !gm->is_array()) bad("'graph.modalities' must list one modality array per client");
  for (const auto& set : *gm) {
    if (!set.is_array()) bad("'graph.modalities' entries must be arrays of modality ids");
    std::vector<int> s;
    for (const auto& k : set) s.push_back(as_int(k, "graph.modalities"));
    c.modalities.push_back(std::move(s));
  }

  // data (n_classes and seed live behind aliases)
  if (const json* v = find(root, "data.latent_dim")) c.data.latent_dim = as_int(*v, "data.latent_dim");
  if (const json* v = resolve_alias(root, "data.n_classes", "model.n_classes"))
    c.data.n_classes = as_int(*v, "data.n_classes");
  const json* mk = find(root, "data.m_k");
  if (!mk || !mk->is_array()) bad("'data.m_k' must list one feature dimension per modality");
  for (const auto& v : *mk) c.data.m_k.push_back(as_int(v, "data.m_k"));
  if (const json* v = find(root, "data.noise_std")) c.data.noise_std = as_number(*v, "data.noise_std");
  if (const json* v = find(root, "data.n_per_client"))
    c.data.n_per_client = as_int(*v, "data.n_per_client");
  if (const json* v = find(root, "data.heterogeneity"))
    c.data.heterogeneity = as_number(*v, "data.heterogeneity");
  if (const json* v = find(root, "data.split_frac")) c.data.split_frac = as_number(*v, "data.split_frac");
  if (find(root, "data.occlusion.modality") || find(root, "data.occlusion.frac")) {
    OcclusionSettings occ;
    if (const json* v = find(root, "data.occlusion.modality"))
      occ.modality = as_int(*v, "data.occlusion.modality");
    if (const json* v = find(root, "data.occlusion.frac"))
      occ.frac = as_number(*v, "data.occlusion.frac");
    c.data.occlusion = occ;
  }

  // model
  if (const json* v = find(root, "model.hidden")) c.model.hidden = as_int(*v, "model.hidden");
  c.model.n_classes = c.data.n_classes;
  if (const json* v = find(root, "model.fusion")) c.model.fusion = parse_fusion(as_string(*v, "model.fusion"));
  const int n_modalities = static_cast<int>(c.data.m_k.size());
  if (const json* v = find(root, "model.embed_dim")) {
    if (v->is_array()) {
      for (const auto& d : *v) c.model.embed_dims.push_back(as_int(d, "model.embed_dim"));
      if (static_cast<int>(c.model.embed_dims.size()) != n_modalities)
        bad("'model.embed_dim' list must match the modality count");
    } else {
      c.model.embed_dims.assign(static_cast<std::size_t>(n_modalities), as_int(*v, "model.embed_dim"));
    }
  } else {
    c.model.embed_dims.assign(static_cast<std::size_t>(n_modalities), 8);
  }

  // sheaf
  if (const json* v = find(root, "sheaf.gamma")) c.sheaf.gamma = as_number(*v, "sheaf.gamma");
  if (const json* v = resolve_alias(root, "sheaf.lambda", "train.lambda"))
    c.sheaf.lambda = as_number(*v, "sheaf.lambda");
  if (const json* v = resolve_alias(root, "sheaf.eta", "train.eta_p"))
    c.sheaf.eta = as_number(*v, "sheaf.eta");
  if (const json* v = find(root, "sheaf.init")) c.sheaf.init = parse_sheaf_init(as_string(*v, "sheaf.init"));
  if (const json* v = find(root, "sheaf.sigma2")) c.sheaf.sigma2 = as_number(*v, "sheaf.sigma2");
  if (const json* v = find(root, "sheaf.seed")) c.sheaf.seed = as_seed(*v, "sheaf.seed");

  // train
  if (const json* v = find(root, "train.algorithm"))
    c.train.algorithm = parse_algorithm(as_string(*v, "train.algorithm"));
  if (const json* v = find(root, "train.rounds")) c.train.rounds = as_int(*v, "train.rounds");
  if (const json* v = find(root, "train.alpha")) c.train.alpha = as_number(*v, "train.alpha");
  if (const json* v = find(root, "train.eta_phi")) c.train.eta_phi = as_number(*v, "train.eta_phi");
  if (const json* v = find(root, "train.eta_beta")) c.train.eta_beta = as_number(*v, "train.eta_beta");
  if (const json* v = find(root, "train.batch_size")) c.train.batch_size = as_int(*v, "train.batch_size");
  if (const json* v = find(root, "train.full_batch")) c.train.full_batch = as_bool(*v, "train.full_batch");
  if (const json* v = find(root, "train.dsgd_head_gossip"))
    c.train.dsgd_head_gossip = as_bool(*v, "train.dsgd_head_gossip");
  if (const json* v = resolve_alias(root, "train.seeds.data", "data.seed"))
    c.train.seeds.data = as_seed(*v, "train.seeds.data");
  if (const json* v = resolve_alias(root, "train.seeds.model", "model.init_seed"))
    c.train.seeds.model = as_seed(*v, "train.seeds.model");
  if (const json* v = find(root, "train.seeds.shuffle"))
    c.train.seeds.shuffle = as_seed(*v, "train.seeds.shuffle");

  // output
  if (const json* v = find(root, "output.dir")) c.output.dir = as_string(*v, "output.dir");
  if (const json* v = find(root, "output.checkpoint_every"))
    c.output.checkpoint_every = as_int(*v, "output.checkpoint_every");
  if (const json* v = find(root, "output.log_every")) c.output.log_every = as_int(*v, "output.log_every");
  if (const json* v = find(root, "output.resume")) c.output.resume = as_bool(*v, "output.resume");

  // Cross-field validation beyond what construction enforces.
  if (c.train.rounds < 1) bad("'train.rounds' must be at least 1");
  if (c.sheaf.lambda < 0.0) bad("'sheaf.lambda' must be nonnegative");
  if (c.data.split_frac <= 0.0 || c.data.split_frac >= 1.0)
    bad("'data.split_frac' must lie strictly between 0 and 1");
  if (c.data.n_per_client < 2) bad("'data.n_per_client' must be at least 2");
  if (c.train.batch_size < 0) bad("'train.batch_size' must be nonnegative (0 = full batch)");
  if (c.train.algorithm == Algorithm::sheaf_dmfl && c.model.fusion == FusionMode::attention)
    bad("algorithm 'sheaf_dmfl' uses concat fusion; choose 'sheaf_dmfl_att' for attention");
  if (c.train.algorithm == Algorithm::sheaf_dmfl_att) c.model.fusion = FusionMode::attention;
  return c;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text,
                                   const std::vector<std::string>& overrides) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    bad(std::string("config is not valid JSON: ") + e.what());
  }
  for (const auto& kv : overrides) apply_override(root, kv);
  return from_json(root);
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream f(path);
  if (!f) bad("cannot open config file: " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_config_text(buf.str(), overrides);
}

std::string canonical_dump(const ExperimentConfig& c) {
  json j;
  j["graph"]["n_clients"] = c.n_clients;
  auto& edges = j["graph"]["edges"] = json::array();
  for (const auto& [a, b] : c.edges) edges.push_back({a, b});
  j["graph"]["modalities"] = c.modalities;
  j["data"]["latent_dim"] = c.data.latent_dim;
  j["data"]["n_classes"] = c.data.n_classes;
  j["data"]["m_k"] = c.data.m_k;
  j["data"]["noise_std"] = c.data.noise_std;
  j["data"]["n_per_client"] = c.data.n_per_client;
  j["data"]["heterogeneity"] = c.data.heterogeneity;
  j["data"]["split_frac"] = c.data.split_frac;
  if (c.data.occlusion) {
    j["data"]["occlusion"]["modality"] = c.data.occlusion->modality;
    j["data"]["occlusion"]["frac"] = c.data.occlusion->frac;
  }
  j["model"]["hidden"] = c.model.hidden;
  j["model"]["embed_dim"] = c.model.embed_dims;
  j["model"]["fusion"] = c.model.fusion == FusionMode::attention ? "attention" : "concat";
  j["sheaf"]["gamma"] = c.sheaf.gamma;
  j["sheaf"]["lambda"] = c.sheaf.lambda;
  j["sheaf"]["eta"] = c.sheaf.eta;
  j["sheaf"]["init"] = c.sheaf.init == SheafInit::identity ? "identity" : "random";
  j["sheaf"]["sigma2"] = c.sheaf.sigma2;
  j["sheaf"]["seed"] = c.sheaf.seed;
  j["train"]["algorithm"] = algorithm_name(c.train.algorithm);
  j["train"]["rounds"] = c.train.rounds;
  j["train"]["alpha"] = c.train.alpha;
  j["train"]["eta_phi"] = c.train.eta_phi;
  j["train"]["eta_beta"] = c.train.eta_beta;
  j["train"]["batch_size"] = c.train.batch_size;
  j["train"]["full_batch"] = c.train.full_batch;
  j["train"]["dsgd_head_gossip"] = c.train.dsgd_head_gossip;
  j["train"]["seeds"]["data"] = c.train.seeds.data;
  j["train"]["seeds"]["model"] = c.train.seeds.model;
  j["train"]["seeds"]["shuffle"] = c.train.seeds.shuffle;
  return j.dump();
}

std::uint64_t config_hash(const ExperimentConfig& c) {
  const std::string s = canonical_dump(c);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17] = {};
  for (int i = 15; i >= 0; --i) {
    buf[i] = "0123456789abcdef"[h & 0xf];
    h >>= 4;
  }
  return std::string(buf, 16);
}

ExperimentSetup build_setup(const ExperimentConfig& c) {
  ExperimentSetup s;
  s.graph = build_graph(c.n_clients, c.edges, c.modalities);
  if (static_cast<int>(c.data.m_k.size()) != s.graph.n_modalities)
    bad("'data.m_k' lists " + std::to_string(c.data.m_k.size()) + " modalities, graph uses " +
        std::to_string(s.graph.n_modalities));
  s.spec = make_latent_spec(c.data.latent_dim, c.data.n_classes, c.data.m_k, c.data.noise_std,
                            c.train.seeds.data);
  s.data = generate(s.spec, s.graph, c.data.n_per_client, c.data.heterogeneity, c.data.split_frac);
  if (c.data.occlusion)
    for (auto& ds : s.data)
      for (int k : ds.modalities)
        if (k == c.data.occlusion->modality) occlude(ds, k, c.data.occlusion->frac);
  s.state = build_state(s.graph, c.data.m_k, c.model, c.sheaf, c.train.algorithm,
                        c.train.seeds.model);
  return s;
}

void apply_sweep_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.train.seeds.data = derive_seed(seed, 0);
  c.train.seeds.model = derive_seed(seed, 1);
  c.train.seeds.shuffle = derive_seed(seed, 2);
  c.sheaf.seed = derive_seed(seed, 3);
}

}  // namespace sheafdmfl
