#include "mgnt/run_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace mgnt {

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = {
      {"seed", "0", "default", "base seed; MGNT_SEED and --seed override it"},

      {"data.kind", "impact", "default", "impact (elastoplastic lattice) or chain (long-range benchmark)"},
      {"data.n_train", "18", "paper", "training trajectories"},
      {"data.n_test", "10", "paper", "test trajectories"},
      {"data.rows", "8", "default", "lattice rows"},
      {"data.cols", "8", "default", "lattice columns"},
      {"data.frames", "51", "default", "stored frames per trajectory (50 steps)"},
      {"data.substeps", "50", "default", "fine steps per stored frame"},
      {"data.dt", "2e-4", "default", "fine time step"},
      {"data.stiffness", "2000", "default", "base spring stiffness, scaled by kappa"},
      {"data.yield_strain", "0.03", "default", "spring yield strain"},
      {"data.hardening", "0.2", "default", "hardening modulus over stiffness"},
      {"data.damping", "5", "default", "axial dashpot coefficient"},
      {"data.initial_vy", "-3", "default", "initial vertical velocity"},
      {"data.tilt_deg", "8", "default", "initial lattice tilt in degrees"},

      {"chain.nodes", "400", "default", "chain length"},
      {"chain.drive_amplitude", "0.05", "default", "drive drawn uniformly from +-amplitude"},
      {"chain.frames", "51", "default", "stored frames per chain trajectory"},
      {"chain.tolerance", "1e-12", "default", "relative residual of the relaxation"},

      {"model.latent_dim", "64", "paper", "node/edge latent width"},
      {"model.mpnn_pre", "2", "paper", "pre-processor message-passing iterations"},
      {"model.mpnn_refine", "2", "paper", "refinement message-passing iterations"},
      {"model.n_blocks", "2", "paper", "transformer blocks (0 = MPNN-only ablation)"},
      {"model.n_heads", "4", "paper", "attention heads"},
      {"model.n_tokens", "32", "paper", "physics tokens P"},
      {"model.proj_width", "64", "paper", "transformer projection width"},
      {"model.head_width", "32", "paper", "per-head width"},
      {"model.ffn_multiplier", "4", "default", "FFN hidden width over projection width"},
      {"model.tau0", "0.5", "default", "base slice temperature"},
      {"model.tau_min", "0.01", "default", "temperature clamp"},
      {"model.leaky_slope", "0.01", "default", "LeakyReLU negative slope"},
      {"model.decoder_init_scale", "0.1", "default", "init scale of the last decoder layer"},

      {"graph.contact_radius", "0", "default", "contact radius; 0 = 1.5x median mesh-edge length"},
      {"graph.tied_k", "3", "default", "tied-edge neighbours across components"},
      {"graph.tie_cutoff_factor", "3", "default", "tie interface cutoff over median edge length"},
      {"graph.n_frequencies", "8", "default", "positional-encoding frequencies per axis"},

      {"train.lr", "1e-4", "default", "initial learning rate"},
      {"train.lr_final", "1e-6", "default", "learning rate at the last step"},
      {"train.steps", "20000", "default", "optimizer steps"},
      {"train.batch_size", "2", "default", "steps per batch, all from one trajectory"},
      {"train.noise_scale", "0.003", "default", "input noise in units of feature std"},
      {"train.target_mode", "state", "default", "state (next-step states) or delta"},
      {"train.checkpoint_every", "500", "default", "checkpoint period in steps (0 = final only)"},

      {"eval.horizon", "0", "default", "rollout horizon; 0 = full stored length"},
      {"eval.split", "test", "default", "dataset split evaluated"},
  };
  return schema;
}

namespace {

const ConfigKey* find_key(const std::string& key) {
  for (const auto& k : config_schema()) {
    if (k.key == key) return &k;
  }
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  return out;
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
  return out;
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : config_schema()) values_[k.key] = k.value;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& source) {
  RunConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!find_key(key)) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
    }
    c.set(key, value);
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!find_key(key)) throw ConfigError("unknown config key '" + key + "'");
  if (value.empty()) throw ConfigError("config key '" + key + "' has an empty value");
  values_[key] = value;
  overridden_[key] = true;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double RunConfig::number(const std::string& key) const { return parse_double(key, get(key)); }

Index RunConfig::integer(const std::string& key) const { return parse_int(key, get(key)); }

std::uint64_t RunConfig::seed() const {
  const Index s = integer("seed");
  if (s < 0) throw ConfigError("config key 'seed' must be >= 0");
  return static_cast<std::uint64_t>(s);
}

std::string RunConfig::dump() const {
  std::ostringstream os;
  for (const auto& k : config_schema()) {
    const bool changed = overridden_.count(k.key) > 0;
    os << "# " << k.doc << " [" << (changed ? "set" : k.provenance) << "]\n";
    os << k.key << " = " << values_.at(k.key) << "\n";
  }
  return os.str();
}

void RunConfig::echo(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "config.resolved.txt");
  if (!os) throw std::runtime_error("cannot write " + (dir / "config.resolved.txt").string());
  os << dump();
}

OracleConfig RunConfig::oracle() const {
  OracleConfig o;
  o.rows = integer("data.rows");
  o.cols = integer("data.cols");
  o.frames = integer("data.frames");
  o.substeps = integer("data.substeps");
  o.dt = number("data.dt");
  o.stiffness = number("data.stiffness");
  o.yield_strain = number("data.yield_strain");
  o.hardening = number("data.hardening");
  o.damping = number("data.damping");
  o.initial_vy = number("data.initial_vy");
  o.tilt_deg = number("data.tilt_deg");
  try {
    o.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return o;
}

ChainConfig RunConfig::chain() const {
  ChainConfig c;
  c.nodes = integer("chain.nodes");
  c.drive_amplitude = number("chain.drive_amplitude");
  c.frames = integer("chain.frames");
  c.tolerance = number("chain.tolerance");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

GraphOptions RunConfig::graph() const {
  GraphOptions g;
  g.contact_radius = number("graph.contact_radius");
  g.tied_k = integer("graph.tied_k");
  g.tie_cutoff_factor = number("graph.tie_cutoff_factor");
  g.n_frequencies = integer("graph.n_frequencies");
  if (g.tied_k < 1 || g.n_frequencies < 1) {
    throw ConfigError("graph.tied_k and graph.n_frequencies must be >= 1");
  }
  return g;
}

ModelConfig RunConfig::model(const FeatureDims& dims) const {
  ModelConfig m;
  m.latent_dim = integer("model.latent_dim");
  m.mpnn_pre = integer("model.mpnn_pre");
  m.mpnn_refine = integer("model.mpnn_refine");
  m.n_blocks = integer("model.n_blocks");
  m.n_heads = integer("model.n_heads");
  m.n_tokens = integer("model.n_tokens");
  m.proj_width = integer("model.proj_width");
  m.head_width = integer("model.head_width");
  m.ffn_multiplier = integer("model.ffn_multiplier");
  m.tau0 = number("model.tau0");
  m.tau_min = number("model.tau_min");
  m.leaky_slope = number("model.leaky_slope");
  m.decoder_init_scale = number("model.decoder_init_scale");
  m.dims = dims;
  m.validate();
  return m;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.lr = number("train.lr");
  t.lr_final = number("train.lr_final");
  t.steps = integer("train.steps");
  t.batch_size = integer("train.batch_size");
  t.noise_scale = number("train.noise_scale");
  t.target_mode = target_mode_from(get("train.target_mode"));
  t.checkpoint_every = integer("train.checkpoint_every");
  t.seed = seed();
  t.validate();
  return t;
}

}  // namespace mgnt
