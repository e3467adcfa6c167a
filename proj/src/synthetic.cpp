#include "mgnt/synthetic.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <thread>

namespace mgnt {

double PlasticSpring::update(double length, double* increment) {
  const double trial = stiffness * (length - rest_length - plastic);
  const double yield = stiffness * (yield_strain * rest_length + hardening * alpha);
  const double excess = std::abs(trial) - yield;
  double delta = 0.0;
  if (excess > 0.0) {
    delta = excess / (stiffness * (1.0 + hardening));
    plastic += trial > 0.0 ? delta : -delta;
    alpha += delta;
  }
  if (increment) *increment = delta;
  return stiffness * (length - rest_length - plastic);
}

void OracleConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw std::invalid_argument(std::string("oracle config: ") + name + " must be > 0");
  };
  if (rows < 2 || cols < 2) throw std::invalid_argument("oracle config: lattice needs >= 2x2 nodes");
  positive(spacing, "spacing");
  positive(node_mass, "node_mass");
  positive(stiffness, "stiffness");
  positive(kappa, "kappa");
  positive(shear_ratio, "shear_ratio");
  positive(yield_strain, "yield_strain");
  positive(hardening, "hardening");
  positive(damping, "damping");
  positive(wall_stiffness, "wall_stiffness");
  positive(dt, "dt");
  positive(bound, "bound");
  if (start_height <= 0.0) throw std::invalid_argument("oracle config: lattice must start above the wall");
  if (substeps < 1 || frames < 2 || wall_nodes < 1) {
    throw std::invalid_argument("oracle config: substeps/frames/wall_nodes out of range");
  }
}

nlohmann::json OracleConfig::to_json() const {
  return {{"rows", rows},           {"cols", cols},
          {"spacing", spacing},     {"node_mass", node_mass},
          {"stiffness", stiffness}, {"kappa", kappa},
          {"shear_ratio", shear_ratio}, {"yield_strain", yield_strain},
          {"hardening", hardening}, {"damping", damping},
          {"gravity", gravity},     {"wall_y", wall_y},
          {"wall_stiffness", wall_stiffness}, {"wall_nodes", wall_nodes},
          {"wall_x0", wall_x0},     {"start_height", start_height},
          {"start_x", start_x},     {"tilt_deg", tilt_deg},
          {"initial_vx", initial_vx}, {"initial_vy", initial_vy},
          {"dt", dt},               {"substeps", substeps},
          {"frames", frames},       {"bound", bound},
          {"seed", seed}};
}

OracleConfig OracleConfig::from_json(const nlohmann::json& j) {
  OracleConfig c;
  j.at("rows").get_to(c.rows);
  j.at("cols").get_to(c.cols);
  j.at("spacing").get_to(c.spacing);
  j.at("node_mass").get_to(c.node_mass);
  j.at("stiffness").get_to(c.stiffness);
  j.at("kappa").get_to(c.kappa);
  j.at("shear_ratio").get_to(c.shear_ratio);
  j.at("yield_strain").get_to(c.yield_strain);
  j.at("hardening").get_to(c.hardening);
  j.at("damping").get_to(c.damping);
  j.at("gravity").get_to(c.gravity);
  j.at("wall_y").get_to(c.wall_y);
  j.at("wall_stiffness").get_to(c.wall_stiffness);
  j.at("wall_nodes").get_to(c.wall_nodes);
  j.at("wall_x0").get_to(c.wall_x0);
  j.at("start_height").get_to(c.start_height);
  j.at("start_x").get_to(c.start_x);
  j.at("tilt_deg").get_to(c.tilt_deg);
  j.at("initial_vx").get_to(c.initial_vx);
  j.at("initial_vy").get_to(c.initial_vy);
  j.at("dt").get_to(c.dt);
  j.at("substeps").get_to(c.substeps);
  j.at("frames").get_to(c.frames);
  j.at("bound").get_to(c.bound);
  j.at("seed").get_to(c.seed);
  return c;
}

FrameState Trajectory::frame(Index t) const {
  if (t < 0 || t >= frame_count()) {
    throw IndexError("Trajectory::frame: " + std::to_string(t) + " outside [0," +
                     std::to_string(frame_count()) + ")");
  }
  FrameState f;
  f.positions = positions[static_cast<std::size_t>(t)];
  f.velocity = velocity[static_cast<std::size_t>(t)];
  f.hardening = hardening[static_cast<std::size_t>(t)];
  f.kappa = kappa;
  f.prescribed_increment = Tensor::Zero(mesh.node_count(), mesh.dim());
  if (t + 1 < frame_count()) {
    const Tensor& next = positions[static_cast<std::size_t>(t + 1)];
    for (Index i = 0; i < mesh.node_count(); ++i) {
      if (mesh.node_type[static_cast<std::size_t>(i)] != NodeType::Deformable) {
        f.prescribed_increment.row(i) = next.row(i) - f.positions.row(i);
      }
    }
  }
  return f;
}

void Trajectory::validate() const {
  mesh.validate();
  const auto T = positions.size();
  if (velocity.size() != T || hardening.size() != T) {
    throw ValidationError("trajectory: array lengths differ across fields");
  }
  for (std::size_t t = 0; t < T; ++t) {
    if (positions[t].rows() != mesh.node_count() || positions[t].cols() != mesh.dim() ||
        velocity[t].rows() != mesh.node_count() || velocity[t].cols() != mesh.dim() ||
        hardening[t].size() != mesh.node_count()) {
      throw ValidationError("trajectory: frame " + std::to_string(t) + " has inconsistent shapes");
    }
    if ((hardening[t].array() < 0.0).any()) {
      throw ValidationError("trajectory: negative hardening at frame " + std::to_string(t));
    }
  }
}

namespace {

const char* element_kind_name(ElementKind k) {
  switch (k) {
    case ElementKind::Segment: return "segment";
    case ElementKind::Triangle: return "triangle";
    case ElementKind::Quad: return "quad";
    case ElementKind::Tetra: return "tetra";
  }
  return "quad";
}

ElementKind element_kind_from(const std::string& s) {
  if (s == "segment") return ElementKind::Segment;
  if (s == "triangle") return ElementKind::Triangle;
  if (s == "quad") return ElementKind::Quad;
  if (s == "tetra") return ElementKind::Tetra;
  throw FormatError("unknown element kind '" + s + "'");
}

}  // namespace

ArrayFile Trajectory::to_file() const {
  ArrayFile f;
  const Index T = frame_count();
  const Index N = mesh.node_count();
  const Index d = mesh.dim();
  f.put("X", mesh.reference);
  std::vector<double> x;
  std::vector<double> v;
  std::vector<double> a;
  x.reserve(static_cast<std::size_t>(T * N * d));
  v.reserve(static_cast<std::size_t>(T * N * d));
  a.reserve(static_cast<std::size_t>(T * N));
  for (Index t = 0; t < T; ++t) {
    const auto& p = positions[static_cast<std::size_t>(t)];
    const auto& q = velocity[static_cast<std::size_t>(t)];
    x.insert(x.end(), p.data(), p.data() + p.size());
    v.insert(v.end(), q.data(), q.data() + q.size());
    const auto& h = hardening[static_cast<std::size_t>(t)];
    a.insert(a.end(), h.data(), h.data() + h.size());
  }
  f.put("x", {T, N, d}, std::move(x));
  f.put("v", {T, N, d}, std::move(v));
  f.put("alpha", {T, N}, std::move(a));
  f.put_scalar("kappa", kappa);
  f.put_scalar("dt", dt);
  std::vector<std::int64_t> types;
  for (auto t : mesh.node_type) types.push_back(static_cast<std::int64_t>(t));
  f.put_int("node_type", {N}, std::move(types));
  f.put_int("component_id", {N}, mesh.component_id);
  std::vector<std::int64_t> el(mesh.elements.data(), mesh.elements.data() + mesh.elements.size());
  f.put_int("elements", {mesh.elements.rows(), mesh.elements.cols()}, std::move(el));
  f.meta()["format"] = "mgnt-trajectory/1";
  f.meta()["element_kind"] = element_kind_name(mesh.element_kind);
  return f;
}

Trajectory Trajectory::from_file(const ArrayFile& f) {
  Trajectory tr;
  tr.mesh.reference = f.matrix("X");
  const Index N = tr.mesh.reference.rows();
  const Index d = tr.mesh.reference.cols();
  const NamedArray& x = f.at("x");
  const NamedArray& v = f.at("v");
  const NamedArray& a = f.at("alpha");
  if (x.shape.size() != 3 || x.shape[1] != N || x.shape[2] != d || v.shape != x.shape ||
      a.shape.size() != 2 || a.shape[0] != x.shape[0] || a.shape[1] != N) {
    throw FormatError("trajectory arrays have inconsistent shapes");
  }
  const Index T = x.shape[0];
  for (Index t = 0; t < T; ++t) {
    const auto off = static_cast<std::size_t>(t * N * d);
    tr.positions.push_back(Eigen::Map<const Tensor>(x.f64.data() + off, N, d));
    tr.velocity.push_back(Eigen::Map<const Tensor>(v.f64.data() + off, N, d));
    tr.hardening.push_back(Eigen::Map<const Eigen::VectorXd>(a.f64.data() + t * N, N));
  }
  tr.kappa = f.scalar("kappa");
  tr.dt = f.scalar("dt");
  for (auto t : f.ints("node_type")) tr.mesh.node_type.push_back(static_cast<NodeType>(t));
  tr.mesh.component_id = f.ints("component_id");
  const NamedArray& el = f.at("elements");
  tr.mesh.elements.resize(el.shape.at(0), el.shape.at(1));
  for (Index i = 0; i < tr.mesh.elements.size(); ++i) {
    tr.mesh.elements.data()[i] = static_cast<Index>(el.i64[static_cast<std::size_t>(i)]);
  }
  tr.mesh.element_kind = element_kind_from(f.meta().value("element_kind", std::string("quad")));
  tr.validate();
  return tr;
}

Mesh lattice_mesh(const OracleConfig& c) {
  c.validate();
  const Index n_body = c.rows * c.cols;
  const Index n = n_body + c.wall_nodes;
  Mesh m;
  m.reference.resize(n, 2);
  const double theta = c.tilt_deg * std::numbers::pi / 180.0;
  const double cx = 0.5 * (c.cols - 1) * c.spacing;
  const double cy = 0.5 * (c.rows - 1) * c.spacing;
  for (Index r = 0; r < c.rows; ++r) {
    for (Index q = 0; q < c.cols; ++q) {
      const double px = q * c.spacing - cx;
      const double py = r * c.spacing - cy;
      m.reference(r * c.cols + q, 0) = std::cos(theta) * px - std::sin(theta) * py;
      m.reference(r * c.cols + q, 1) = std::sin(theta) * px + std::cos(theta) * py;
    }
  }
  const auto body = m.reference.topRows(n_body);
  const Eigen::RowVector2d shift(c.start_x - body.col(0).minCoeff(),
                                 c.wall_y + c.start_height - body.col(1).minCoeff());
  m.reference.topRows(n_body).rowwise() += shift;
  for (Index w = 0; w < c.wall_nodes; ++w) {
    m.reference(n_body + w, 0) = c.wall_x0 + w * c.spacing;
    m.reference(n_body + w, 1) = c.wall_y;
  }
  m.elements.resize((c.rows - 1) * (c.cols - 1), 4);
  for (Index r = 0; r + 1 < c.rows; ++r) {
    for (Index q = 0; q + 1 < c.cols; ++q) {
      const Index e = r * (c.cols - 1) + q;
      m.elements.row(e) << r * c.cols + q, r * c.cols + q + 1, (r + 1) * c.cols + q + 1,
          (r + 1) * c.cols + q;
    }
  }
  m.element_kind = ElementKind::Quad;
  m.node_type.assign(static_cast<std::size_t>(n), NodeType::Deformable);
  m.component_id.assign(static_cast<std::size_t>(n), 0);
  for (Index w = n_body; w < n; ++w) {
    m.node_type[static_cast<std::size_t>(w)] = NodeType::Obstacle;
    m.component_id[static_cast<std::size_t>(w)] = 1;
  }
  return m;
}

Trajectory simulate_impact(const OracleConfig& c) {
  Trajectory tr;
  tr.mesh = lattice_mesh(c);
  tr.kappa = c.kappa;
  tr.dt = c.dt * static_cast<double>(c.substeps);
  const Index n_body = c.rows * c.cols;
  const Index n = tr.mesh.node_count();

  struct Link {
    Index i;
    Index j;
    PlasticSpring spring;
  };
  std::vector<Link> links;
  const double k = c.stiffness * c.kappa;
  auto connect = [&](Index i, Index j, double k_ij) {
    const double len = (tr.mesh.reference.row(i) - tr.mesh.reference.row(j)).norm();
    links.push_back({i, j, PlasticSpring{len, k_ij, c.yield_strain, c.hardening, 0.0, 0.0}});
  };
  for (Index r = 0; r < c.rows; ++r) {
    for (Index q = 0; q < c.cols; ++q) {
      const Index id = r * c.cols + q;
      if (q + 1 < c.cols) connect(id, id + 1, k);
      if (r + 1 < c.rows) connect(id, id + c.cols, k);
      if (q + 1 < c.cols && r + 1 < c.rows) {
        connect(id, id + c.cols + 1, c.shear_ratio * k);
        connect(id + 1, id + c.cols, c.shear_ratio * k);
      }
    }
  }

  Tensor x = tr.mesh.reference;
  Tensor v = Tensor::Zero(n, 2);
  v.topRows(n_body).col(0).setConstant(c.initial_vx);
  v.topRows(n_body).col(1).setConstant(c.initial_vy);
  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
  Tensor force(n, 2);

  auto store = [&](Index frame) {
    if (!x.allFinite() || !v.allFinite() || x.cwiseAbs().maxCoeff() > c.bound) {
      std::ostringstream os;
      os << "simulate_impact: unstable at frame " << frame << " (dt=" << c.dt
         << ", stiffness=" << k << ", wall_stiffness=" << c.wall_stiffness << ")";
      throw SimulationError(os.str());
    }
    tr.positions.push_back(x);
    tr.velocity.push_back(v);
    tr.hardening.push_back(alpha);
  };

  store(0);
  for (Index frame = 1; frame < c.frames; ++frame) {
    for (Index s = 0; s < c.substeps; ++s) {
      force.setZero();
      force.topRows(n_body).col(1).setConstant(c.node_mass * c.gravity);
      for (Link& l : links) {
        const Eigen::RowVector2d d = x.row(l.j) - x.row(l.i);
        const double len = d.norm();
        const Eigen::RowVector2d dir = d / len;
        double inc = 0.0;
        const double axial = l.spring.update(len, &inc) +
                             c.damping * (v.row(l.j) - v.row(l.i)).dot(dir);
        force.row(l.i) += axial * dir;
        force.row(l.j) -= axial * dir;
        if (inc > 0.0) {
          alpha(l.i) += 0.5 * inc;
          alpha(l.j) += 0.5 * inc;
        }
      }
      for (Index i = 0; i < n_body; ++i) {
        const double pen = c.wall_y - x(i, 1);
        if (pen <= 0.0) continue;
        const double tangent = 2.0 * c.wall_stiffness * pen;
        const double critical = 2.0 * std::sqrt(tangent * c.node_mass);
        const double normal = c.wall_stiffness * pen * pen - critical * v(i, 1);
        force(i, 1) += std::max(0.0, normal);
      }
      v.topRows(n_body) += (c.dt / c.node_mass) * force.topRows(n_body);
      x.topRows(n_body) += c.dt * v.topRows(n_body);
    }
    store(frame);
  }
  return tr;
}

std::uint64_t trajectory_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 over (base, index)
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double sample_kappa(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.1, 0.3);
  double k = u(rng);
  while (!(k > 0.1 && k < 0.3)) k = u(rng);
  return k;
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& e : entries) {
    files.push_back({{"path", e.path}, {"split", e.split}, {"kappa", e.kappa}, {"seed", e.seed}});
  }
  return {{"format", "mgnt-dataset/1"}, {"kind", kind}, {"config", config}, {"files", files}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "mgnt-dataset/1") {
    throw FormatError("manifest: unsupported format tag");
  }
  DatasetManifest m;
  m.kind = j.at("kind").get<std::string>();
  m.config = j.at("config");
  for (const auto& f : j.at("files")) {
    m.entries.push_back({f.at("path").get<std::string>(), f.at("split").get<std::string>(),
                         f.at("kappa").get<double>(), f.at("seed").get<std::uint64_t>()});
  }
  return m;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << to_json().dump(2) << "\n";
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return from_json(nlohmann::json::parse(is));
}

std::vector<std::filesystem::path> DatasetManifest::files(const std::filesystem::path& root,
                                                          const std::string& split) const {
  std::vector<std::filesystem::path> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(root / e.path);
  }
  return out;
}

namespace {

/// Runs fn(i) for i in [0, n) on up to `workers` threads; results land in
/// index order regardless of scheduling.
template <typename T, typename Fn>
std::vector<T> parallel_map(Index n, Index workers, Fn fn) {
  std::vector<std::optional<T>> slots(static_cast<std::size_t>(n));
  std::atomic<Index> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&] {
    for (Index i = next++; i < n; i = next++) {
      try {
        slots[static_cast<std::size_t>(i)].emplace(fn(i));
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const Index threads = std::clamp<Index>(workers, 1, std::max<Index>(n, 1));
  std::vector<std::thread> pool;
  for (Index t = 1; t < threads; ++t) pool.emplace_back(run);
  run();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
  std::vector<T> out;
  out.reserve(slots.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

DatasetManifest write_dataset(const std::filesystem::path& out_dir, const std::string& kind,
                              nlohmann::json config, std::uint64_t seed,
                              std::vector<std::pair<Trajectory, DatasetEntry>> set) {
  std::filesystem::create_directories(out_dir);
  DatasetManifest manifest;
  manifest.kind = kind;
  manifest.config = std::move(config);
  manifest.config["seed"] = seed;
  for (auto& [tr, entry] : set) {
    tr.save(out_dir / entry.path);
    manifest.entries.push_back(entry);
  }
  manifest.save(out_dir / "manifest.json");
  return manifest;
}

}  // namespace

std::vector<std::pair<Trajectory, DatasetEntry>> generate_impact_set(
    Index n_train, Index n_test, const OracleConfig& base, std::uint64_t seed, Index workers) {
  if (n_train < 1 || n_test < 1) throw std::invalid_argument("gen_dataset: counts must be >= 1");
  return parallel_map<std::pair<Trajectory, DatasetEntry>>(n_train + n_test, workers, [&](Index i) {
    const bool train = i < n_train;
    OracleConfig c = base;
    c.seed = trajectory_seed(seed, static_cast<std::uint64_t>(i));
    c.kappa = sample_kappa(c.seed);
    char name[32];
    std::snprintf(name, sizeof(name), "%s_%03d.mgnt", train ? "train" : "test",
                  static_cast<int>(train ? i : i - n_train));
    return std::pair{simulate_impact(c), DatasetEntry{name, train ? "train" : "test", c.kappa, c.seed}};
  });
}

DatasetManifest gen_dataset(const std::filesystem::path& out_dir, Index n_train, Index n_test,
                            const OracleConfig& base, std::uint64_t seed, Index workers) {
  return write_dataset(out_dir, "impact", base.to_json(), seed,
                       generate_impact_set(n_train, n_test, base, seed, workers));
}

DatasetManifest gen_chain_dataset(const std::filesystem::path& out_dir, Index n_train, Index n_test,
                                  const ChainConfig& base, std::uint64_t seed, Index workers) {
  return write_dataset(out_dir, "chain", base.to_json(), seed,
                       generate_chain_set(n_train, n_test, base, seed, workers));
}

// Chain benchmark.

void ChainConfig::validate() const {
  if (nodes < 100) throw std::invalid_argument("chain config: nodes must be >= 100");
  if (!(stiffness > 0.0) || !(kappa > 0.0) || !(dt > 0.0) || !(tolerance > 0.0)) {
    throw std::invalid_argument("chain config: stiffness/kappa/dt/tolerance must be > 0");
  }
  if (frames < 2) throw std::invalid_argument("chain config: frames must be >= 2");
}

nlohmann::json ChainConfig::to_json() const {
  return {{"nodes", nodes},
          {"stiffness", stiffness},
          {"ground_stiffness", ground_stiffness},
          {"drive_amplitude", drive_amplitude},
          {"dt", dt},
          {"frames", frames},
          {"tolerance", tolerance},
          {"max_iterations", max_iterations},
          {"kappa", kappa},
          {"seed", seed}};
}

ChainConfig ChainConfig::from_json(const nlohmann::json& j) {
  ChainConfig c;
  j.at("nodes").get_to(c.nodes);
  j.at("stiffness").get_to(c.stiffness);
  j.at("ground_stiffness").get_to(c.ground_stiffness);
  j.at("drive_amplitude").get_to(c.drive_amplitude);
  j.at("dt").get_to(c.dt);
  j.at("frames").get_to(c.frames);
  j.at("tolerance").get_to(c.tolerance);
  j.at("max_iterations").get_to(c.max_iterations);
  j.at("kappa").get_to(c.kappa);
  j.at("seed").get_to(c.seed);
  return c;
}

Eigen::VectorXd chain_springs(const ChainConfig& c) {
  return Eigen::VectorXd::Constant(c.nodes - 1, c.kappa * c.stiffness);
}

double chain_ground_stiffness(const ChainConfig& c) {
  return c.ground_stiffness > 0.0 ? c.ground_stiffness
                                  : 0.2 * c.stiffness / static_cast<double>(c.nodes - 1);
}

namespace {

// Stiffness operator on the free nodes 1..n-1 (node 0 is driven).
void apply_chain(const Eigen::VectorXd& k, double kg, const Eigen::VectorXd& u, Eigen::VectorXd& out) {
  const Index m = u.size();
  for (Index a = 0; a < m; ++a) {
    double s = k(a) * u(a);
    if (a + 1 < m) s += k(a + 1) * (u(a) - u(a + 1));
    if (a > 0) s -= k(a) * u(a - 1);
    if (a + 1 == m) s += kg * u(a);
    out(a) = s;
  }
}

}  // namespace

RelaxationResult relax_chain(const ChainConfig& c, double drive) {
  c.validate();
  const Eigen::VectorXd k = chain_springs(c);
  const double kg = chain_ground_stiffness(c);
  const Index m = c.nodes - 1;
  Eigen::VectorXd b = Eigen::VectorXd::Zero(m);
  b(0) = k(0) * drive;
  Eigen::VectorXd u = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd r = b;
  Eigen::VectorXd p = r;
  Eigen::VectorXd ap(m);
  const double bnorm = b.norm();
  RelaxationResult res;
  res.displacement = Eigen::VectorXd::Zero(c.nodes);
  res.displacement(0) = drive;
  if (bnorm == 0.0) return res;
  double rr = r.squaredNorm();
  const Index max_it = c.max_iterations > 0 ? c.max_iterations : 4 * c.nodes;
  Index it = 0;
  while (std::sqrt(rr) > c.tolerance * bnorm) {
    if (it >= max_it) {
      std::ostringstream os;
      os << "relax_chain: no convergence after " << it << " iterations, relative residual "
         << std::sqrt(rr) / bnorm;
      throw SimulationError(os.str());
    }
    apply_chain(k, kg, p, ap);
    const double step = rr / p.dot(ap);
    u += step * p;
    r -= step * ap;
    const double rr_next = r.squaredNorm();
    p = r + (rr_next / rr) * p;
    rr = rr_next;
    ++it;
  }
  res.displacement.tail(m) = u;
  res.iterations = it;
  res.residual = std::sqrt(rr) / bnorm;
  return res;
}

Eigen::VectorXd relax_chain_dense(const ChainConfig& c, double drive) {
  c.validate();
  const Eigen::VectorXd k = chain_springs(c);
  const double kg = chain_ground_stiffness(c);
  const Index m = c.nodes - 1;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m, m);
  for (Index a = 0; a < m; ++a) {
    A(a, a) += k(a);
    if (a > 0) A(a, a - 1) -= k(a);
    if (a + 1 < m) {
      A(a, a) += k(a + 1);
      A(a, a + 1) -= k(a + 1);
    }
  }
  A(m - 1, m - 1) += kg;
  Eigen::VectorXd b = Eigen::VectorXd::Zero(m);
  b(0) = k(0) * drive;
  Eigen::VectorXd out(c.nodes);
  out(0) = drive;
  out.tail(m) = A.partialPivLu().solve(b);
  return out;
}

Trajectory long_range_benchmark(const ChainConfig& c, const std::vector<double>* drives) {
  c.validate();
  std::vector<double> d;
  if (drives) {
    if (static_cast<Index>(drives->size()) != c.frames) {
      throw std::invalid_argument("long_range_benchmark: drive sequence length differs from frames");
    }
    d = *drives;
  } else {
    std::mt19937_64 rng(c.seed);
    std::uniform_real_distribution<double> u(-c.drive_amplitude, c.drive_amplitude);
    d.push_back(0.0);
    for (Index t = 1; t < c.frames; ++t) d.push_back(u(rng));
  }
  Trajectory tr;
  Mesh& m = tr.mesh;
  m.reference = Tensor::Zero(c.nodes, 2);
  for (Index i = 0; i < c.nodes; ++i) m.reference(i, 0) = static_cast<double>(i) / (c.nodes - 1);
  m.elements.resize(c.nodes - 1, 2);
  for (Index e = 0; e + 1 < c.nodes; ++e) m.elements.row(e) << e, e + 1;
  m.element_kind = ElementKind::Segment;
  m.node_type.assign(static_cast<std::size_t>(c.nodes), NodeType::Deformable);
  m.node_type[0] = NodeType::Actuator;
  m.component_id.assign(static_cast<std::size_t>(c.nodes), 0);
  tr.kappa = c.kappa;
  tr.dt = c.dt;
  for (Index t = 0; t < c.frames; ++t) {
    const RelaxationResult r = relax_chain(c, d[static_cast<std::size_t>(t)]);
    Tensor x = m.reference;
    x.col(0) += r.displacement;
    Tensor v = Tensor::Zero(c.nodes, 2);
    if (t > 0) v = (x - tr.positions.back()) / c.dt;
    tr.positions.push_back(std::move(x));
    tr.velocity.push_back(std::move(v));
    tr.hardening.push_back(Eigen::VectorXd::Zero(c.nodes));
  }
  return tr;
}

std::vector<std::pair<Trajectory, DatasetEntry>> generate_chain_set(
    Index n_train, Index n_test, const ChainConfig& base, std::uint64_t seed, Index workers) {
  if (n_train < 1 || n_test < 1) throw std::invalid_argument("chain set: counts must be >= 1");
  return parallel_map<std::pair<Trajectory, DatasetEntry>>(n_train + n_test, workers, [&](Index i) {
    const bool train = i < n_train;
    ChainConfig c = base;
    c.seed = trajectory_seed(seed ^ 0xc4a1full, static_cast<std::uint64_t>(i));
    c.kappa = sample_kappa(c.seed);
    char name[40];
    std::snprintf(name, sizeof(name), "chain_%s_%03d.mgnt", train ? "train" : "test",
                  static_cast<int>(train ? i : i - n_train));
    return std::pair{long_range_benchmark(c), DatasetEntry{name, train ? "train" : "test", c.kappa, c.seed}};
  });
}

}  // namespace mgnt
