#pragma once

#include "mgnt/container.hpp"
#include "mgnt/mesh_graph.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mgnt {

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 1D elastoplastic spring with linear isotropic hardening. The yield
/// force grows with accumulated plastic stretch `alpha`:
///   F_y = k (yield_strain L0 + hardening alpha)
struct PlasticSpring {
  double rest_length = 1.0;
  double stiffness = 1.0;
  double yield_strain = 0.01;
  double hardening = 0.1;  // hardening modulus as a fraction of stiffness
  double plastic = 0.0;    // signed plastic stretch
  double alpha = 0.0;      // accumulated |plastic increment|

  /// Return mapping at current length; updates the plastic state and
  /// returns the (tensile positive) elastic force. `increment` receives the
  /// nonnegative plastic increment of this call.
  double update(double length, double* increment = nullptr);
};

struct OracleConfig {
  Index rows = 8;
  Index cols = 8;
  double spacing = 0.1;
  double node_mass = 0.01;
  double stiffness = 2000.0;     // scaled by kappa
  double kappa = 0.2;
  double shear_ratio = 0.5;      // diagonal spring stiffness fraction
  double yield_strain = 0.03;
  double hardening = 0.2;
  double damping = 5.0;          // axial dashpot per spring
  double gravity = -9.81;
  double wall_y = 0.0;
  double wall_stiffness = 1e5;   // quadratic penalty coefficient
  Index wall_nodes = 14;
  double wall_x0 = -0.3;
  double start_height = 0.4;     // lowest lattice node above the wall
  double start_x = 0.0;
  double tilt_deg = 8.0;
  double initial_vx = 0.0;
  double initial_vy = -3.0;
  double dt = 2e-4;
  Index substeps = 50;
  Index frames = 51;
  double bound = 100.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static OracleConfig from_json(const nlohmann::json& j);
};

/// Time-indexed per-node states over a fixed mesh.
struct Trajectory {
  Mesh mesh;
  std::vector<Tensor> positions;               // T x (N x d)
  std::vector<Tensor> velocity;                // T x (N x d)
  std::vector<Eigen::VectorXd> hardening;      // T x N
  double kappa = 0.0;
  double dt = 0.0;

  Index frame_count() const { return static_cast<Index>(positions.size()); }
  /// Frame t as model input; kinematic nodes carry their ground-truth
  /// next-step motion (zero at the last frame).
  FrameState frame(Index t) const;
  void validate() const;

  ArrayFile to_file() const;
  static Trajectory from_file(const ArrayFile& file);
  void save(const std::filesystem::path& path) const { to_file().save(path); }
  static Trajectory load(const std::filesystem::path& path) {
    return from_file(ArrayFile::load(path));
  }
};

Mesh lattice_mesh(const OracleConfig& config);

/// Semi-implicit Euler integration of the lattice falling onto a rigid wall.
Trajectory simulate_impact(const OracleConfig& config);

struct DatasetEntry {
  std::string path;
  std::string split;
  double kappa = 0.0;
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  std::string kind;  // "impact" or "chain"
  nlohmann::json config;
  std::vector<DatasetEntry> entries;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);
  std::vector<std::filesystem::path> files(const std::filesystem::path& root,
                                           const std::string& split) const;
};

/// kappa ~ U(0.1, 0.3) per trajectory, disjoint per-trajectory seeds.
/// `workers` > 1 simulates trajectories concurrently; output order and
/// content do not depend on it.
std::vector<std::pair<Trajectory, DatasetEntry>> generate_impact_set(
    Index n_train, Index n_test, const OracleConfig& base, std::uint64_t seed, Index workers = 1);

DatasetManifest gen_dataset(const std::filesystem::path& out_dir, Index n_train, Index n_test,
                            const OracleConfig& base, std::uint64_t seed, Index workers = 1);

std::uint64_t trajectory_seed(std::uint64_t base, std::uint64_t index);
double sample_kappa(std::uint64_t seed);

// Long-range chain benchmark.

struct ChainConfig {
  Index nodes = 400;
  double stiffness = 1.0;          // per spring, scaled by kappa
  double ground_stiffness = 0.0;   // far-end anchor; <= 0 selects 0.2 * stiffness / (nodes - 1)
  double drive_amplitude = 0.05;
  double dt = 0.01;
  Index frames = 51;
  double tolerance = 1e-12;        // relative residual for the relaxation
  Index max_iterations = 0;        // <= 0 selects 4 * nodes
  double kappa = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ChainConfig from_json(const nlohmann::json& j);
};

struct RelaxationResult {
  Eigen::VectorXd displacement;  // all nodes, node 0 = drive
  Index iterations = 0;
  double residual = 0.0;
};

/// Spring constants of the chain (nodes - 1 springs) and the anchor.
Eigen::VectorXd chain_springs(const ChainConfig& config);
double chain_ground_stiffness(const ChainConfig& config);

/// Conjugate-gradient relaxation of the quasi-static chain with node 0
/// displaced by `drive`.
RelaxationResult relax_chain(const ChainConfig& config, double drive);

/// Dense direct solve of the same equilibrium (reference path).
Eigen::VectorXd relax_chain_dense(const ChainConfig& config, double drive);

/// Chain trajectory: frame t holds the equilibrium for drive d_t, with d_t
/// drawn independently per frame (d_0 = 0).
Trajectory long_range_benchmark(const ChainConfig& config,
                                const std::vector<double>* drives = nullptr);

std::vector<std::pair<Trajectory, DatasetEntry>> generate_chain_set(
    Index n_train, Index n_test, const ChainConfig& base, std::uint64_t seed, Index workers = 1);

DatasetManifest gen_chain_dataset(const std::filesystem::path& out_dir, Index n_train,
                                  Index n_test, const ChainConfig& base, std::uint64_t seed,
                                  Index workers = 1);

}  // namespace mgnt
