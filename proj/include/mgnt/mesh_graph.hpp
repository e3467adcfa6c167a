#pragma once

#include "mgnt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <numbers>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mgnt {

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class NodeType : std::int64_t { Deformable = 0, Obstacle = 1, Clamped = 2, Actuator = 3 };
inline constexpr Index kNodeTypeCount = 4;

enum class ElementKind { Segment, Triangle, Quad, Tetra };

/// Lagrangian mesh in its reference configuration.
struct Mesh {
  Tensor reference;                        // N x d
  MatrixX<Index> elements;                 // E x nodes-per-element
  ElementKind element_kind = ElementKind::Quad;
  std::vector<NodeType> node_type;         // N
  std::vector<std::int64_t> component_id;  // N

  Index node_count() const { return reference.rows(); }
  Index dim() const { return reference.cols(); }
  void validate() const;
};

/// Directed edges as parallel sender/receiver arrays.
struct EdgeSet {
  std::vector<Index> senders;
  std::vector<Index> receivers;

  std::size_t size() const { return senders.size(); }
  bool empty() const { return senders.empty(); }
  void push(Index s, Index r) {
    senders.push_back(s);
    receivers.push_back(r);
  }
  /// Sorts ascending by (sender, receiver) and removes duplicates.
  void canonicalize();
};

inline std::uint64_t edge_key(Index i, Index j) {
  return (static_cast<std::uint64_t>(i) << 32) | static_cast<std::uint64_t>(j);
}

/// Undirected union of element edges, both directions, sorted and unique.
/// Quads contribute their perimeter only.
EdgeSet build_mesh_edges(const Mesh& mesh);

struct TiedEdgeOptions {
  Index k = 3;
  /// Only nodes within this reference distance of another component are
  /// interface nodes, and ties never exceed it.
  double interface_cutoff = std::numeric_limits<double>::infinity();
};

/// k-nearest cross-component ties in the reference configuration,
/// symmetrized. Obstacle nodes are never tied. Empty for a single component.
EdgeSet build_tied_edges(const Mesh& mesh, const TiedEdgeOptions& options);

/// Unordered node pairs that may not carry a contact edge: mesh/tied edges
/// and pairs sharing an element.
std::unordered_set<std::uint64_t> contact_exclusions(const Mesh& mesh, const EdgeSet& mesh_edges);

/// All directed pairs i != j with |x_i - x_j| < radius that are not
/// excluded, using a uniform hash grid of cell size `radius`. Sorted.
EdgeSet detect_contact_edges(const Tensor& positions, double radius,
                             const std::unordered_set<std::uint64_t>& excluded);

/// O(N^2) reference scan with the same contract as detect_contact_edges.
EdgeSet detect_contact_edges_brute_force(const Tensor& positions, double radius,
                                         const std::unordered_set<std::uint64_t>& excluded);

double median_edge_length(const Tensor& positions, const EdgeSet& edges);

/// Per edge (i,j): (X_i - X_j, |X_i - X_j|, x_i - x_j, |x_i - x_j|).
template <typename Scalar>
MatrixX<Scalar> mesh_edge_features(const MatrixX<Scalar>& reference, const MatrixX<Scalar>& current,
                                   const EdgeSet& edges) {
  const Index d = reference.cols();
  MatrixX<Scalar> out(static_cast<Index>(edges.size()), 2 * (d + 1));
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto r = static_cast<Index>(e);
    const Index i = edges.senders[e];
    const Index j = edges.receivers[e];
    const auto dX = (reference.row(i) - reference.row(j)).eval();
    const auto dx = (current.row(i) - current.row(j)).eval();
    out.block(r, 0, 1, d) = dX;
    out(r, d) = dX.norm();
    out.block(r, d + 1, 1, d) = dx;
    out(r, 2 * d + 1) = dx.norm();
  }
  return out;
}

/// Per edge (i,j): (x_i - x_j, |x_i - x_j|).
template <typename Scalar>
MatrixX<Scalar> contact_edge_features(const MatrixX<Scalar>& current, const EdgeSet& edges) {
  const Index d = current.cols();
  MatrixX<Scalar> out(static_cast<Index>(edges.size()), d + 1);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto r = static_cast<Index>(e);
    const auto dx = (current.row(edges.senders[e]) - current.row(edges.receivers[e])).eval();
    out.block(r, 0, 1, d) = dx;
    out(r, d) = dx.norm();
  }
  return out;
}

/// Stationary-wave encoding on each component's reference bounding box.
/// Columns per axis a: sin(pi m u_a) for m = 1..n, then cos(pi m u_a).
/// A zero-extent axis yields u_a = 0 (sin 0, cos 1).
template <typename Scalar>
MatrixX<Scalar> positional_encoding(const MatrixX<Scalar>& reference,
                                    const std::vector<std::int64_t>& component_id,
                                    Index n_frequencies) {
  if (n_frequencies < 1) throw std::invalid_argument("positional_encoding: n_frequencies < 1");
  const Index n = reference.rows();
  const Index d = reference.cols();
  if (static_cast<Index>(component_id.size()) != n) {
    throw DimensionError("positional_encoding: component_id length differs from node count");
  }
  std::vector<std::int64_t> comps(component_id.begin(), component_id.end());
  std::sort(comps.begin(), comps.end());
  comps.erase(std::unique(comps.begin(), comps.end()), comps.end());

  MatrixX<Scalar> lo(static_cast<Index>(comps.size()), d);
  MatrixX<Scalar> hi(static_cast<Index>(comps.size()), d);
  lo.setConstant(std::numeric_limits<Scalar>::infinity());
  hi.setConstant(-std::numeric_limits<Scalar>::infinity());
  auto slot = [&](std::int64_t c) {
    return static_cast<Index>(std::lower_bound(comps.begin(), comps.end(), c) - comps.begin());
  };
  for (Index i = 0; i < n; ++i) {
    const Index c = slot(component_id[static_cast<std::size_t>(i)]);
    lo.row(c) = lo.row(c).cwiseMin(reference.row(i));
    hi.row(c) = hi.row(c).cwiseMax(reference.row(i));
  }

  MatrixX<Scalar> out(n, 2 * d * n_frequencies);
  const Scalar pi = std::numbers::pi_v<Scalar>;
  for (Index i = 0; i < n; ++i) {
    const Index c = slot(component_id[static_cast<std::size_t>(i)]);
    for (Index a = 0; a < d; ++a) {
      const Scalar extent = hi(c, a) - lo(c, a);
      const Scalar u = extent > Scalar(0) ? (reference(i, a) - lo(c, a)) / extent : Scalar(0);
      for (Index m = 1; m <= n_frequencies; ++m) {
        const Index base = a * 2 * n_frequencies;
        out(i, base + m - 1) = std::sin(pi * Scalar(m) * u);
        out(i, base + n_frequencies + m - 1) = std::cos(pi * Scalar(m) * u);
      }
    }
  }
  return out;
}

/// One time step's physical state.
struct FrameState {
  Tensor positions;              // N x d, current configuration
  Tensor velocity;               // N x d
  Eigen::VectorXd hardening;     // N, nonnegative
  double kappa = 0.0;            // per-trajectory material parameter
  Tensor prescribed_increment;   // N x d, next-step motion of kinematic nodes (zero otherwise)
};

/// Everything the network consumes for one step.
struct GraphSample {
  Tensor node_features;          // N x (2d + 2 + kNodeTypeCount)
  EdgeSet mesh_edges;
  Tensor mesh_features;          // |E_M| x 2(d+1)
  EdgeSet contact_edges;
  Tensor contact_features;       // |E_C| x (d+1)
  Tensor positional_encoding;    // N x 2 d n_freq

  Index node_count() const { return node_features.rows(); }
};

inline Index node_feature_dim(Index dim) { return 2 * dim + 2 + kNodeTypeCount; }

struct GraphOptions {
  /// Contact radius; <= 0 selects 1.5x the median mesh-edge length.
  double contact_radius = 0.0;
  Index tied_k = 3;
  /// Interface cutoff for ties as a multiple of the median edge length.
  double tie_cutoff_factor = 3.0;
  Index n_frequencies = 8;
};

/// Holds everything about a mesh that does not change over a trajectory
/// (mesh + tied edges, contact exclusions, positional encoding) and builds
/// per-frame samples.
class GraphBuilder {
 public:
  GraphBuilder(Mesh mesh, GraphOptions options);

  GraphSample build(const FrameState& frame) const;

  const Mesh& mesh() const { return mesh_; }
  const EdgeSet& mesh_edges() const { return mesh_edges_; }
  double contact_radius() const { return contact_radius_; }
  const Tensor& encoding() const { return encoding_; }
  const GraphOptions& options() const { return options_; }

 private:
  Mesh mesh_;
  GraphOptions options_;
  EdgeSet mesh_edges_;
  std::unordered_set<std::uint64_t> excluded_;
  double contact_radius_ = 0.0;
  Tensor encoding_;
};

/// Node feature rows (v, alpha, kappa, prescribed increment, one-hot type).
Tensor node_features(const Mesh& mesh, const FrameState& frame);

}  // namespace mgnt
