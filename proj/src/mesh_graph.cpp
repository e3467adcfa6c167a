#include "mgnt/mesh_graph.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <string>
#include <unordered_map>

namespace mgnt {

void Mesh::validate() const {
  const Index n = node_count();
  if (dim() != 2 && dim() != 3) throw ValidationError("mesh dimension must be 2 or 3");
  if (static_cast<Index>(node_type.size()) != n || static_cast<Index>(component_id.size()) != n) {
    throw ValidationError("node_type/component_id length differs from node count");
  }
  for (Index e = 0; e < elements.rows(); ++e) {
    for (Index a = 0; a < elements.cols(); ++a) {
      const Index v = elements(e, a);
      if (v < 0 || v >= n) {
        throw ValidationError("element " + std::to_string(e) + " references node " +
                              std::to_string(v) + " outside [0," + std::to_string(n) + ")");
      }
      for (Index b = 0; b < a; ++b) {
        if (elements(e, b) == v) {
          throw ValidationError("degenerate element " + std::to_string(e) + ": node " +
                                std::to_string(v) + " repeated");
        }
      }
    }
  }
}

void EdgeSet::canonicalize() {
  std::vector<std::uint64_t> keys(senders.size());
  for (std::size_t e = 0; e < keys.size(); ++e) keys[e] = edge_key(senders[e], receivers[e]);
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  senders.resize(keys.size());
  receivers.resize(keys.size());
  for (std::size_t e = 0; e < keys.size(); ++e) {
    senders[e] = static_cast<Index>(keys[e] >> 32);
    receivers[e] = static_cast<Index>(keys[e] & 0xffffffffu);
  }
}

namespace {

// Local vertex pairs that form element edges.
std::vector<std::pair<Index, Index>> element_edge_pairs(ElementKind kind) {
  switch (kind) {
    case ElementKind::Segment: return {{0, 1}};
    case ElementKind::Triangle: return {{0, 1}, {1, 2}, {2, 0}};
    case ElementKind::Quad: return {{0, 1}, {1, 2}, {2, 3}, {3, 0}};
    case ElementKind::Tetra: return {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}};
  }
  return {};
}

Index expected_width(ElementKind kind) {
  switch (kind) {
    case ElementKind::Segment: return 2;
    case ElementKind::Triangle: return 3;
    case ElementKind::Quad: return 4;
    case ElementKind::Tetra: return 4;
  }
  return 0;
}

}  // namespace

EdgeSet build_mesh_edges(const Mesh& mesh) {
  mesh.validate();
  EdgeSet edges;
  if (mesh.elements.rows() == 0) return edges;
  if (mesh.elements.cols() != expected_width(mesh.element_kind)) {
    throw ValidationError("element width " + std::to_string(mesh.elements.cols()) +
                          " does not match element kind");
  }
  const auto pairs = element_edge_pairs(mesh.element_kind);
  for (Index e = 0; e < mesh.elements.rows(); ++e) {
    for (const auto& [a, b] : pairs) {
      edges.push(mesh.elements(e, a), mesh.elements(e, b));
      edges.push(mesh.elements(e, b), mesh.elements(e, a));
    }
  }
  edges.canonicalize();
  return edges;
}

EdgeSet build_tied_edges(const Mesh& mesh, const TiedEdgeOptions& options) {
  if (options.k < 1) throw std::invalid_argument("build_tied_edges: k must be >= 1");
  EdgeSet edges;
  const Index n = mesh.node_count();
  std::vector<std::int64_t> comps;
  for (Index i = 0; i < n; ++i) {
    if (mesh.node_type[static_cast<std::size_t>(i)] != NodeType::Obstacle) {
      comps.push_back(mesh.component_id[static_cast<std::size_t>(i)]);
    }
  }
  std::sort(comps.begin(), comps.end());
  if (std::unique(comps.begin(), comps.end()) - comps.begin() < 2) return edges;

  std::vector<std::pair<double, Index>> candidates;
  for (Index i = 0; i < n; ++i) {
    if (mesh.node_type[static_cast<std::size_t>(i)] == NodeType::Obstacle) continue;
    candidates.clear();
    for (Index j = 0; j < n; ++j) {
      if (mesh.node_type[static_cast<std::size_t>(j)] == NodeType::Obstacle) continue;
      if (mesh.component_id[static_cast<std::size_t>(j)] ==
          mesh.component_id[static_cast<std::size_t>(i)]) {
        continue;
      }
      const double dist = (mesh.reference.row(i) - mesh.reference.row(j)).norm();
      if (dist <= options.interface_cutoff) candidates.emplace_back(dist, j);
    }
    const auto take = std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(options.k));
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take),
                      candidates.end());
    for (std::size_t c = 0; c < take; ++c) {
      edges.push(i, candidates[c].second);
      edges.push(candidates[c].second, i);
    }
  }
  edges.canonicalize();
  return edges;
}

std::unordered_set<std::uint64_t> contact_exclusions(const Mesh& mesh, const EdgeSet& mesh_edges) {
  std::unordered_set<std::uint64_t> out;
  for (std::size_t e = 0; e < mesh_edges.size(); ++e) {
    out.insert(edge_key(mesh_edges.senders[e], mesh_edges.receivers[e]));
    out.insert(edge_key(mesh_edges.receivers[e], mesh_edges.senders[e]));
  }
  for (Index e = 0; e < mesh.elements.rows(); ++e) {
    for (Index a = 0; a < mesh.elements.cols(); ++a) {
      for (Index b = 0; b < mesh.elements.cols(); ++b) {
        if (a != b) out.insert(edge_key(mesh.elements(e, a), mesh.elements(e, b)));
      }
    }
  }
  return out;
}

namespace {

using CellKey = std::array<std::int64_t, 3>;

struct CellHash {
  std::size_t operator()(const CellKey& k) const {
    std::uint64_t h = 1469598103934665603ull;
    for (auto v : k) {
      h ^= static_cast<std::uint64_t>(v) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return static_cast<std::size_t>(h);
  }
};

}  // namespace

EdgeSet detect_contact_edges(const Tensor& positions, double radius,
                             const std::unordered_set<std::uint64_t>& excluded) {
  if (!(radius > 0.0)) throw std::invalid_argument("detect_contact_edges: radius must be positive");
  const Index n = positions.rows();
  const Index d = positions.cols();
  if (d < 1 || d > 3) throw DimensionError("detect_contact_edges: dimension must be 1..3");
  auto cell_of = [&](Index i) {
    CellKey k{0, 0, 0};
    for (Index a = 0; a < d; ++a) {
      k[static_cast<std::size_t>(a)] = static_cast<std::int64_t>(std::floor(positions(i, a) / radius));
    }
    return k;
  };
  std::unordered_map<CellKey, std::vector<Index>, CellHash> grid;
  grid.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) grid[cell_of(i)].push_back(i);

  const double r2 = radius * radius;
  EdgeSet edges;
  const std::int64_t span_y = d > 1 ? 1 : 0;
  const std::int64_t span_z = d > 2 ? 1 : 0;
  for (Index i = 0; i < n; ++i) {
    const CellKey c = cell_of(i);
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -span_y; dy <= span_y; ++dy) {
        for (std::int64_t dz = -span_z; dz <= span_z; ++dz) {
          auto it = grid.find(CellKey{c[0] + dx, c[1] + dy, c[2] + dz});
          if (it == grid.end()) continue;
          for (Index j : it->second) {
            if (j == i) continue;
            if ((positions.row(i) - positions.row(j)).squaredNorm() >= r2) continue;
            if (excluded.count(edge_key(i, j))) continue;
            edges.push(i, j);
          }
        }
      }
    }
  }
  edges.canonicalize();
  return edges;
}

EdgeSet detect_contact_edges_brute_force(const Tensor& positions, double radius,
                                         const std::unordered_set<std::uint64_t>& excluded) {
  EdgeSet edges;
  for (Index i = 0; i < positions.rows(); ++i) {
    for (Index j = 0; j < positions.rows(); ++j) {
      if (i == j) continue;
      if ((positions.row(i) - positions.row(j)).norm() < radius && !excluded.count(edge_key(i, j))) {
        edges.push(i, j);
      }
    }
  }
  return edges;
}

double median_edge_length(const Tensor& positions, const EdgeSet& edges) {
  if (edges.empty()) throw ValidationError("median_edge_length: no edges");
  std::vector<double> len(edges.size());
  for (std::size_t e = 0; e < edges.size(); ++e) {
    len[e] = (positions.row(edges.senders[e]) - positions.row(edges.receivers[e])).norm();
  }
  const auto mid = len.begin() + static_cast<std::ptrdiff_t>(len.size() / 2);
  std::nth_element(len.begin(), mid, len.end());
  return *mid;
}

Tensor node_features(const Mesh& mesh, const FrameState& frame) {
  const Index n = mesh.node_count();
  const Index d = mesh.dim();
  if (frame.velocity.rows() != n || frame.velocity.cols() != d ||
      frame.hardening.size() != n || frame.prescribed_increment.rows() != n ||
      frame.prescribed_increment.cols() != d) {
    throw DimensionError("node_features: frame arrays do not match mesh with " +
                         std::to_string(n) + " nodes");
  }
  Tensor out = Tensor::Zero(n, node_feature_dim(d));
  out.leftCols(d) = frame.velocity;
  out.col(d) = frame.hardening;
  out.col(d + 1).setConstant(frame.kappa);
  out.middleCols(d + 2, d) = frame.prescribed_increment;
  for (Index i = 0; i < n; ++i) {
    out(i, 2 * d + 2 + static_cast<Index>(mesh.node_type[static_cast<std::size_t>(i)])) = 1.0;
  }
  return out;
}

GraphBuilder::GraphBuilder(Mesh mesh, GraphOptions options)
    : mesh_(std::move(mesh)), options_(options) {
  mesh_.validate();
  mesh_edges_ = build_mesh_edges(mesh_);
  double median = 0.0;
  if (!mesh_edges_.empty()) median = median_edge_length(mesh_.reference, mesh_edges_);
  if (options_.tied_k > 0 && median > 0.0) {
    EdgeSet tied = build_tied_edges(mesh_, {options_.tied_k, options_.tie_cutoff_factor * median});
    for (std::size_t e = 0; e < tied.size(); ++e) mesh_edges_.push(tied.senders[e], tied.receivers[e]);
    mesh_edges_.canonicalize();
  }
  contact_radius_ = options_.contact_radius > 0.0 ? options_.contact_radius : 1.5 * median;
  if (!(contact_radius_ > 0.0)) {
    throw ValidationError("GraphBuilder: contact radius undefined for a mesh without edges");
  }
  excluded_ = contact_exclusions(mesh_, mesh_edges_);
  encoding_ = positional_encoding(mesh_.reference, mesh_.component_id, options_.n_frequencies);
}

GraphSample GraphBuilder::build(const FrameState& frame) const {
  if (frame.positions.rows() != mesh_.node_count() || frame.positions.cols() != mesh_.dim()) {
    throw DimensionError("GraphBuilder::build: positions " + shape_string(frame.positions) +
                         " for mesh with " + std::to_string(mesh_.node_count()) + " nodes");
  }
  GraphSample s;
  s.node_features = node_features(mesh_, frame);
  s.mesh_edges = mesh_edges_;
  s.mesh_features = mesh_edge_features(mesh_.reference, frame.positions, mesh_edges_);
  s.contact_edges = detect_contact_edges(frame.positions, contact_radius_, excluded_);
  s.contact_features = contact_edge_features(frame.positions, s.contact_edges);
  s.positional_encoding = encoding_;
  return s;
}

}  // namespace mgnt
