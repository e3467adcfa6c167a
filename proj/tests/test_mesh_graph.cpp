#include "mgnt/mesh_graph.hpp"
#include "mgnt/verify.hpp"

#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>

using namespace mgnt;

namespace {

Mesh make_mesh(Tensor reference, MatrixX<Index> elements, ElementKind kind,
               std::vector<std::int64_t> components = {}) {
  Mesh m;
  const Index n = reference.rows();
  m.reference = std::move(reference);
  m.elements = std::move(elements);
  m.element_kind = kind;
  m.node_type.assign(static_cast<std::size_t>(n), NodeType::Deformable);
  m.component_id = components.empty() ? std::vector<std::int64_t>(static_cast<std::size_t>(n), 0)
                                      : std::move(components);
  return m;
}

std::set<std::pair<Index, Index>> as_set(const EdgeSet& e) {
  std::set<std::pair<Index, Index>> s;
  for (std::size_t k = 0; k < e.size(); ++k) s.emplace(e.senders[k], e.receivers[k]);
  return s;
}

}  // namespace

TEST_CASE("mesh edges from elements") {
  SUBCASE("one triangle") {
    MatrixX<Index> el(1, 3);
    el << 0, 1, 2;
    const EdgeSet e = build_mesh_edges(make_mesh(Tensor::Random(3, 2), el, ElementKind::Triangle));
    CHECK(e.size() == 6);
  }
  SUBCASE("one quad has perimeter edges only") {
    MatrixX<Index> el(1, 4);
    el << 0, 1, 2, 3;
    const EdgeSet e = build_mesh_edges(make_mesh(Tensor::Random(4, 3), el, ElementKind::Quad));
    CHECK(e.size() == 8);
    const auto s = as_set(e);
    CHECK(s.count({0, 2}) == 0);
    CHECK(s.count({1, 3}) == 0);
  }
  SUBCASE("two triangles sharing an edge") {
    MatrixX<Index> el(2, 3);
    el << 0, 1, 2, 1, 3, 2;
    const EdgeSet e = build_mesh_edges(make_mesh(Tensor::Random(4, 2), el, ElementKind::Triangle));
    CHECK(e.size() == 10);
    for (std::size_t k = 1; k < e.size(); ++k) {
      CHECK(edge_key(e.senders[k - 1], e.receivers[k - 1]) < edge_key(e.senders[k], e.receivers[k]));
    }
    const auto s = as_set(e);
    for (const auto& [a, b] : s) CHECK(s.count({b, a}) == 1);
  }
  SUBCASE("degenerate element") {
    MatrixX<Index> el(1, 3);
    el << 0, 1, 1;
    CHECK_THROWS_AS(build_mesh_edges(make_mesh(Tensor::Random(3, 2), el, ElementKind::Triangle)),
                    ValidationError);
  }
  SUBCASE("element index out of range") {
    MatrixX<Index> el(1, 3);
    el << 0, 1, 7;
    CHECK_THROWS_AS(build_mesh_edges(make_mesh(Tensor::Random(3, 2), el, ElementKind::Triangle)),
                    ValidationError);
  }
}

TEST_CASE("tied edges") {
  SUBCASE("two coincident nodes in different components") {
    Tensor x(2, 2);
    x << 1, 1, 1, 1;
    const EdgeSet e = build_tied_edges(make_mesh(x, MatrixX<Index>(0, 2), ElementKind::Segment, {0, 1}), {1});
    CHECK(as_set(e) == std::set<std::pair<Index, Index>>{{0, 1}, {1, 0}});
  }
  SUBCASE("single component is empty") {
    const EdgeSet e = build_tied_edges(make_mesh(Tensor::Random(5, 2), MatrixX<Index>(0, 2), ElementKind::Segment), {2});
    CHECK(e.empty());
  }
  SUBCASE("three components on a line match a brute-force scan") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    const Index n = 15;
    Tensor x = Tensor::Zero(n, 2);
    std::vector<std::int64_t> comp(n);
    for (Index i = 0; i < n; ++i) {
      x(i, 0) = u(rng);
      comp[static_cast<std::size_t>(i)] = i % 3;
    }
    const EdgeSet e = build_tied_edges(make_mesh(x, MatrixX<Index>(0, 2), ElementKind::Segment, comp), {1});
    std::set<std::pair<Index, Index>> expected;
    for (Index i = 0; i < n; ++i) {
      Index best = -1;
      double bd = 1e300;
      for (Index j = 0; j < n; ++j) {
        if (comp[static_cast<std::size_t>(j)] == comp[static_cast<std::size_t>(i)]) continue;
        const double d = std::abs(x(i, 0) - x(j, 0));
        if (d < bd) {
          bd = d;
          best = j;
        }
      }
      expected.emplace(i, best);
      expected.emplace(best, i);
    }
    CHECK(as_set(e) == expected);
  }
  SUBCASE("obstacle nodes are never tied") {
    Tensor x(3, 2);
    x << 0, 0, 0, 0.1, 0, 0.2;
    Mesh m = make_mesh(x, MatrixX<Index>(0, 2), ElementKind::Segment, {0, 1, 2});
    m.node_type[2] = NodeType::Obstacle;
    const auto s = as_set(build_tied_edges(m, {1}));
    for (const auto& [a, b] : s) CHECK((a != 2 && b != 2));
    CHECK(s.count({0, 1}) == 1);
  }
}

TEST_CASE("contact detection") {
  const std::unordered_set<std::uint64_t> none;
  Tensor x(2, 2);
  x << 0, 0, 2.0, 0;
  CHECK(detect_contact_edges(x, 1.0, none).empty());
  x(1, 0) = 0.5;
  CHECK(as_set(detect_contact_edges(x, 1.0, none)) == std::set<std::pair<Index, Index>>{{0, 1}, {1, 0}});
  std::unordered_set<std::uint64_t> excl = {edge_key(0, 1), edge_key(1, 0)};
  CHECK(detect_contact_edges(x, 1.0, excl).empty());
  CHECK_THROWS(detect_contact_edges(x, 0.0, none));
}

TEST_CASE("hash-grid contact search equals brute force on 50 configurations") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int k = 0; k < 50; ++k) {
    const Index d = 2 + k % 2;
    const Index n = 50 + 3 * k;
    Tensor x(n, d);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
    const double r = 0.1 + 0.3 * std::abs(u(rng));
    std::unordered_set<std::uint64_t> excl;
    for (Index i = 0; i + 1 < n; i += 2) excl.insert(edge_key(i, i + 1));
    const EdgeSet a = detect_contact_edges(x, r, excl);
    const EdgeSet b = detect_contact_edges_brute_force(x, r, excl);
    CHECK(a.senders == b.senders);
    CHECK(a.receivers == b.receivers);
    const Tensor f = contact_edge_features(x, a);
    if (f.rows() > 0) CHECK(f.col(d).maxCoeff() < r);
  }
}

TEST_CASE("edge features") {
  Tensor X(2, 3);
  X << 0, 0, 0, 1, 0, 0;
  EdgeSet e;
  e.push(0, 1);
  const Tensor f = mesh_edge_features(X, X, e);
  Tensor expected(1, 8);
  expected << -1, 0, 0, 1, -1, 0, 0, 1;
  CHECK(f == expected);
  CHECK(f.leftCols(4) == f.rightCols(4));

  Tensor x(2, 3);
  x << 0, 0, 1, 0, 0, 0;
  Tensor c(1, 4);
  c << 0, 0, 1, 1;
  CHECK(contact_edge_features(x, e) == c);
  EdgeSet rev;
  rev.push(1, 0);
  const Tensor cr = contact_edge_features(x, rev);
  CHECK(cr.leftCols(3) == -c.leftCols(3));
  CHECK(cr(0, 3) == c(0, 3));

  Tensor shifted = X;
  shifted.rowwise() += Eigen::RowVector3d(5, 5, 5);
  Tensor xs = x;
  xs.rowwise() += Eigen::RowVector3d(5, 5, 5);
  CHECK(mesh_edge_features(shifted, xs, e).isApprox(mesh_edge_features(X, x, e), 1e-14));
}

TEST_CASE("positional encoding") {
  Tensor X(3, 2);
  X << 0, 0, 1, 2, 0.5, 1;
  const std::vector<std::int64_t> comp(3, 0);
  const Tensor pe = positional_encoding(X, comp, 4);
  REQUIRE(pe.cols() == 2 * 2 * 4);
  // Node 0 sits at the box minimum.
  for (Index a = 0; a < 2; ++a) {
    for (Index m = 0; m < 4; ++m) {
      CHECK(pe(0, a * 8 + m) == 0.0);
      CHECK(pe(0, a * 8 + 4 + m) == 1.0);
    }
  }
  // Node 1 at u = 1: sin(pi) ~ 0, cos(pi) = -1.
  CHECK(std::abs(pe(1, 0)) < 1e-12);
  CHECK(pe(1, 4) == doctest::Approx(-1.0));
  CHECK(pe.cwiseAbs().maxCoeff() <= 1.0);

  Tensor moved = X;
  moved.rowwise() += Eigen::RowVector2d(-3.0, 40.0);
  CHECK(positional_encoding(moved, comp, 4).isApprox(pe, 1e-12));

  Tensor flat = X;
  flat.col(1).setZero();
  const Tensor pf = positional_encoding(flat, comp, 4);
  for (Index i = 0; i < 3; ++i) {
    CHECK(pf.block(i, 8, 1, 4).cwiseAbs().maxCoeff() == 0.0);
    CHECK(pf.block(i, 12, 1, 4).minCoeff() == 1.0);
  }
  CHECK_THROWS(positional_encoding(X, comp, 0));
}

TEST_CASE("graph sample widths and permutation relabelling") {
  const ToyProblem p = make_toy_problem(4, 5, 6, 2);
  const GraphBuilder b(p.mesh, GraphOptions{});
  const GraphSample s = b.build(p.frame);
  CHECK(s.node_features.cols() == node_feature_dim(2));
  CHECK(s.mesh_features.cols() == 6);
  CHECK(s.contact_features.cols() == 3);
  CHECK(s.positional_encoding.cols() == 2 * 2 * 8);

  std::mt19937_64 rng(8);
  const auto perm = random_permutation(p.mesh.node_count(), rng);
  const GraphBuilder pb(permute_mesh(p.mesh, perm), GraphOptions{});
  const GraphSample ps = pb.build(permute_frame(p.frame, perm));
  for (std::size_t i = 0; i < perm.size(); ++i) {
    CHECK(ps.node_features.row(static_cast<Index>(i)) == s.node_features.row(perm[i]));
  }
  // Edge features keyed by original node labels must match as a multiset.
  auto keyed = [](const GraphSample& g, const EdgeSet& e, const Tensor& f, const std::vector<Index>* map) {
    std::map<std::pair<Index, Index>, std::vector<double>> out;
    for (std::size_t k = 0; k < e.size(); ++k) {
      Index a = e.senders[k], c = e.receivers[k];
      if (map) {
        a = (*map)[static_cast<std::size_t>(a)];
        c = (*map)[static_cast<std::size_t>(c)];
      }
      const auto row = f.row(static_cast<Index>(k));
      out[{a, c}] = std::vector<double>(row.data(), row.data() + row.size());
    }
    (void)g;
    return out;
  };
  CHECK(keyed(s, s.mesh_edges, s.mesh_features, nullptr) == keyed(ps, ps.mesh_edges, ps.mesh_features, &perm));
  CHECK(keyed(s, s.contact_edges, s.contact_features, nullptr) ==
        keyed(ps, ps.contact_edges, ps.contact_features, &perm));

  // Translating everything changes no edge feature.
  Mesh moved = p.mesh;
  FrameState f = p.frame;
  moved.reference.rowwise() += Eigen::RowVector2d(100.0, -3.0);
  f.positions.rowwise() += Eigen::RowVector2d(100.0, -3.0);
  const GraphSample ts = GraphBuilder(moved, GraphOptions{}).build(f);
  CHECK(ts.mesh_features.isApprox(s.mesh_features, 1e-10));
  CHECK(ts.contact_edges.senders == s.contact_edges.senders);
  CHECK(ts.positional_encoding.isApprox(s.positional_encoding, 1e-12));
}
