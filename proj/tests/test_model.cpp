#include "mgnt/model.hpp"
#include "mgnt/verify.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace mgnt;

namespace {

Tensor randn(Index r, Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Tensor t(r, c);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
  return t;
}

// Straight chain of `n` nodes joined by segments, unit spacing.
Mesh path_mesh(Index n) {
  Mesh m;
  m.reference = Tensor::Zero(n, 2);
  for (Index i = 0; i < n; ++i) m.reference(i, 0) = static_cast<double>(i);
  m.elements.resize(n - 1, 2);
  for (Index i = 0; i + 1 < n; ++i) m.elements.row(i) << i, i + 1;
  m.element_kind = ElementKind::Segment;
  m.node_type.assign(static_cast<std::size_t>(n), NodeType::Deformable);
  m.component_id.assign(static_cast<std::size_t>(n), 0);
  return m;
}

FrameState rest_frame(const Mesh& m, std::mt19937_64& rng) {
  FrameState f;
  f.positions = m.reference;
  f.velocity = randn(m.node_count(), 2, rng);
  f.hardening = Eigen::VectorXd::Zero(m.node_count());
  f.prescribed_increment = Tensor::Zero(m.node_count(), 2);
  f.kappa = 0.2;
  return f;
}

}  // namespace

TEST_CASE("slice hand cases") {
  Tape tape;
  SUBCASE("one token gives the arithmetic mean") {
    std::mt19937_64 rng(1);
    const Tensor x = randn(6, 3, rng);
    const SliceResult s = slice(tape.constant(x), tape.constant(randn(6, 1, rng)),
                                tape.constant(Tensor::Ones(6, 1)), nullptr);
    CHECK((s.weights.value().array() == 1.0).all());
    CHECK(s.tokens.value().isApprox(x.colwise().mean(), 1e-14));
  }
  SUBCASE("identical rows give identical tokens") {
    std::mt19937_64 rng(2);
    Tensor x(5, 3);
    x.rowwise() = Eigen::RowVector3d(0.5, -1.0, 2.0);
    const SliceResult s = slice(tape.constant(x), tape.constant(randn(5, 4, rng)),
                                tape.constant(Tensor::Ones(5, 1)), nullptr);
    for (Index j = 0; j < 4; ++j) CHECK(s.tokens.value().row(j).isApprox(x.row(0), 1e-14));
  }
  SUBCASE("closed-form softmax weights") {
    Tensor logits(1, 2);
    logits << std::log(2.0), 0.0;
    Tensor x(1, 2);
    x << 3.0, -1.0;
    const SliceResult s = slice(tape.constant(x), tape.constant(logits), tape.constant(Tensor::Ones(1, 1)), nullptr);
    CHECK(s.weights.value()(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(s.weights.value()(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    // A single node: each token is that node's row.
    CHECK(s.tokens.value().row(0).isApprox(x, 1e-14));
    CHECK(s.tokens.value().row(1).isApprox(x, 1e-14));
  }
  SUBCASE("two nodes, weighted means") {
    Tensor logits(2, 2);
    logits << std::log(3.0), 0.0, 0.0, std::log(3.0);
    Tensor x(2, 1);
    x << 1.0, 5.0;
    const SliceResult s = slice(tape.constant(x), tape.constant(logits), tape.constant(Tensor::Ones(2, 1)), nullptr);
    // w = [[3/4, 1/4], [1/4, 3/4]]; z_0 = (3/4*1 + 1/4*5) / 1, z_1 = (1/4*1 + 3/4*5) / 1.
    CHECK(s.tokens.value()(0, 0) == doctest::Approx(2.0).epsilon(1e-13));
    CHECK(s.tokens.value()(1, 0) == doctest::Approx(4.0).epsilon(1e-13));
  }
  SUBCASE("temperature sharpens") {
    Tensor logits(1, 2);
    logits << 1.0, 0.0;
    const Var x = tape.constant(Tensor::Ones(1, 1));
    const double w_hot = slice(x, tape.constant(logits), tape.constant(Tensor::Constant(1, 1, 0.1)), nullptr).weights.value()(0, 0);
    CHECK(w_hot == doctest::Approx(1.0 / (1.0 + std::exp(-10.0))).epsilon(1e-13));
  }
}

TEST_CASE("gumbel draws are finite and reproducible") {
  std::mt19937_64 a(4), b(4);
  const Tensor g = sample_gumbel(200, 50, a);
  CHECK(g.allFinite());
  CHECK(g == sample_gumbel(200, 50, b));
  // Gumbel(0,1) has mean equal to the Euler-Mascheroni constant.
  CHECK(g.mean() == doctest::Approx(0.5772).epsilon(0.03));
}

TEST_CASE("token attention hand cases") {
  const Index w = 2;
  auto params = [&](Tape& tape, double qscale) {
    std::map<std::string, Var> m;
    m["a.q.w"] = tape.constant(qscale * Tensor::Identity(w, w));
    m["a.q.b"] = tape.constant(Tensor::Zero(1, w));
    m["a.k.w"] = tape.constant(Tensor::Identity(w, w));
    m["a.k.b"] = tape.constant(Tensor::Zero(1, w));
    m["a.v.w"] = tape.constant(Tensor::Identity(w, w));
    m["a.v.b"] = tape.constant(Tensor::Zero(1, w));
    m["a.out.w"] = tape.constant(Tensor::Identity(w, w));
    m["a.out.b"] = tape.constant(Tensor::Zero(1, w));
    return BoundParams(std::move(m));
  };
  SUBCASE("P=1 returns the projected value row") {
    Tape tape;
    Tensor z(1, 2);
    z << 0.3, -0.7;
    CHECK(token_attention(tape.constant(z), params(tape, 1.0), "a", 1).value().isApprox(z, 1e-15));
  }
  SUBCASE("zero logits average the value rows") {
    Tape tape;
    Tensor z(2, 2);
    z << 1, 2, 5, -4;
    const Tensor y = token_attention(tape.constant(z), params(tape, 0.0), "a", 2).value();
    const Eigen::RowVector2d mean(3.0, -1.0);
    CHECK(y.row(0).isApprox(mean, 1e-15));
    CHECK(y.row(1).isApprox(mean, 1e-15));
  }
  SUBCASE("scaled dot product with one head against brute force") {
    Tape tape;
    Tensor z(2, 2);
    z << 1, 0, 0, 2;
    const Tensor y = token_attention(tape.constant(z), params(tape, 1.0), "a", 1).value();
    // logits = z z^T / sqrt(2) = [[1, 0], [0, 4]] / sqrt(2)
    const double s = 1.0 / std::sqrt(2.0);
    const double a0 = std::exp(s) / (std::exp(s) + 1.0);
    const double a1 = 1.0 / (1.0 + std::exp(4 * s));
    CHECK(y(0, 0) == doctest::Approx(a0 * 1.0).epsilon(1e-13));
    CHECK(y(0, 1) == doctest::Approx((1 - a0) * 2.0).epsilon(1e-13));
    CHECK(y(1, 0) == doctest::Approx(a1 * 1.0).epsilon(1e-13));
    CHECK(y(1, 1) == doctest::Approx((1 - a1) * 2.0).epsilon(1e-13));
  }
}

TEST_CASE("deslice hand cases") {
  Tape tape;
  Tensor z(2, 1);
  z << 4.0, -2.0;
  CHECK(deslice(tape.constant(z), tape.constant(Tensor::Identity(2, 2))).value() == z);
  Tensor same(3, 2);
  same.rowwise() = Eigen::RowVector2d(1.5, 2.5);
  Tensor w(4, 3);
  w << 0.2, 0.3, 0.5, 1, 0, 0, 0.1, 0.1, 0.8, 0.25, 0.25, 0.5;
  const Tensor out = deslice(tape.constant(same), tape.constant(w)).value();
  for (Index i = 0; i < 4; ++i) CHECK(out.row(i).isApprox(same.row(0), 1e-14));
  Tensor single(1, 2);
  single << 7, 8;
  const Tensor o1 = deslice(tape.constant(single), tape.constant(Tensor::Ones(3, 1))).value();
  for (Index i = 0; i < 3; ++i) CHECK(o1.row(i) == single);
}

TEST_CASE("encoder shapes and empty contact set") {
  const ToyProblem p = make_toy_problem(10, 10, 0, 3);
  const GraphBuilder b(p.mesh, GraphOptions{});
  GraphSample s = b.build(p.frame);
  s.contact_edges = EdgeSet{};
  s.contact_features = Tensor(0, 3);
  ModelConfig c;
  c.dims = FeatureDims::for_mesh(2, 8);
  const ParamMap params = init_params(c, 1);
  Tape tape;
  BoundParams bp(tape, params, false);
  const LatentGraph g = encode(tape, bp, c, s);
  CHECK(g.nodes.rows() == 100);
  CHECK(g.nodes.cols() == 64);
  CHECK_FALSE(g.has_contact);
  // Two identical node feature rows encode identically.
  GraphSample s2 = s;
  s2.node_features.row(1) = s2.node_features.row(0);
  const LatentGraph g2 = encode(tape, bp, c, s2);
  CHECK(g2.nodes.value().row(0) == g2.nodes.value().row(1));
  // Wrong width is a configuration error.
  GraphSample bad = s;
  bad.node_features.conservativeResize(Eigen::NoChange, 3);
  CHECK_THROWS_AS(encode(tape, bp, c, bad), ConfigError);
}

TEST_CASE("mpnn iteration without edges stays finite") {
  ModelConfig c = toy_model_config(FeatureDims::for_mesh(2, 8));
  GraphSample s;
  s.node_features = Tensor::Ones(4, c.dims.node);
  s.mesh_features = Tensor(0, c.dims.mesh_edge);
  s.contact_features = Tensor(0, c.dims.contact_edge);
  const ParamMap params = init_params(c, 2);
  Tape tape;
  BoundParams bp(tape, params, false);
  const LatentGraph g = mpnn_iteration(encode(tape, bp, c, s), bp, "mpnn.pre0", c, s);
  CHECK(g.nodes.value().allFinite());
}

TEST_CASE("message passing reaches two hops after two iterations only") {
  std::mt19937_64 rng(5);
  const Mesh m = path_mesh(3);
  const FrameState f = rest_frame(m, rng);
  const GraphBuilder b(m, GraphOptions{});
  for (Index iters : {1, 2}) {
    ModelConfig c = toy_model_config(FeatureDims::for_mesh(2, 8));
    c.mpnn_pre = iters;
    c.mpnn_refine = 0;
    c.n_blocks = 0;
    const ParamMap params = init_params(c, 7);
    FrameState g = f;
    g.velocity(0, 0) += 0.5;
    const Tensor y0 = predict(params, c, b.build(f));
    const Tensor y1 = predict(params, c, b.build(g));
    const double change = (y1.row(2) - y0.row(2)).cwiseAbs().maxCoeff();
    if (iters == 1) {
      CHECK(change == 0.0);
    } else {
      CHECK(change > 1e-8);
    }
  }
}

TEST_CASE("receptive field: ablation is exactly local, transformer is not") {
  std::mt19937_64 rng(6);
  const Mesh m = path_mesh(12);
  const FrameState f = rest_frame(m, rng);
  const GraphBuilder b(m, GraphOptions{});
  FrameState g = f;
  g.velocity(0, 1) += 1.0;
  for (Index blocks : {0, 2}) {
    ModelConfig c = toy_model_config(FeatureDims::for_mesh(2, 8));
    c.n_blocks = blocks;
    const ParamMap params = init_params(c, 8);
    const Tensor d = predict(params, c, b.build(g)) - predict(params, c, b.build(f));
    const double far = d.bottomRows(12 - 5).cwiseAbs().maxCoeff();
    if (blocks == 0) {
      CHECK(far == 0.0);
      CHECK(d.row(4).cwiseAbs().maxCoeff() > 0.0);
    } else {
      CHECK(far > 1e-10);
    }
  }
}

TEST_CASE("transformer block with zero attention output is the FFN path") {
  const ToyProblem p = make_toy_problem(4, 4, 0, 9);
  const GraphBuilder b(p.mesh, GraphOptions{});
  const GraphSample s = b.build(p.frame);
  const ModelConfig c = toy_model_config(FeatureDims::for_mesh(2, 8));
  ParamMap params = init_params(c, 3);
  params["block0.attn.out.w"].setZero();
  params["block0.attn.out.b"].setZero();
  Tape tape;
  BoundParams bp(tape, params, false);
  std::mt19937_64 rng(1);
  const Var x = tape.constant(randn(s.node_count(), c.latent_dim, rng));
  const Var pe = tape.constant(s.positional_encoding);
  const Tensor y = transformer_block(x, pe, bp, "block0", c, ForwardOptions{}, nullptr).value();
  CHECK(y.rows() == s.node_count());
  CHECK(y.cols() == c.latent_dim);
  CHECK(y.allFinite());

  const Var parts[] = {x, pe};
  Var h = linear(concat_cols(parts), bp["block0.in.w"], bp["block0.in.b"]);
  const Var hn = layer_norm(h, bp["block0.ln2.g"], bp["block0.ln2.b"], c.ln_eps);
  h = add(h, linear(leaky_relu(linear(hn, bp["block0.ffn0.w"], bp["block0.ffn0.b"]), c.leaky_slope),
                    bp["block0.ffn1.w"], bp["block0.ffn1.b"]));
  const Tensor expected = add(x, linear(h, bp["block0.out.w"], bp["block0.out.b"])).value();
  CHECK((y - expected).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("forward on a small graph") {
  const ToyProblem p = make_toy_problem(2, 5, 0, 10);
  const GraphBuilder b(p.mesh, GraphOptions{});
  const GraphSample s = b.build(p.frame);
  const ModelConfig c = toy_model_config(FeatureDims::for_mesh(2, 8));
  const ParamMap params = init_params(c, 11);
  std::vector<Tensor> w;
  const Tensor y = predict(params, c, s, &w);
  CHECK(y.rows() == 10);
  CHECK(y.cols() == 5);
  CHECK(y.allFinite());
  CHECK(predict(params, c, s) == y);
  REQUIRE(w.size() == 2);
  for (const Tensor& wb : w) {
    CHECK((wb.array() > 0.0).all());
    CHECK((wb.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-9);
  }

  // Train mode draws Gumbel noise; same rng seed gives the same output.
  auto train_pred = [&](std::uint64_t seed) {
    Tape tape;
    BoundParams bp(tape, params, false);
    std::mt19937_64 rng(seed);
    ForwardOptions o;
    o.train_mode = true;
    o.rng = &rng;
    return forward(tape, bp, c, s, o).prediction.value();
  };
  CHECK(train_pred(1) == train_pred(1));
  CHECK(train_pred(1) != train_pred(2));
}

TEST_CASE("parameter counts") {
  ParamMap linear_only;
  linear_only["w"] = Tensor::Zero(4, 8);
  linear_only["b"] = Tensor::Zero(1, 8);
  CHECK(count_scalars(linear_only) == 40);

  // Independent tally from the layer widths: two-layer MLPs with layer
  // norm, then per-block projections.
  auto lin = [](std::int64_t i, std::int64_t o) { return i * o + o; };
  auto mlp = [&](std::int64_t i, std::int64_t l) { return lin(i, l) + lin(l, l) + 2 * l; };
  auto tally = [&](std::int64_t l, const FeatureDims& d, std::int64_t iters, std::int64_t blocks) {
    std::int64_t n = mlp(d.node, l) + mlp(d.mesh_edge, l) + mlp(d.contact_edge, l);
    n += iters * 2 * mlp(3 * l, l);
    const std::int64_t D = 64, A = 128, P = 32;
    n += blocks * (lin(l + d.encoding, D) + 2 * D + lin(D, P) + lin(D, 1) + lin(D, A) + 3 * lin(A, A) +
                   lin(A, D) + 2 * D + lin(D, 4 * D) + lin(4 * D, D) + lin(D, l));
    return n + lin(l, l) + lin(l, d.output);
  };

  ModelConfig c;
  c.dims = FeatureDims::for_mesh(3, 8);
  const auto n = param_count(c);
  CHECK(n == count_scalars(init_params(c, 0)));
  CHECK(n == tally(64, c.dims, 4, 2));
  CHECK(n >= 350000);
  CHECK(n <= 650000);
  CHECK(n == 378313);

  ModelConfig planar;
  planar.dims = FeatureDims::for_mesh(2, 8);
  CHECK(param_count(planar) == 375815);

  ModelConfig mgn;
  mgn.latent_dim = 128;
  mgn.mpnn_pre = 15;
  mgn.mpnn_refine = 0;
  mgn.n_blocks = 0;
  mgn.dims = c.dims;
  const auto m = param_count(mgn);
  CHECK(m == tally(128, mgn.dims, 15, 0));
  CHECK(m >= 1600000);
  CHECK(m <= 2400000);
}

TEST_CASE("config validation and json round-trip") {
  ModelConfig c;
  c.dims = FeatureDims::for_mesh(2, 8);
  CHECK(ModelConfig::from_json(c.to_json()).to_json() == c.to_json());
  ModelConfig bad = c;
  bad.n_heads = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.tau0 = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
