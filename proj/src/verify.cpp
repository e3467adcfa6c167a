#include "mgnt/verify.hpp"

#include "mgnt/container.hpp"
#include "mgnt/training.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace mgnt {

ToyProblem make_toy_problem(Index rows, Index cols, Index wall, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.01, 0.01);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double h = 0.1;
  const Index n_sheet = rows * cols;
  const Index n = n_sheet + wall;

  ToyProblem p;
  Mesh& m = p.mesh;
  m.reference.resize(n, 2);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m.reference.row(r * cols + c) << c * h, r * h + h;
  }
  for (Index w = 0; w < wall; ++w) m.reference.row(n_sheet + w) << w * h * static_cast<double>(cols) / std::max<Index>(wall, 1), 0.0;
  m.elements.resize(2 * (rows - 1) * (cols - 1), 3);
  Index e = 0;
  for (Index r = 0; r + 1 < rows; ++r) {
    for (Index c = 0; c + 1 < cols; ++c) {
      const Index a = r * cols + c;
      m.elements.row(e++) << a, a + 1, a + cols + 1;
      m.elements.row(e++) << a, a + cols + 1, a + cols;
    }
  }
  m.element_kind = ElementKind::Triangle;
  m.node_type.assign(static_cast<std::size_t>(n), NodeType::Deformable);
  m.component_id.assign(static_cast<std::size_t>(n), 0);
  for (Index w = n_sheet; w < n; ++w) {
    m.node_type[static_cast<std::size_t>(w)] = NodeType::Obstacle;
    m.component_id[static_cast<std::size_t>(w)] = 1;
  }

  FrameState& f = p.frame;
  f.positions = m.reference;
  f.velocity = Tensor::Zero(n, 2);
  f.hardening = Eigen::VectorXd::Zero(n);
  f.prescribed_increment = Tensor::Zero(n, 2);
  f.kappa = 0.2;
  for (Index i = 0; i < n_sheet; ++i) {
    f.positions(i, 0) += jitter(rng);
    f.positions(i, 1) += jitter(rng);
    f.velocity(i, 0) = normal(rng);
    f.velocity(i, 1) = normal(rng);
    f.hardening(i) = std::abs(0.01 * normal(rng));
  }
  for (Index i = n_sheet; i < n; ++i) f.prescribed_increment(i, 1) = 0.001 * normal(rng);
  return p;
}

Mesh permute_mesh(const Mesh& mesh, const std::vector<Index>& perm) {
  const Index n = mesh.node_count();
  std::vector<Index> inverse(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) inverse[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
  Mesh out = mesh;
  for (Index i = 0; i < n; ++i) {
    const auto src = static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]);
    out.reference.row(i) = mesh.reference.row(static_cast<Index>(src));
    out.node_type[static_cast<std::size_t>(i)] = mesh.node_type[src];
    out.component_id[static_cast<std::size_t>(i)] = mesh.component_id[src];
  }
  for (Index e = 0; e < mesh.elements.rows(); ++e) {
    for (Index a = 0; a < mesh.elements.cols(); ++a) {
      out.elements(e, a) = inverse[static_cast<std::size_t>(mesh.elements(e, a))];
    }
  }
  return out;
}

FrameState permute_frame(const FrameState& frame, const std::vector<Index>& perm) {
  FrameState out = frame;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const auto r = static_cast<Index>(i);
    out.positions.row(r) = frame.positions.row(perm[i]);
    out.velocity.row(r) = frame.velocity.row(perm[i]);
    out.hardening(r) = frame.hardening(perm[i]);
    out.prescribed_increment.row(r) = frame.prescribed_increment.row(perm[i]);
  }
  return out;
}

std::vector<Index> random_permutation(Index n, std::mt19937_64& rng) {
  std::vector<Index> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), Index{0});
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

ModelConfig toy_model_config(const FeatureDims& dims) {
  ModelConfig c;
  c.latent_dim = 8;
  c.n_heads = 2;
  c.n_tokens = 4;
  c.proj_width = 8;
  c.head_width = 4;
  c.ffn_multiplier = 2;
  c.dims = dims;
  return c;
}

Var sabotaged_square(Var x) {
  Tape& tape = *x.tape;
  const Var in[] = {x};
  return tape.record(x.value().cwiseAbs2(), in, [xi = x.id](Tape& t, std::size_t self) {
    t.accumulate(xi, (3.0 * t.value(xi).array() * t.grad_of(self).array()).matrix());
  });
}

namespace {

Tensor randn(Index r, Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(r, c);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
  return t;
}

/// Values bounded away from `kink` so central differences never straddle it.
Tensor away_from(Tensor t, double kink, double gap) {
  for (Index i = 0; i < t.size(); ++i) {
    double& v = t.data()[i];
    if (std::abs(v - kink) < gap) v = kink + (v < kink ? -gap : gap);
  }
  return t;
}

Index dim(std::mt19937_64& rng) { return std::uniform_int_distribution<Index>(1, 5)(rng); }

/// sum(y .* R) with R a fixed pseudo-random weighting of y's shape.
Var reduce(Var y) {
  Tape& tape = *y.tape;
  std::mt19937_64 g(1000003u * static_cast<std::uint64_t>(y.rows()) + static_cast<std::uint64_t>(y.cols()));
  return sum_all(mul(y, tape.constant(randn(y.rows(), y.cols(), g))));
}

}  // namespace

std::vector<PrimitiveCase> primitive_cases(bool sabotage) {
  using Inputs = std::vector<Tensor>;
  std::vector<PrimitiveCase> cases;
  auto unary = [](Index r, Index c, std::mt19937_64& rng) { return Inputs{randn(r, c, rng)}; };
  cases.push_back({"matmul",
                   [](std::mt19937_64& rng) {
                     const Index m = dim(rng), k = dim(rng), n = dim(rng);
                     return Inputs{randn(m, k, rng), randn(k, n, rng)};
                   },
                   [](Tape&, std::span<const Var> x) { return reduce(matmul(x[0], x[1])); }});
  cases.push_back({"transpose", [=](std::mt19937_64& rng) { return unary(dim(rng), dim(rng), rng); },
                   [](Tape&, std::span<const Var> x) { return reduce(transpose(x[0])); }});
  auto binary = [](std::mt19937_64& rng) {
    const Index r = dim(rng), c = dim(rng);
    return Inputs{randn(r, c, rng), randn(r, c, rng)};
  };
  cases.push_back({"add", binary, [](Tape&, std::span<const Var> x) { return reduce(add(x[0], x[1])); }});
  cases.push_back({"sub", binary, [](Tape&, std::span<const Var> x) { return reduce(sub(x[0], x[1])); }});
  cases.push_back({"mul", binary, [](Tape&, std::span<const Var> x) { return reduce(mul(x[0], x[1])); }});
  cases.push_back({"scale", [=](std::mt19937_64& rng) { return unary(dim(rng), dim(rng), rng); },
                   [](Tape&, std::span<const Var> x) { return reduce(scale(x[0], -1.7)); }});
  cases.push_back({"add_bias",
                   [](std::mt19937_64& rng) {
                     const Index r = dim(rng), c = dim(rng);
                     return Inputs{randn(r, c, rng), randn(1, c, rng)};
                   },
                   [](Tape&, std::span<const Var> x) { return reduce(add_bias(x[0], x[1])); }});
  cases.push_back({"add_constant", [=](std::mt19937_64& rng) { return unary(dim(rng), dim(rng), rng); },
                   [](Tape&, std::span<const Var> x) {
                     return reduce(add_constant(x[0], Tensor::Constant(x[0].rows(), x[0].cols(), 0.3)));
                   }});
  cases.push_back({"square", [=](std::mt19937_64& rng) { return unary(dim(rng), dim(rng), rng); },
                   [sabotage](Tape&, std::span<const Var> x) {
                     return reduce(sabotage ? sabotaged_square(x[0]) : square(x[0]));
                   }});
  cases.push_back({"leaky_relu",
                   [](std::mt19937_64& rng) { return Inputs{away_from(randn(dim(rng), dim(rng), rng), 0.0, 1e-3)}; },
                   [](Tape&, std::span<const Var> x) { return reduce(leaky_relu(x[0], 0.01)); }});
  cases.push_back({"clamp_min",
                   [](std::mt19937_64& rng) { return Inputs{away_from(randn(dim(rng), dim(rng), rng), 0.1, 1e-3)}; },
                   [](Tape&, std::span<const Var> x) { return reduce(clamp_min(x[0], 0.1)); }});
  cases.push_back({"layer_norm",
                   [](std::mt19937_64& rng) {
                     const Index r = dim(rng), c = dim(rng) + 1;
                     return Inputs{randn(r, c, rng), randn(1, c, rng), randn(1, c, rng)};
                   },
                   [](Tape&, std::span<const Var> x) { return reduce(layer_norm(x[0], x[1], x[2], 1e-5)); }});
  cases.push_back({"softmax_rows", [=](std::mt19937_64& rng) { return unary(dim(rng), dim(rng), rng); },
                   [](Tape&, std::span<const Var> x) { return reduce(softmax(x[0], Axis::Cols)); }});
  cases.push_back({"softmax_cols", [=](std::mt19937_64& rng) { return unary(dim(rng), dim(rng), rng); },
                   [](Tape&, std::span<const Var> x) { return reduce(softmax(x[0], Axis::Rows)); }});
  cases.push_back({"segment_sum", [=](std::mt19937_64& rng) { return unary(dim(rng) + 2, dim(rng), rng); },
                   [](Tape&, std::span<const Var> x) {
                     std::vector<Index> ids(static_cast<std::size_t>(x[0].rows()));
                     for (std::size_t e = 0; e < ids.size(); ++e) ids[e] = static_cast<Index>((e * 7) % 3);
                     return reduce(segment_sum(x[0], ids, 4));
                   }});
  cases.push_back({"gather_rows", [=](std::mt19937_64& rng) { return unary(dim(rng), dim(rng), rng); },
                   [](Tape&, std::span<const Var> x) {
                     const Index n = x[0].rows();
                     std::vector<Index> rows;
                     for (Index k = 0; k < 2 * n + 1; ++k) rows.push_back((k * 5) % n);
                     return reduce(gather_rows(x[0], rows));
                   }});
  cases.push_back({"concat_cols",
                   [](std::mt19937_64& rng) {
                     const Index r = dim(rng);
                     return Inputs{randn(r, dim(rng), rng), randn(r, dim(rng), rng)};
                   },
                   [](Tape&, std::span<const Var> x) { return reduce(concat_cols(x)); }});
  cases.push_back({"slice_cols", [=](std::mt19937_64& rng) { return unary(dim(rng), dim(rng) + 2, rng); },
                   [](Tape&, std::span<const Var> x) { return reduce(slice_cols(x[0], 1, x[0].cols() - 2)); }});
  cases.push_back({"row_sum", [=](std::mt19937_64& rng) { return unary(dim(rng), dim(rng), rng); },
                   [](Tape&, std::span<const Var> x) { return reduce(row_sum(x[0])); }});
  cases.push_back({"col_sum", [=](std::mt19937_64& rng) { return unary(dim(rng), dim(rng), rng); },
                   [](Tape&, std::span<const Var> x) { return reduce(col_sum(x[0])); }});
  cases.push_back({"sum_all", [=](std::mt19937_64& rng) { return unary(dim(rng), dim(rng), rng); },
                   [](Tape&, std::span<const Var> x) { return sum_all(x[0]); }});
  cases.push_back({"div_rows",
                   [](std::mt19937_64& rng) {
                     const Index r = dim(rng);
                     Tensor s = randn(r, 1, rng).cwiseAbs().array() + 0.5;
                     return Inputs{randn(r, dim(rng), rng), s};
                   },
                   [](Tape&, std::span<const Var> x) { return reduce(div_rows(x[0], x[1])); }});
  cases.push_back({"mul_rows",
                   [](std::mt19937_64& rng) {
                     const Index r = dim(rng);
                     return Inputs{randn(r, dim(rng), rng), randn(r, 1, rng)};
                   },
                   [](Tape&, std::span<const Var> x) { return reduce(mul_rows(x[0], x[1])); }});
  return cases;
}

GradCheckResult composite_grad_check(const ModelConfig& config, const GraphSample& sample,
                                     const Tensor& target, std::uint64_t seed, double step,
                                     double tolerance) {
  const ParamMap params = init_params(config, seed);
  std::vector<std::string> names;
  std::vector<Tensor> inputs;
  for (const auto& [name, t] : params) {
    names.push_back(name);
    inputs.push_back(t);
  }
  std::vector<bool> mask(static_cast<std::size_t>(sample.node_count()), true);
  ScalarFunction f = [&](Tape& tape, std::span<const Var> x) {
    std::map<std::string, Var> vars;
    for (std::size_t k = 0; k < names.size(); ++k) vars.emplace(names[k], x[k]);
    std::mt19937_64 rng(seed + 1);
    ForwardOptions opts;
    opts.train_mode = true;
    opts.rng = &rng;
    const Var pred = forward(tape, BoundParams(std::move(vars)), config, sample, opts).prediction;
    const Var preds[] = {pred};
    const Tensor targets[] = {target};
    return compute_loss(preds, targets, mask);
  };
  return grad_check(f, inputs, step, tolerance);
}

namespace {

using Clock = std::chrono::steady_clock;

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << v;
  return os.str();
}

CheckResult check_primitives(bool sabotage, std::uint64_t seed) {
  CheckResult r{"primitive gradients vs central differences", true, {}};
  double worst = 0.0;
  std::string worst_name;
  std::size_t shapes = 0;
  for (const PrimitiveCase& c : primitive_cases(sabotage)) {
    std::mt19937_64 rng(seed * 7919u + shapes);
    for (int k = 0; k < 5; ++k) {
      const auto inputs = c.inputs(rng);
      const GradCheckResult g = grad_check(c.f, inputs, 1e-5, 1e-5);
      ++shapes;
      if (g.max_relative_error > worst) {
        worst = g.max_relative_error;
        worst_name = c.name;
      }
      if (!g.passed()) r.passed = false;
    }
  }
  r.detail = std::to_string(shapes) + " shapes, worst " + fmt(worst) + " (" + worst_name + ")";
  return r;
}

CheckResult check_negative_control() {
  CheckResult r{"negative control: wrong gradient rule is caught", false, {}};
  std::mt19937_64 rng(3);
  const Tensor x = randn(3, 2, rng);
  const Tensor in[] = {x};
  const GradCheckResult g = grad_check(
      [](Tape&, std::span<const Var> v) { return reduce(sabotaged_square(v[0])); }, in);
  r.passed = g.max_relative_error > 1e-2;
  r.detail = "error " + fmt(g.max_relative_error) + " (must exceed 1e-2)";
  return r;
}

CheckResult check_composite(std::uint64_t seed) {
  CheckResult r{"loss(forward) gradient vs central differences", false, {}};
  const ToyProblem p = make_toy_problem(3, 5, 4, seed);
  const GraphBuilder builder(p.mesh, GraphOptions{});
  const GraphSample s = builder.build(p.frame);
  const ModelConfig c = toy_model_config(FeatureDims::for_mesh(2, GraphOptions{}.n_frequencies));
  std::mt19937_64 rng(seed + 11);
  const Tensor target = randn(s.node_count(), c.dims.output, rng);
  const GradCheckResult g = composite_grad_check(c, s, target, seed);
  r.passed = g.passed();
  r.detail = std::to_string(g.coordinates) + " coordinates, worst " + fmt(g.max_relative_error) +
             ", " + std::to_string(s.contact_edges.size()) + " contact edges";
  return r;
}

CheckResult check_softmax(std::uint64_t seed) {
  CheckResult r{"softmax and slice weights normalized", true, {}};
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  bool positive = true;
  for (int k = 0; k < 20; ++k) {
    Tape tape;
    const Tensor x = 30.0 * randn(1000, 32, rng);
    const Tensor w = softmax(tape.constant(x), Axis::Cols).value();
    worst = std::max(worst, (w.rowwise().sum().array() - 1.0).abs().maxCoeff());
    positive = positive && (w.array() >= 0.0).all();
  }
  const ToyProblem p = make_toy_problem(10, 10, 0, seed);
  const GraphBuilder builder(p.mesh, GraphOptions{});
  const ModelConfig c = toy_model_config(FeatureDims::for_mesh(2, GraphOptions{}.n_frequencies));
  std::vector<Tensor> weights;
  predict(init_params(c, seed), c, builder.build(p.frame), &weights);
  for (const Tensor& w : weights) {
    worst = std::max(worst, (w.rowwise().sum().array() - 1.0).abs().maxCoeff());
    positive = positive && (w.array() > 0.0).all();
  }
  r.passed = worst < 1e-9 && positive;
  r.detail = "max |row sum - 1| = " + fmt(worst) + (positive ? "" : ", negative entry");
  return r;
}

double max_abs(const Tensor& a) { return a.size() ? a.cwiseAbs().maxCoeff() : 0.0; }

CheckResult check_permutation_translation(std::uint64_t seed) {
  CheckResult r{"forward permutation equivariance and translation invariance", false, {}};
  double perm_dev = 0.0;
  double trans_dev = 0.0;
  for (std::uint64_t k = 0; k < 3; ++k) {
    const ToyProblem p = make_toy_problem(9, 10, 10, seed + k);
    const ModelConfig c = toy_model_config(FeatureDims::for_mesh(2, GraphOptions{}.n_frequencies));
    const ParamMap params = init_params(c, seed + k);
    const GraphBuilder builder(p.mesh, GraphOptions{});
    const Tensor y = predict(params, c, builder.build(p.frame));

    std::mt19937_64 rng(seed + 100 + k);
    const auto perm = random_permutation(p.mesh.node_count(), rng);
    const GraphBuilder pb(permute_mesh(p.mesh, perm), GraphOptions{});
    const Tensor yp = predict(params, c, pb.build(permute_frame(p.frame, perm)));
    for (std::size_t i = 0; i < perm.size(); ++i) {
      perm_dev = std::max(perm_dev, max_abs(yp.row(static_cast<Index>(i)) - y.row(perm[i])));
    }

    Mesh moved = p.mesh;
    FrameState f = p.frame;
    const Eigen::RowVector2d shift(12.5, -7.25);
    moved.reference.rowwise() += shift;
    f.positions.rowwise() += shift;
    const GraphBuilder tb(moved, GraphOptions{});
    trans_dev = std::max(trans_dev, max_abs(predict(params, c, tb.build(f)) - y));
  }
  r.passed = perm_dev < 1e-8 && trans_dev < 1e-8;
  r.detail = "permutation " + fmt(perm_dev) + ", translation " + fmt(trans_dev);
  return r;
}

CheckResult check_contact(std::uint64_t seed) {
  CheckResult r{"contact search equals brute force", true, {}};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t edges = 0;
  for (int k = 0; k < 50; ++k) {
    const Index n = 50 + k;
    const Index d = k % 2 == 0 ? 2 : 3;
    Tensor x(n, d);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
    const double radius = 0.05 + 0.2 * u(rng);
    std::unordered_set<std::uint64_t> excluded;
    for (Index i = 0; i + 1 < n; i += 3) {
      excluded.insert(edge_key(i, i + 1));
      excluded.insert(edge_key(i + 1, i));
    }
    const EdgeSet a = detect_contact_edges(x, radius, excluded);
    const EdgeSet b = detect_contact_edges_brute_force(x, radius, excluded);
    edges += a.size();
    if (a.senders != b.senders || a.receivers != b.receivers) r.passed = false;
  }
  r.detail = "50 configurations, " + std::to_string(edges) + " edges";
  return r;
}

CheckResult check_container(std::uint64_t seed) {
  CheckResult r{"container write/read/write is byte-identical", false, {}};
  std::mt19937_64 rng(seed);
  ArrayFile f;
  f.put("a", randn(7, 3, rng));
  f.put_int("ids", {4}, {1, -2, 3, 1LL << 40});
  f.put_scalar("s", 0.1);
  f.put("empty", Tensor(0, 4));
  f.meta() = {{"format", "check"}, {"x", 1.5}};
  const std::string bytes = f.serialize();
  const std::string again = ArrayFile::parse(bytes).serialize();
  r.passed = bytes == again;
  r.detail = std::to_string(bytes.size()) + " bytes";
  return r;
}

}  // namespace

std::vector<CheckResult> run_verify(const VerifyOptions& options) {
  std::vector<CheckResult> results;
  auto timed = [&](auto&& fn) {
    const auto t0 = Clock::now();
    CheckResult c;
    try {
      c = fn();
    } catch (const std::exception& e) {
      c.passed = false;
      c.detail = std::string("exception: ") + e.what();
    }
    const double s = std::chrono::duration<double>(Clock::now() - t0).count();
    c.detail += " [" + fmt(s) + " s]";
    results.push_back(std::move(c));
  };
  const std::uint64_t seed = options.seed;
  timed([&] { return check_primitives(options.sabotage_gradient, seed); });
  timed([&] { return check_negative_control(); });
  timed([&] { return check_composite(seed); });
  timed([&] { return check_softmax(seed); });
  timed([&] { return check_permutation_translation(seed); });
  timed([&] { return check_contact(seed); });
  timed([&] { return check_container(seed); });
  return results;
}

void print_table(std::ostream& os, const std::vector<CheckResult>& results) {
  std::size_t width = 0;
  for (const auto& r : results) width = std::max(width, r.name.size());
  for (const auto& r : results) {
    os << (r.passed ? "PASS  " : "FAIL  ") << std::left << std::setw(static_cast<int>(width)) << r.name
       << "  " << r.detail << "\n";
  }
}

}  // namespace mgnt
