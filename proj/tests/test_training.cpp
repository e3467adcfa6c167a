#include "mgnt/training.hpp"
#include "mgnt/verify.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace mgnt;

namespace {

Trajectory small_trajectory(double kappa = 0.2, Index frames = 8) {
  OracleConfig c;
  c.rows = 4;
  c.cols = 4;
  c.wall_nodes = 6;
  c.frames = frames;
  c.kappa = kappa;
  return simulate_impact(c);
}

TrainConfig quick_train(Index steps) {
  TrainConfig t;
  t.steps = steps;
  t.lr = 1e-3;
  t.lr_final = 1e-4;
  t.seed = 5;
  return t;
}

}  // namespace

TEST_CASE("loss examples") {
  const std::vector<bool> one = {true};
  Tensor p(1, 2), t(1, 2);
  p << 3, 4;
  t << 0, 0;
  const Tensor ps[] = {p};
  const Tensor ts[] = {t};
  CHECK(compute_loss(ps, ts, one) == 25.0);
  CHECK(compute_loss(ts, ts, one) == 0.0);

  // Two samples whose masked means are 2 and 4.
  const std::vector<bool> mask = {true, true, false};
  Tensor a(3, 1), b(3, 1);
  a << 1, std::sqrt(3.0), 100;
  b << 2, 2, -7;
  const Tensor zero = Tensor::Zero(3, 1);
  const Tensor preds[] = {a, b};
  const Tensor targets[] = {zero, zero};
  CHECK(compute_loss(preds, targets, mask) == doctest::Approx(3.0).epsilon(1e-15));

  // Changing an excluded node's target changes nothing.
  Tensor moved = zero;
  moved(2, 0) = 1e6;
  const Tensor targets2[] = {moved, zero};
  CHECK(compute_loss(preds, targets2, mask) == compute_loss(preds, targets, mask));

  const std::vector<bool> empty = {false, false, false};
  CHECK_THROWS_AS(compute_loss(preds, targets, empty), ConfigError);
}

TEST_CASE("loss gradient through the tape") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  Tensor p(4, 3), t(4, 3);
  for (Index i = 0; i < p.size(); ++i) {
    p.data()[i] = n(rng);
    t.data()[i] = n(rng);
  }
  const std::vector<bool> mask = {true, false, true, true};
  const Tensor in[] = {p};
  const auto r = grad_check(
      [&](Tape&, std::span<const Var> v) {
        const Tensor ts[] = {t};
        return compute_loss(v, ts, mask);
      },
      in);
  CHECK(r.max_relative_error < 1e-8);
}

TEST_CASE("feature stats and normalizer round-trip") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(3.0, 7.0);
  Tensor x(500, 4);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  x.col(3).setConstant(1.5);  // zero variance column
  StatsAccumulator acc(4);
  acc.add_rows(x.topRows(200));
  acc.add_rows(x.bottomRows(300));
  const FeatureStats s = acc.finish();
  CHECK(s.mean(0) == doctest::Approx(x.col(0).mean()).epsilon(1e-12));
  const double var = (x.col(1).array() - x.col(1).mean()).square().sum() / 500.0;
  CHECK(s.std(1) == doctest::Approx(std::sqrt(var)).epsilon(1e-12));
  CHECK(s.std(3) == 1e-8);
  CHECK((s.denormalize(s.normalize(x)) - x).cwiseAbs().maxCoeff() < 1e-10);

  const Trajectory tr = small_trajectory();
  const Trajectory trs[] = {tr};
  const Normalizer norm = fit_normalizer(trs, GraphOptions{}, TargetMode::State);
  ArrayFile f;
  norm.write(f);
  const Normalizer back = Normalizer::read(ArrayFile::parse(f.serialize()));
  CHECK(back.target.mean == norm.target.mean);
  CHECK(back.node.std == norm.node.std);
  CHECK(back.position_std == norm.position_std);
}

TEST_CASE("step targets and advance invert each other") {
  const Trajectory tr = small_trajectory();
  for (TargetMode mode : {TargetMode::State, TargetMode::Delta}) {
    const FrameState f = tr.frame(3);
    const FrameState g = tr.frame(4);
    const FrameState h = advance(tr.mesh, f, step_target(f, g, mode), mode);
    const auto mask = deformable_mask(tr.mesh);
    for (Index i = 0; i < tr.mesh.node_count(); ++i) {
      if (!mask[static_cast<std::size_t>(i)]) {
        CHECK(h.positions.row(i) == f.positions.row(i));
        continue;
      }
      CHECK((h.positions.row(i) - g.positions.row(i)).cwiseAbs().maxCoeff() < 1e-14);
      CHECK((h.velocity.row(i) - g.velocity.row(i)).cwiseAbs().maxCoeff() < 1e-12);
      CHECK(std::abs(h.hardening(i) - g.hardening(i)) < 1e-15);
    }
  }
  // Predicted hardening is never negative after advancing.
  const FrameState f = tr.frame(0);
  Tensor y = step_target(f, tr.frame(1), TargetMode::State);
  y.col(4).setConstant(-1.0);
  CHECK(advance(tr.mesh, f, y, TargetMode::State).hardening.minCoeff() >= 0.0);
}

TEST_CASE("make_batch") {
  const Trajectory tr = small_trajectory(0.2, 10);
  const GraphBuilder b(tr.mesh, GraphOptions{});
  const Index first[] = {0};
  const auto one = make_batch(b, tr, first, TargetMode::State);
  REQUIRE(one.size() == 1);
  CHECK(one[0].target.middleCols(2, 2) == tr.velocity[1]);
  const Index three[] = {0, 5, 8};
  const auto batch = make_batch(b, tr, three, TargetMode::State);
  CHECK(batch.size() == 3);
  for (const auto& e : batch) CHECK(e.sample.node_count() == tr.mesh.node_count());
  const Index last[] = {tr.frame_count() - 1};
  CHECK_THROWS_AS(make_batch(b, tr, last, TargetMode::State), IndexError);

  const Trajectory trs[] = {tr, tr};
  const GraphBuilder bs[] = {b, b};
  const BatchPick mixed[] = {{0, 1}, {1, 2}};
  CHECK_THROWS_AS(make_batch(bs, trs, mixed, TargetMode::State), std::logic_error);
  const BatchPick same[] = {{1, 1}, {1, 2}};
  CHECK(make_batch(bs, trs, same, TargetMode::State).size() == 2);
}

TEST_CASE("input noise") {
  const Trajectory tr = small_trajectory();
  const FrameState f = tr.frame(2);
  const Eigen::RowVector2d vstd(0.5, 2.0), pstd(0.1, 0.3);
  std::mt19937_64 a(3), b(3);
  CHECK(inject_input_noise(tr.mesh, f, vstd, pstd, 0.0, a).positions == f.positions);
  const FrameState n1 = inject_input_noise(tr.mesh, f, vstd, pstd, 0.01, a);
  std::mt19937_64 a2(3);
  CHECK(inject_input_noise(tr.mesh, f, vstd, pstd, 0.0, a2).velocity == f.velocity);
  const FrameState n2 = inject_input_noise(tr.mesh, f, vstd, pstd, 0.01, b);
  CHECK(n1.velocity == n2.velocity);
  // Kinematic nodes stay clean.
  CHECK(n1.positions.bottomRows(6) == f.positions.bottomRows(6));

  // Empirical std over 10^4 draws per component within 5% of the target.
  const double scale = 0.003;
  std::vector<double> dv, dp;
  std::mt19937_64 rng(11);
  while (dv.size() < 10000) {
    const FrameState n = inject_input_noise(tr.mesh, f, vstd, pstd, scale, rng);
    for (Index i = 0; i < 16; ++i) {
      dv.push_back(n.velocity(i, 1) - f.velocity(i, 1));
      dp.push_back(n.positions(i, 0) - f.positions(i, 0));
    }
  }
  auto sd = [](const std::vector<double>& x) {
    double m = 0.0, s = 0.0;
    for (double v : x) m += v;
    m /= static_cast<double>(x.size());
    for (double v : x) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(x.size()));
  };
  CHECK(std::abs(sd(dv) / (scale * vstd(1)) - 1.0) < 0.05);
  CHECK(std::abs(sd(dp) / (scale * pstd(0)) - 1.0) < 0.05);
  CHECK_THROWS(inject_input_noise(tr.mesh, f, vstd, pstd, -1.0, rng));
}

TEST_CASE("learning-rate schedule and config validation") {
  TrainConfig t;
  t.steps = 101;
  CHECK(learning_rate(t, 0) == doctest::Approx(1e-4));
  CHECK(learning_rate(t, 100) == doctest::Approx(1e-6));
  CHECK(learning_rate(t, 50) == doctest::Approx(1e-5));
  TrainConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.noise_scale = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("adam step on a quadratic") {
  ParamMap p;
  p["x"] = Tensor::Constant(1, 1, 1.0);
  AdamState s;
  std::map<std::string, Tensor> g = {{"x", Tensor::Constant(1, 1, 2.0)}};
  adam_update(p, g, s, 0.1);
  // First bias-corrected step moves by lr * sign(g).
  CHECK(p["x"](0, 0) == doctest::Approx(0.9).epsilon(1e-7));
  CHECK(s.step == 1);
}

TEST_CASE("fit is deterministic and resumes exactly") {
  const Trajectory trs[] = {small_trajectory(0.15), small_trajectory(0.25)};
  const ModelConfig m = toy_model_config(FeatureDims::for_mesh(2, 8));
  const TrainConfig t = quick_train(8);
  const FitResult a = fit(trs, m, GraphOptions{}, t);
  const FitResult b = fit(trs, m, GraphOptions{}, t);
  REQUIRE(a.history.size() == 8);
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].loss == b.history[i].loss);
    CHECK(std::isfinite(a.history[i].loss));
    CHECK(a.history[i].grad_norm > 0.0);
  }

  TrainConfig periodic = t;
  periodic.checkpoint_every = 3;
  std::string saved;
  fit(trs, m, GraphOptions{}, periodic, [&](const Checkpoint& c) {
    if (c.step == 3) saved = c.to_file().serialize();
  });
  REQUIRE_FALSE(saved.empty());
  const Checkpoint resume = Checkpoint::from_file(ArrayFile::parse(saved));
  CHECK(resume.to_file().serialize() == saved);
  const FitResult r = fit(trs, m, GraphOptions{}, t, {}, &resume);
  REQUIRE(r.history.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(r.history[i].loss == a.history[i].loss);
  for (const auto& [name, v] : a.params) CHECK(r.params.at(name) == v);

  ModelConfig other = m;
  other.n_tokens = 2;
  CHECK_THROWS_AS(fit(trs, other, GraphOptions{}, t, {}, &resume), SchemaError);
  GraphOptions coarse;
  coarse.n_frequencies = 4;
  CHECK_THROWS_AS(fit(trs, m, coarse, t, {}, &resume), SchemaError);

  const auto csv = std::filesystem::temp_directory_path() / "mgnt_loss_test.csv";
  write_loss_csv(csv, a.history);
  std::ifstream is(csv);
  std::string header;
  std::getline(is, header);
  CHECK(header == "step,loss,lr,grad_norm");
  std::filesystem::remove(csv);
}

TEST_CASE("non-finite training aborts with a diagnostic") {
  const Trajectory trs[] = {small_trajectory()};
  const ModelConfig m = toy_model_config(FeatureDims::for_mesh(2, 8));
  TrainConfig t = quick_train(3);
  t.lr = 1e300;
  t.lr_final = 1e300;
  try {
    fit(trs, m, GraphOptions{}, t);
    FAIL("expected TrainingAbort");
  } catch (const TrainingAbort& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step") != std::string::npos);
    CHECK(msg.find("grad_norm") != std::string::npos);
  }
}

TEST_CASE("checkpoint rejects mismatched parameters") {
  const Trajectory trs[] = {small_trajectory()};
  const ModelConfig m = toy_model_config(FeatureDims::for_mesh(2, 8));
  FitResult r = fit(trs, m, GraphOptions{}, quick_train(1));
  r.checkpoint.params["dec.l1.w"] = Tensor::Zero(2, 2);
  CHECK_THROWS_AS(Checkpoint::from_file(r.checkpoint.to_file()), FormatError);
  ArrayFile f;
  CHECK_THROWS_AS(Checkpoint::from_file(f), FormatError);
}
