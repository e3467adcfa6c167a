#include "mgnt/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

namespace mgnt {

void check_schema(const ModelConfig& model, const GraphOptions& graph, const Mesh& mesh) {
  const FeatureDims want = FeatureDims::for_mesh(mesh.dim(), graph.n_frequencies);
  const FeatureDims& have = model.dims;
  if (have.node != want.node || have.mesh_edge != want.mesh_edge ||
      have.contact_edge != want.contact_edge || have.encoding != want.encoding ||
      have.output != want.output) {
    throw SchemaError("checkpoint expects node/mesh/contact/encoding/output widths " +
                      std::to_string(have.node) + "/" + std::to_string(have.mesh_edge) + "/" +
                      std::to_string(have.contact_edge) + "/" + std::to_string(have.encoding) + "/" +
                      std::to_string(have.output) + " but the " + std::to_string(mesh.dim()) +
                      "D dataset yields " + std::to_string(want.node) + "/" +
                      std::to_string(want.mesh_edge) + "/" + std::to_string(want.contact_edge) +
                      "/" + std::to_string(want.encoding) + "/" + std::to_string(want.output));
  }
}

StepPredictor surrogate_predictor(const Surrogate& surrogate) {
  return [&surrogate](const GraphBuilder& b, const FrameState& f, std::vector<Tensor>* sw) {
    return surrogate.predict(b, f, sw);
  };
}

StepPredictor identity_predictor(TargetMode mode) {
  return [mode](const GraphBuilder& b, const FrameState& f, std::vector<Tensor>*) {
    const Index n = f.positions.rows();
    const Index d = f.positions.cols();
    Tensor y = Tensor::Zero(n, 2 * d + 1);
    if (mode == TargetMode::State) {
      y.middleCols(d, d) = f.velocity;
      y.col(2 * d) = f.hardening;
    }
    (void)b;
    return y;
  };
}

StepPredictor truth_predictor(std::vector<Trajectory> truths, TargetMode mode) {
  return [truths = std::move(truths), mode](const GraphBuilder&, const FrameState& f,
                                            std::vector<Tensor>*) {
    const Trajectory* best_traj = nullptr;
    Index best_t = -1;
    double best = std::numeric_limits<double>::infinity();
    for (const Trajectory& tr : truths) {
      if (tr.mesh.node_count() != f.positions.rows()) continue;
      for (Index t = 0; t + 1 < tr.frame_count(); ++t) {
        const double dist = (tr.positions[static_cast<std::size_t>(t)] - f.positions).squaredNorm();
        if (dist < best) {
          best = dist;
          best_traj = &tr;
          best_t = t;
        }
      }
    }
    if (!best_traj) throw RolloutError("truth predictor: no stored frame matches the query");
    return step_target(f, best_traj->frame(best_t + 1), mode);
  };
}

namespace {

void append_frame(Trajectory& out, const FrameState& f) {
  out.positions.push_back(f.positions);
  out.velocity.push_back(f.velocity);
  out.hardening.push_back(f.hardening);
}

Trajectory empty_like(const Trajectory& truth) {
  Trajectory out;
  out.mesh = truth.mesh;
  out.kappa = truth.kappa;
  out.dt = truth.dt;
  return out;
}

void check_finite(const Tensor& y, Index step) {
  if (y.allFinite()) return;
  Index row = 0;
  for (; row < y.rows(); ++row) {
    if (!y.row(row).allFinite()) break;
  }
  throw RolloutError("rollout: non-finite prediction at step " + std::to_string(step) + " (node " +
                     std::to_string(row) + ")");
}

/// Deformable nodes from the prediction, everything else from ground truth.
FrameState merge_with_truth(const Mesh& mesh, const FrameState& predicted, const FrameState& truth) {
  FrameState out = predicted;
  for (Index i = 0; i < mesh.node_count(); ++i) {
    if (mesh.node_type[static_cast<std::size_t>(i)] == NodeType::Deformable) continue;
    out.positions.row(i) = truth.positions.row(i);
    out.velocity.row(i) = truth.velocity.row(i);
    out.hardening(i) = truth.hardening(i);
  }
  return out;
}

}  // namespace

RolloutResult rollout(const StepPredictor& predictor, TargetMode mode, const GraphBuilder& builder,
                      const Trajectory& truth, Index horizon, bool keep_slice_weights) {
  if (horizon < 1) throw std::invalid_argument("rollout: horizon must be >= 1");
  const Index max_horizon = truth.frame_count() - 1;
  if (horizon > max_horizon) {
    throw std::invalid_argument("rollout: horizon " + std::to_string(horizon) +
                                " exceeds the stored ground truth (max horizon " +
                                std::to_string(max_horizon) + ")");
  }
  const Mesh& mesh = truth.mesh;
  RolloutResult r;
  r.trajectory = empty_like(truth);
  FrameState current = truth.frame(0);
  append_frame(r.trajectory, current);
  for (Index t = 0; t < horizon; ++t) {
    // Kinematic nodes are driven by the stored motion.
    current.prescribed_increment = truth.frame(t).prescribed_increment;
    std::vector<Tensor> weights;
    r.contact_counts.push_back(builder.build(current).contact_edges.size());
    const Tensor y = predictor(builder, current, keep_slice_weights ? &weights : nullptr);
    check_finite(y, t);
    current = merge_with_truth(mesh, advance(mesh, current, y, mode), truth.frame(t + 1));
    append_frame(r.trajectory, current);
    if (keep_slice_weights) r.slice_weights.push_back(std::move(weights));
  }
  return r;
}

Trajectory one_step_predictions(const StepPredictor& predictor, TargetMode mode,
                                const GraphBuilder& builder, const Trajectory& truth) {
  Trajectory out = empty_like(truth);
  append_frame(out, truth.frame(0));
  for (Index t = 0; t + 1 < truth.frame_count(); ++t) {
    const FrameState f = truth.frame(t);
    const Tensor y = predictor(builder, f, nullptr);
    check_finite(y, t);
    append_frame(out, merge_with_truth(truth.mesh, advance(truth.mesh, f, y, mode), truth.frame(t + 1)));
  }
  return out;
}

std::string to_string(Variable v) {
  switch (v) {
    case Variable::Displacement: return "displacement";
    case Variable::Velocity: return "velocity";
    case Variable::Hardening: return "hardening";
  }
  return "displacement";
}

Tensor variable_values(const Trajectory& traj, Variable v, Index t) {
  const Mesh& mesh = traj.mesh;
  const auto ti = static_cast<std::size_t>(t);
  const Index width = v == Variable::Hardening ? 1 : mesh.dim();
  Index count = 0;
  for (NodeType k : mesh.node_type) count += k == NodeType::Deformable ? 1 : 0;
  Tensor out(count, width);
  Index row = 0;
  for (Index i = 0; i < mesh.node_count(); ++i) {
    if (mesh.node_type[static_cast<std::size_t>(i)] != NodeType::Deformable) continue;
    switch (v) {
      case Variable::Displacement:
        out.row(row) = traj.positions[ti].row(i) - mesh.reference.row(i);
        break;
      case Variable::Velocity:
        out.row(row) = traj.velocity[ti].row(i);
        break;
      case Variable::Hardening:
        out(row, 0) = traj.hardening[ti](i);
        break;
    }
    ++row;
  }
  return out;
}

ErrorSums error_sums(const Trajectory& pred, const Trajectory& gt, Variable v) {
  if (pred.mesh.node_count() != gt.mesh.node_count() || pred.mesh.dim() != gt.mesh.dim()) {
    throw ValidationError("metrics: prediction and ground truth have different meshes");
  }
  const Index frames = std::min(pred.frame_count(), gt.frame_count());
  ErrorSums s;
  for (Index t = 1; t < frames; ++t) {
    const Tensor a = variable_values(pred, v, t);
    const Tensor b = variable_values(gt, v, t);
    s.squared += (a - b).squaredNorm();
    s.count += b.size();
    if (b.size() > 0) s.gt_max_abs = std::max(s.gt_max_abs, b.cwiseAbs().maxCoeff());
  }
  return s;
}

namespace {

void check_pairs(std::span<const Trajectory> pred, std::span<const Trajectory> gt) {
  if (pred.size() != gt.size()) {
    throw ValidationError("metrics: " + std::to_string(pred.size()) + " predictions for " +
                          std::to_string(gt.size()) + " ground-truth trajectories");
  }
}

double standard_error(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size() - 1);
  return std::sqrt(var / static_cast<double>(xs.size()));
}

}  // namespace

Aggregate rmse_all(std::span<const Trajectory> pred, std::span<const Trajectory> gt, Variable v) {
  check_pairs(pred, gt);
  double squared = 0.0;
  std::int64_t count = 0;
  std::vector<double> per_traj;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const ErrorSums s = error_sums(pred[k], gt[k], v);
    squared += s.squared;
    count += s.count;
    per_traj.push_back(s.rmse());
  }
  Aggregate a;
  a.value = count > 0 ? std::sqrt(squared / static_cast<double>(count)) : 0.0;
  a.standard_error = standard_error(per_traj);
  a.trajectories = static_cast<Index>(pred.size());
  return a;
}

Aggregate r_rmse(std::span<const Trajectory> pred, std::span<const Trajectory> gt, Variable v) {
  check_pairs(pred, gt);
  std::vector<double> per_traj;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const ErrorSums s = error_sums(pred[k], gt[k], v);
    if (s.gt_max_abs > 0.0) per_traj.push_back(100.0 * s.rmse() / s.gt_max_abs);
  }
  Aggregate a;
  a.trajectories = static_cast<Index>(per_traj.size());
  if (per_traj.empty()) return a;
  for (double x : per_traj) a.value += x;
  a.value /= static_cast<double>(per_traj.size());
  a.standard_error = standard_error(per_traj);
  return a;
}

Monotonicity hardening_monotonicity(const Trajectory& traj) {
  Monotonicity m;
  double peak = 0.0;
  for (const auto& a : traj.hardening) {
    m.sums.push_back(a.sum());
    peak = std::max(peak, std::abs(m.sums.back()));
  }
  m.tolerance = 1e-9 * peak;
  for (std::size_t t = 0; t + 1 < m.sums.size(); ++t) {
    if (m.sums[t + 1] < m.sums[t] - m.tolerance) ++m.violations;
  }
  return m;
}

KineticProxy kinetic_proxy(const Trajectory& traj) {
  KineticProxy k;
  for (const Tensor& v : traj.velocity) {
    k.squared.push_back(v.squaredNorm());
    k.magnitude.push_back(v.rowwise().norm().sum());
  }
  return k;
}

const VariableReport& MetricsReport::at(Variable v) const {
  for (const auto& r : variables) {
    if (r.variable == v) return r;
  }
  throw std::out_of_range("metrics report has no entry for " + to_string(v));
}

namespace {

nlohmann::json aggregate_json(const Aggregate& a) {
  return {{"value", a.value}, {"standard_error", a.standard_error}, {"trajectories", a.trajectories}};
}

}  // namespace

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json vars = nlohmann::json::object();
  for (const auto& r : variables) {
    nlohmann::json rr = aggregate_json(r.r_rmse);
    rr["defined"] = r.r_rmse.trajectories > 0;
    vars[to_string(r.variable)] = {{"rmse_1", aggregate_json(r.rmse_1)},
                                   {"rmse_all", aggregate_json(r.rmse_all)},
                                   {"r_rmse_percent", rr}};
  }
  nlohmann::json trajs = nlohmann::json::array();
  for (const auto& c : curves) {
    trajs.push_back({{"name", c.name},
                     {"predicted_hardening_violations", c.predicted_hardening.violations},
                     {"truth_hardening_violations", c.truth_hardening.violations},
                     {"predicted_hardening_tolerance", c.predicted_hardening.tolerance}});
  }
  return {{"format", "mgnt-metrics/1"},
          {"horizon", horizon},
          {"trajectories", static_cast<Index>(curves.size())},
          {"variables", vars},
          {"consistency", trajs}};
}

void MetricsReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "metrics.json");
    if (!os) throw std::runtime_error("cannot write " + (dir / "metrics.json").string());
    os << to_json().dump(2) << "\n";
  }
  std::ofstream os(dir / "curves.csv");
  if (!os) throw std::runtime_error("cannot write " + (dir / "curves.csv").string());
  os << std::setprecision(17);
  os << "trajectory,step,hardening_sum_pred,hardening_sum_true,kinetic_sq_pred,kinetic_sq_true,"
        "kinetic_abs_pred,kinetic_abs_true,displacement_rmse,contact_edges\n";
  for (const auto& c : curves) {
    const std::size_t n = c.predicted_hardening.sums.size();
    for (std::size_t t = 0; t < n; ++t) {
      os << c.name << "," << t << "," << c.predicted_hardening.sums[t] << ","
         << c.truth_hardening.sums[t] << "," << c.predicted_kinetic.squared[t] << ","
         << c.truth_kinetic.squared[t] << "," << c.predicted_kinetic.magnitude[t] << ","
         << c.truth_kinetic.magnitude[t] << "," << (t < c.step_rmse.size() ? c.step_rmse[t] : 0.0)
         << "," << (t < c.contact_counts.size() ? c.contact_counts[t] : 0) << "\n";
    }
  }
}

namespace {

Trajectory truncated(const Trajectory& tr, Index frames) {
  Trajectory out = tr;
  out.positions.resize(static_cast<std::size_t>(frames));
  out.velocity.resize(static_cast<std::size_t>(frames));
  out.hardening.resize(static_cast<std::size_t>(frames));
  return out;
}

}  // namespace

MetricsReport evaluate(const StepPredictor& predictor, TargetMode mode,
                       std::span<const GraphBuilder> builders, std::span<const Trajectory> truths,
                       Index horizon, std::vector<RolloutResult>* rollouts,
                       const std::vector<std::string>& names) {
  if (builders.size() != truths.size()) {
    throw std::invalid_argument("evaluate: one graph builder per trajectory required");
  }
  if (truths.empty()) throw std::invalid_argument("evaluate: no trajectories");
  MetricsReport report;
  Index h = horizon;
  if (h <= 0) {
    h = truths.front().frame_count() - 1;
    for (const auto& tr : truths) h = std::min(h, tr.frame_count() - 1);
  }
  report.horizon = h;
  std::vector<Trajectory> one_step, rolled, gt;
  for (std::size_t k = 0; k < truths.size(); ++k) {
    gt.push_back(truncated(truths[k], h + 1));
    one_step.push_back(truncated(one_step_predictions(predictor, mode, builders[k], truths[k]), h + 1));
    RolloutResult r = rollout(predictor, mode, builders[k], truths[k], h, false);
    TrajectoryCurves c;
    c.name = k < names.size() ? names[k] : "traj_" + std::to_string(k);
    c.predicted_hardening = hardening_monotonicity(r.trajectory);
    c.truth_hardening = hardening_monotonicity(gt.back());
    c.predicted_kinetic = kinetic_proxy(r.trajectory);
    c.truth_kinetic = kinetic_proxy(gt.back());
    for (Index t = 0; t <= h; ++t) {
      const Tensor a = variable_values(r.trajectory, Variable::Displacement, t);
      const Tensor b = variable_values(gt.back(), Variable::Displacement, t);
      c.step_rmse.push_back(a.size() > 0 ? std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()))
                                         : 0.0);
    }
    c.contact_counts = r.contact_counts;
    report.curves.push_back(std::move(c));
    rolled.push_back(r.trajectory);
    if (rollouts) rollouts->push_back(std::move(r));
  }
  for (Variable v : kVariables) {
    VariableReport vr;
    vr.variable = v;
    vr.rmse_1 = rmse_all(one_step, gt, v);
    vr.rmse_all = rmse_all(rolled, gt, v);
    vr.r_rmse = r_rmse(rolled, gt, v);
    report.variables.push_back(vr);
  }
  return report;
}

ArrayFile AttentionExport::to_file() const {
  ArrayFile f;
  f.put("positions", positions);
  f.put("weights", weights);
  f.meta() = {{"format", "mgnt-attention/1"}, {"tokens", weights.cols()}};
  return f;
}

AttentionExport export_attention(const Surrogate& surrogate, const GraphBuilder& builder,
                                 const FrameState& frame, Index block) {
  const Index blocks = surrogate.config().n_blocks;
  if (block < 0 || block >= blocks) {
    throw IndexError("export_attention: block " + std::to_string(block) + " outside [0," +
                     std::to_string(blocks) + ")");
  }
  std::vector<Tensor> weights;
  surrogate.predict(builder, frame, &weights);
  return {frame.positions, weights.at(static_cast<std::size_t>(block))};
}

}  // namespace mgnt
