#pragma once

#include "mgnt/training.hpp"

#include <functional>
#include <string>
#include <vector>

namespace mgnt {

class RolloutError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void check_schema(const ModelConfig& model, const GraphOptions& graph, const Mesh& mesh);

/// Raw step prediction for the frame; fills per-block slice weights when
/// the pointer is non-null.
using StepPredictor =
    std::function<Tensor(const GraphBuilder&, const FrameState&, std::vector<Tensor>*)>;

StepPredictor surrogate_predictor(const Surrogate& surrogate);

/// Predicts "no change": every deformable node keeps its state.
StepPredictor identity_predictor(TargetMode mode);

/// Perfect model for frames of the given trajectories: looks up the stored
/// frame nearest to the query positions and returns its true step target.
StepPredictor truth_predictor(std::vector<Trajectory> truths, TargetMode mode);

struct RolloutResult {
  Trajectory trajectory;                          // horizon + 1 frames, frame 0 = initial state
  std::vector<Index> contact_counts;              // contact edges of the graph used at each step
  std::vector<std::vector<Tensor>> slice_weights; // per step, per block (when requested)

  Index horizon() const { return trajectory.frame_count() - 1; }
};

/// Autoregressive rollout from frame 0 of `truth`. Non-deformable nodes
/// follow the ground-truth kinematics of `truth`; contact edges are rebuilt
/// from the predicted positions at every step.
RolloutResult rollout(const StepPredictor& predictor, TargetMode mode, const GraphBuilder& builder,
                      const Trajectory& truth, Index horizon, bool keep_slice_weights = false);

/// Frame t+1 = one prediction from ground-truth frame t, for every t.
Trajectory one_step_predictions(const StepPredictor& predictor, TargetMode mode,
                                const GraphBuilder& builder, const Trajectory& truth);

/// Variable groups of the pi-beam style schema.
enum class Variable { Displacement, Velocity, Hardening };
inline constexpr Variable kVariables[] = {Variable::Displacement, Variable::Velocity,
                                          Variable::Hardening};
std::string to_string(Variable v);

/// Values of one variable on deformable nodes at frame t, one row per node.
Tensor variable_values(const Trajectory& traj, Variable v, Index t);

/// Sum of squared errors, entry count and ground-truth infinity norm of one
/// variable, over deformable nodes and frames 1..min(pred, gt) - 1.
struct ErrorSums {
  double squared = 0.0;
  std::int64_t count = 0;
  double gt_max_abs = 0.0;

  double rmse() const { return count > 0 ? std::sqrt(squared / static_cast<double>(count)) : 0.0; }
};

ErrorSums error_sums(const Trajectory& pred, const Trajectory& gt, Variable v);

struct Aggregate {
  double value = 0.0;
  double standard_error = 0.0;  // across trajectories; 0 for a single one
  Index trajectories = 0;       // number of trajectories contributing
};

/// sqrt of the mean squared error over all entries, nodes, frames and
/// trajectories.
Aggregate rmse_all(std::span<const Trajectory> pred, std::span<const Trajectory> gt, Variable v);

/// Per-trajectory RMSE over the infinity norm of the ground truth, in
/// percent. Trajectories with a zero norm are left out; `trajectories` == 0
/// marks the variable undefined.
Aggregate r_rmse(std::span<const Trajectory> pred, std::span<const Trajectory> gt, Variable v);

struct Monotonicity {
  std::vector<double> sums;  // S_t = sum_i alpha_i^t
  Index violations = 0;      // #{t : S_{t+1} < S_t - tol}
  double tolerance = 0.0;    // 1e-9 * max S_t
};

Monotonicity hardening_monotonicity(const Trajectory& traj);

struct KineticProxy {
  std::vector<double> squared;    // sum_i |v_i|^2
  std::vector<double> magnitude;  // sum_i |v_i|
};

KineticProxy kinetic_proxy(const Trajectory& traj);

struct VariableReport {
  Variable variable = Variable::Displacement;
  Aggregate rmse_1;
  Aggregate rmse_all;
  Aggregate r_rmse;
};

struct TrajectoryCurves {
  std::string name;
  Monotonicity predicted_hardening;
  Monotonicity truth_hardening;
  KineticProxy predicted_kinetic;
  KineticProxy truth_kinetic;
  std::vector<double> step_rmse;  // displacement RMSE per rollout step
  std::vector<Index> contact_counts;
};

struct MetricsReport {
  Index horizon = 0;
  std::vector<VariableReport> variables;
  std::vector<TrajectoryCurves> curves;

  const VariableReport& at(Variable v) const;
  nlohmann::json to_json() const;
  /// metrics.json plus curves.csv (one row per trajectory and step).
  void write(const std::filesystem::path& dir) const;
};

/// RMSE-1, RMSE-all, R-RMSE and consistency curves for a set of
/// trajectories; `horizon` <= 0 rolls out over the full stored length.
MetricsReport evaluate(const StepPredictor& predictor, TargetMode mode,
                       std::span<const GraphBuilder> builders, std::span<const Trajectory> truths,
                       Index horizon = 0, std::vector<RolloutResult>* rollouts = nullptr,
                       const std::vector<std::string>& names = {});

/// Per-token node-weight fields of one transformer block.
struct AttentionExport {
  Tensor positions;  // N x d
  Tensor weights;    // N x P

  ArrayFile to_file() const;
};

AttentionExport export_attention(const Surrogate& surrogate, const GraphBuilder& builder,
                                 const FrameState& frame, Index block);

}  // namespace mgnt
