#pragma once

#include "mgnt/container.hpp"
#include "mgnt/model.hpp"
#include "mgnt/synthetic.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mgnt {

/// A checkpoint disagrees with the data or configuration it is used with.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-feature mean and standard deviation (std floored at 1e-8).
struct FeatureStats {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd std;

  Index width() const { return mean.size(); }
  Tensor normalize(const Tensor& x) const;
  Tensor denormalize(const Tensor& x) const;
};

/// Streaming per-column accumulator (Welford).
class StatsAccumulator {
 public:
  explicit StatsAccumulator(Index width = 0);
  void add_rows(const Tensor& rows);
  void add_rows(const Tensor& rows, const std::vector<bool>& keep);
  FeatureStats finish() const;
  std::int64_t count() const { return count_; }

 private:
  void add_row(const Eigen::Ref<const Eigen::RowVectorXd>& row);
  std::int64_t count_ = 0;
  Eigen::RowVectorXd mean_;
  Eigen::RowVectorXd m2_;
};

enum class TargetMode { State, Delta };

std::string to_string(TargetMode m);
TargetMode target_mode_from(const std::string& s);

struct Normalizer {
  FeatureStats node;
  FeatureStats mesh_edge;
  FeatureStats contact_edge;
  FeatureStats target;
  Eigen::RowVectorXd position_std;  // per axis, scales position noise

  GraphSample apply(const GraphSample& raw) const;
  void write(ArrayFile& file, const std::string& prefix = "norm/") const;
  static Normalizer read(const ArrayFile& file, const std::string& prefix = "norm/");
};

/// Raw target rows for the step t -> t+1:
/// (x^{t+1} - x^t, v^{t+1}, alpha^{t+1}) in State mode, or with velocity
/// and hardening also differenced in Delta mode. `input` may carry
/// perturbed positions/velocities; the displacement part is taken relative
/// to it.
Tensor step_target(const FrameState& input, const FrameState& next, TargetMode mode);

/// Applies a raw prediction to a frame state (deformable nodes only).
/// Hardening is clamped at zero.
FrameState advance(const Mesh& mesh, const FrameState& current, const Tensor& raw_prediction,
                   TargetMode mode);

std::vector<bool> deformable_mask(const Mesh& mesh);

/// One pass over every (frame, next frame) pair of the training split.
Normalizer fit_normalizer(std::span<const Trajectory> trajectories, const GraphOptions& graph,
                          TargetMode mode);

/// Eq-(1)-style loss: mean over the batch of each sample's mean, over
/// masked nodes, of the squared L2 residual norm.
Var compute_loss(std::span<const Var> predictions, std::span<const Tensor> targets,
                 const std::vector<bool>& mask);
double compute_loss(std::span<const Tensor> predictions, std::span<const Tensor> targets,
                    const std::vector<bool>& mask);

struct TrainingExample {
  GraphSample sample;  // raw features
  Tensor target;       // raw target rows
};

/// Teacher-forced examples from one trajectory: input frame t, target t+1.
std::vector<TrainingExample> make_batch(const GraphBuilder& builder, const Trajectory& trajectory,
                                        std::span<const Index> steps, TargetMode mode);

struct BatchPick {
  Index trajectory = 0;
  Index step = 0;
};

/// Same as above but addressed by (trajectory, step); all picks must share
/// one trajectory.
std::vector<TrainingExample> make_batch(std::span<const GraphBuilder> builders,
                                        std::span<const Trajectory> trajectories,
                                        std::span<const BatchPick> picks, TargetMode mode);

/// Zero-mean Gaussian noise on deformable nodes: velocity std = scale *
/// per-axis velocity std; positions std = scale * per-axis position std.
FrameState inject_input_noise(const Mesh& mesh, const FrameState& frame,
                              const Eigen::RowVectorXd& velocity_std,
                              const Eigen::RowVectorXd& position_std, double scale,
                              std::mt19937_64& rng);

struct TrainConfig {
  double lr = 1e-4;
  double lr_final = 1e-6;
  Index steps = 20000;
  Index batch_size = 2;
  double noise_scale = 0.003;
  std::uint64_t seed = 0;
  TargetMode target_mode = TargetMode::State;
  Index checkpoint_every = 0;  // 0 disables periodic checkpoints

  void validate() const;
  nlohmann::json to_json() const;
};

double learning_rate(const TrainConfig& config, Index step);

struct AdamState {
  ParamMap m;
  ParamMap v;
  Index step = 0;
};

void adam_update(ParamMap& params, const std::map<std::string, Tensor>& grads, AdamState& state,
                 double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct LossRecord {
  Index step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

/// Everything needed to run or resume the surrogate.
struct Checkpoint {
  ModelConfig model;
  GraphOptions graph;
  TargetMode target_mode = TargetMode::State;
  Normalizer normalizer;
  ParamMap params;
  std::optional<AdamState> adam;
  Index step = 0;
  std::string rng_state;
  std::vector<LossRecord> history;

  ArrayFile to_file() const;
  static Checkpoint from_file(const ArrayFile& file);
  void save(const std::filesystem::path& path) const { to_file().save(path); }
  static Checkpoint load(const std::filesystem::path& path) { return from_file(ArrayFile::load(path)); }
};

class TrainingAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FitResult {
  ParamMap params;
  std::vector<LossRecord> history;
  Checkpoint checkpoint;
};

using CheckpointCallback = std::function<void(const Checkpoint&)>;

/// Adam with exponential learning-rate decay on teacher-forced 1-step
/// targets. Batches draw B steps from one trajectory. When `resume` is
/// given, training continues from its step with its optimizer/rng state.
FitResult fit(std::span<const Trajectory> trajectories, const ModelConfig& model,
              const GraphOptions& graph, const TrainConfig& train,
              const CheckpointCallback& on_checkpoint = {},
              const Checkpoint* resume = nullptr);

/// Trained model plus its normalization, as used for inference.
class Surrogate {
 public:
  explicit Surrogate(Checkpoint checkpoint);

  /// Raw (denormalized) step prediction for all nodes.
  Tensor predict(const GraphBuilder& builder, const FrameState& frame,
                 std::vector<Tensor>* slice_weights = nullptr) const;
  Tensor predict(const GraphSample& raw_sample, std::vector<Tensor>* slice_weights = nullptr) const;

  const Checkpoint& checkpoint() const { return checkpoint_; }
  const ModelConfig& config() const { return checkpoint_.model; }
  GraphBuilder builder(const Mesh& mesh) const { return GraphBuilder(mesh, checkpoint_.graph); }
  TargetMode target_mode() const { return checkpoint_.target_mode; }

 private:
  Checkpoint checkpoint_;
};

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history);

}  // namespace mgnt
