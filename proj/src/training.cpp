#include "mgnt/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mgnt {

Tensor FeatureStats::normalize(const Tensor& x) const {
  if (x.rows() == 0) return Tensor(0, x.cols());
  if (x.cols() != width()) {
    throw DimensionError("FeatureStats::normalize: " + shape_string(x) + " for " +
                         std::to_string(width()) + " features");
  }
  return ((x.rowwise() - mean).array().rowwise() / std.array()).matrix();
}

Tensor FeatureStats::denormalize(const Tensor& x) const {
  if (x.rows() == 0) return Tensor(0, x.cols());
  if (x.cols() != width()) {
    throw DimensionError("FeatureStats::denormalize: " + shape_string(x) + " for " +
                         std::to_string(width()) + " features");
  }
  Tensor out = (x.array().rowwise() * std.array()).matrix();
  out.rowwise() += mean;
  return out;
}

StatsAccumulator::StatsAccumulator(Index width)
    : mean_(Eigen::RowVectorXd::Zero(width)), m2_(Eigen::RowVectorXd::Zero(width)) {}

void StatsAccumulator::add_row(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  ++count_;
  const Eigen::RowVectorXd delta = row - mean_;
  mean_ += delta / static_cast<double>(count_);
  m2_ += delta.cwiseProduct(row - mean_);
}

void StatsAccumulator::add_rows(const Tensor& rows) {
  if (rows.rows() > 0 && rows.cols() != mean_.size()) {
    throw DimensionError("StatsAccumulator: width " + std::to_string(rows.cols()) + " vs " +
                         std::to_string(mean_.size()));
  }
  for (Index i = 0; i < rows.rows(); ++i) add_row(rows.row(i));
}

void StatsAccumulator::add_rows(const Tensor& rows, const std::vector<bool>& keep) {
  for (Index i = 0; i < rows.rows(); ++i) {
    if (keep[static_cast<std::size_t>(i)]) add_row(rows.row(i));
  }
}

FeatureStats StatsAccumulator::finish() const {
  FeatureStats s;
  s.mean = count_ > 0 ? mean_ : Eigen::RowVectorXd::Zero(mean_.size());
  s.std = Eigen::RowVectorXd::Constant(mean_.size(), 1e-8);
  if (count_ > 0) {
    s.std = (m2_ / static_cast<double>(count_)).cwiseSqrt().cwiseMax(1e-8);
  }
  return s;
}

std::string to_string(TargetMode m) { return m == TargetMode::State ? "state" : "delta"; }

TargetMode target_mode_from(const std::string& s) {
  if (s == "state") return TargetMode::State;
  if (s == "delta") return TargetMode::Delta;
  throw ConfigError("unknown target mode '" + s + "'");
}

GraphSample Normalizer::apply(const GraphSample& raw) const {
  GraphSample s = raw;
  s.node_features = node.normalize(raw.node_features);
  s.mesh_features = mesh_edge.normalize(raw.mesh_features);
  s.contact_features = contact_edge.normalize(raw.contact_features);
  return s;
}

void Normalizer::write(ArrayFile& f, const std::string& prefix) const {
  auto put = [&](const std::string& name, const FeatureStats& s) {
    f.put(prefix + name + "/mean", Tensor(s.mean));
    f.put(prefix + name + "/std", Tensor(s.std));
  };
  put("node", node);
  put("mesh_edge", mesh_edge);
  put("contact_edge", contact_edge);
  put("target", target);
  f.put(prefix + "position_std", Tensor(position_std));
}

Normalizer Normalizer::read(const ArrayFile& f, const std::string& prefix) {
  auto get = [&](const std::string& name) {
    FeatureStats s;
    s.mean = f.matrix(prefix + name + "/mean").row(0);
    s.std = f.matrix(prefix + name + "/std").row(0);
    return s;
  };
  Normalizer n;
  n.node = get("node");
  n.mesh_edge = get("mesh_edge");
  n.contact_edge = get("contact_edge");
  n.target = get("target");
  n.position_std = f.matrix(prefix + "position_std").row(0);
  return n;
}

Tensor step_target(const FrameState& input, const FrameState& next, TargetMode mode) {
  const Index n = input.positions.rows();
  const Index d = input.positions.cols();
  Tensor y(n, 2 * d + 1);
  y.leftCols(d) = next.positions - input.positions;
  if (mode == TargetMode::State) {
    y.middleCols(d, d) = next.velocity;
    y.col(2 * d) = next.hardening;
  } else {
    y.middleCols(d, d) = next.velocity - input.velocity;
    y.col(2 * d) = next.hardening - input.hardening;
  }
  return y;
}

FrameState advance(const Mesh& mesh, const FrameState& current, const Tensor& y, TargetMode mode) {
  const Index d = mesh.dim();
  FrameState next = current;
  for (Index i = 0; i < mesh.node_count(); ++i) {
    if (mesh.node_type[static_cast<std::size_t>(i)] != NodeType::Deformable) continue;
    next.positions.row(i) = current.positions.row(i) + y.block(i, 0, 1, d);
    if (mode == TargetMode::State) {
      next.velocity.row(i) = y.block(i, d, 1, d);
      next.hardening(i) = std::max(0.0, y(i, 2 * d));
    } else {
      next.velocity.row(i) = current.velocity.row(i) + y.block(i, d, 1, d);
      next.hardening(i) = std::max(0.0, current.hardening(i) + y(i, 2 * d));
    }
  }
  return next;
}

std::vector<bool> deformable_mask(const Mesh& mesh) {
  std::vector<bool> mask(static_cast<std::size_t>(mesh.node_count()));
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = mesh.node_type[i] == NodeType::Deformable;
  return mask;
}

Normalizer fit_normalizer(std::span<const Trajectory> trajectories, const GraphOptions& graph,
                          TargetMode mode) {
  if (trajectories.empty()) throw ConfigError("fit_normalizer: no training trajectories");
  const Index d = trajectories.front().mesh.dim();
  const FeatureDims dims = FeatureDims::for_mesh(d, graph.n_frequencies);
  StatsAccumulator node(dims.node), mesh(dims.mesh_edge), contact(dims.contact_edge),
      target(dims.output), position(d);
  for (const Trajectory& tr : trajectories) {
    const GraphBuilder builder(tr.mesh, graph);
    const auto mask = deformable_mask(tr.mesh);
    for (Index t = 0; t + 1 < tr.frame_count(); ++t) {
      const FrameState f = tr.frame(t);
      const GraphSample s = builder.build(f);
      node.add_rows(s.node_features);
      mesh.add_rows(s.mesh_features);
      contact.add_rows(s.contact_features);
      target.add_rows(step_target(f, tr.frame(t + 1), mode), mask);
      position.add_rows(f.positions, mask);
    }
  }
  Normalizer n{node.finish(), mesh.finish(), contact.finish(), target.finish(), {}};
  n.position_std = position.finish().std;
  return n;
}

namespace {

Tensor mask_weights(const std::vector<bool>& mask) {
  Index count = 0;
  for (bool b : mask) count += b ? 1 : 0;
  if (count == 0) throw ConfigError("compute_loss: mask selects no nodes");
  Tensor w = Tensor::Zero(1, static_cast<Index>(mask.size()));
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) w(0, static_cast<Index>(i)) = 1.0 / static_cast<double>(count);
  }
  return w;
}

}  // namespace

Var compute_loss(std::span<const Var> predictions, std::span<const Tensor> targets,
                 const std::vector<bool>& mask) {
  if (predictions.empty() || predictions.size() != targets.size()) {
    throw DimensionError("compute_loss: predictions and targets differ in batch size");
  }
  Tape& tape = *predictions.front().tape;
  const Tensor weights = mask_weights(mask);
  Var total;
  for (std::size_t b = 0; b < predictions.size(); ++b) {
    if (static_cast<Index>(mask.size()) != predictions[b].rows()) {
      throw DimensionError("compute_loss: mask length differs from node count");
    }
    Var residual = add_constant(predictions[b], Tensor(-targets[b]));
    Var per_node = row_sum(square(residual));
    Var sample = matmul(tape.constant(weights), per_node);
    total = b == 0 ? sample : add(total, sample);
  }
  return scale(total, 1.0 / static_cast<double>(predictions.size()));
}

double compute_loss(std::span<const Tensor> predictions, std::span<const Tensor> targets,
                    const std::vector<bool>& mask) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& p : predictions) vars.push_back(tape.constant(p));
  return compute_loss(vars, targets, mask).value()(0, 0);
}

std::vector<TrainingExample> make_batch(const GraphBuilder& builder, const Trajectory& trajectory,
                                        std::span<const Index> steps, TargetMode mode) {
  std::vector<TrainingExample> batch;
  for (Index t : steps) {
    if (t < 0 || t + 1 >= trajectory.frame_count()) {
      throw IndexError("make_batch: step " + std::to_string(t) + " outside [0," +
                       std::to_string(trajectory.frame_count() - 2) + "]");
    }
    const FrameState f = trajectory.frame(t);
    batch.push_back({builder.build(f), step_target(f, trajectory.frame(t + 1), mode)});
  }
  return batch;
}

std::vector<TrainingExample> make_batch(std::span<const GraphBuilder> builders,
                                        std::span<const Trajectory> trajectories,
                                        std::span<const BatchPick> picks, TargetMode mode) {
  if (picks.empty()) return {};
  const Index traj = picks.front().trajectory;
  std::vector<Index> steps;
  for (const BatchPick& p : picks) {
    if (p.trajectory != traj) {
      throw std::logic_error("make_batch: samples from trajectories " + std::to_string(traj) +
                             " and " + std::to_string(p.trajectory) + " in one batch");
    }
    steps.push_back(p.step);
  }
  if (traj < 0 || traj >= static_cast<Index>(trajectories.size())) {
    throw IndexError("make_batch: trajectory index out of range");
  }
  return make_batch(builders[static_cast<std::size_t>(traj)], trajectories[static_cast<std::size_t>(traj)],
                    steps, mode);
}

FrameState inject_input_noise(const Mesh& mesh, const FrameState& frame,
                              const Eigen::RowVectorXd& velocity_std,
                              const Eigen::RowVectorXd& position_std, double scale,
                              std::mt19937_64& rng) {
  if (scale < 0.0) throw std::invalid_argument("inject_input_noise: scale must be >= 0");
  FrameState out = frame;
  if (scale == 0.0) return out;
  std::normal_distribution<double> normal(0.0, 1.0);
  const Index d = mesh.dim();
  for (Index i = 0; i < mesh.node_count(); ++i) {
    if (mesh.node_type[static_cast<std::size_t>(i)] != NodeType::Deformable) continue;
    for (Index a = 0; a < d; ++a) out.positions(i, a) += scale * position_std(a) * normal(rng);
    for (Index a = 0; a < d; ++a) out.velocity(i, a) += scale * velocity_std(a) * normal(rng);
  }
  return out;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (noise_scale < 0.0) throw ConfigError("train config: noise_scale must be >= 0");
  if (!(lr > 0.0) || !(lr_final > 0.0)) throw ConfigError("train config: learning rates must be > 0");
  if (steps < 1) throw ConfigError("train config: steps must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"lr_final", lr_final},
          {"steps", steps},
          {"batch_size", batch_size},
          {"noise_scale", noise_scale},
          {"seed", seed},
          {"target_mode", to_string(target_mode)},
          {"checkpoint_every", checkpoint_every}};
}

double learning_rate(const TrainConfig& c, Index step) {
  const double frac = c.steps > 1 ? static_cast<double>(step) / static_cast<double>(c.steps - 1) : 0.0;
  return c.lr * std::pow(c.lr_final / c.lr, std::min(1.0, frac));
}

void adam_update(ParamMap& params, const std::map<std::string, Tensor>& grads, AdamState& state,
                 double lr, double beta1, double beta2, double eps) {
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    auto [mit, mnew] = state.m.try_emplace(name, Tensor::Zero(p.rows(), p.cols()));
    auto [vit, vnew] = state.v.try_emplace(name, Tensor::Zero(p.rows(), p.cols()));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseAbs2();
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

namespace {

nlohmann::json graph_to_json(const GraphOptions& g) {
  return {{"contact_radius", g.contact_radius},
          {"tied_k", g.tied_k},
          {"tie_cutoff_factor", g.tie_cutoff_factor},
          {"n_frequencies", g.n_frequencies}};
}

GraphOptions graph_from_json(const nlohmann::json& j) {
  GraphOptions g;
  j.at("contact_radius").get_to(g.contact_radius);
  j.at("tied_k").get_to(g.tied_k);
  j.at("tie_cutoff_factor").get_to(g.tie_cutoff_factor);
  j.at("n_frequencies").get_to(g.n_frequencies);
  return g;
}

}  // namespace

ArrayFile Checkpoint::to_file() const {
  ArrayFile f;
  for (const auto& [name, t] : params) f.put("param/" + name, t);
  normalizer.write(f);
  if (adam) {
    for (const auto& [name, t] : adam->m) f.put("adam.m/" + name, t);
    for (const auto& [name, t] : adam->v) f.put("adam.v/" + name, t);
  }
  Tensor hist(static_cast<Index>(history.size()), 4);
  for (std::size_t i = 0; i < history.size(); ++i) {
    hist.row(static_cast<Index>(i)) << static_cast<double>(history[i].step), history[i].loss,
        history[i].lr, history[i].grad_norm;
  }
  f.put("history", hist);
  f.meta() = {{"format", "mgnt-checkpoint/1"},
              {"model", model.to_json()},
              {"graph", graph_to_json(graph)},
              {"target_mode", to_string(target_mode)},
              {"step", step},
              {"adam_step", adam ? adam->step : -1},
              {"rng_state", rng_state}};
  return f;
}

Checkpoint Checkpoint::from_file(const ArrayFile& f) {
  if (f.meta().value("format", std::string()) != "mgnt-checkpoint/1") {
    throw FormatError("not an mgnt-checkpoint/1 file");
  }
  Checkpoint c;
  c.model = ModelConfig::from_json(f.meta().at("model"));
  c.graph = graph_from_json(f.meta().at("graph"));
  c.target_mode = target_mode_from(f.meta().at("target_mode").get<std::string>());
  c.step = f.meta().at("step").get<Index>();
  c.rng_state = f.meta().at("rng_state").get<std::string>();
  c.normalizer = Normalizer::read(f);
  const Index adam_step = f.meta().at("adam_step").get<Index>();
  if (adam_step >= 0) c.adam = AdamState{{}, {}, adam_step};
  for (const NamedArray& a : f.arrays()) {
    auto strip = [&](const std::string& prefix) -> std::optional<std::string> {
      if (a.name.rfind(prefix, 0) == 0) return a.name.substr(prefix.size());
      return std::nullopt;
    };
    if (auto n = strip("param/")) c.params.emplace(*n, f.matrix(a.name));
    if (c.adam) {
      if (auto n = strip("adam.m/")) c.adam->m.emplace(*n, f.matrix(a.name));
      if (auto n = strip("adam.v/")) c.adam->v.emplace(*n, f.matrix(a.name));
    }
  }
  const Tensor hist = f.matrix("history");
  if (f.at("history").element_count() > 0) {
    for (Index i = 0; i < hist.rows(); ++i) {
      c.history.push_back({static_cast<Index>(hist(i, 0)), hist(i, 1), hist(i, 2), hist(i, 3)});
    }
  }
  const ParamMap reference = init_params(c.model, 0);
  for (const auto& [name, t] : reference) {
    auto it = c.params.find(name);
    if (it == c.params.end() || it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
      throw FormatError("checkpoint parameter '" + name + "' missing or misshapen");
    }
  }
  return c;
}

FitResult fit(std::span<const Trajectory> trajectories, const ModelConfig& model,
              const GraphOptions& graph, const TrainConfig& train,
              const CheckpointCallback& on_checkpoint, const Checkpoint* resume) {
  train.validate();
  model.validate();
  if (trajectories.empty()) throw ConfigError("fit: no training trajectories");

  Checkpoint ck;
  ck.model = model;
  ck.graph = graph;
  ck.target_mode = train.target_mode;
  std::mt19937_64 rng(train.seed);
  if (resume) {
    const GraphOptions& g = resume->graph;
    if (resume->model.to_json() != model.to_json() || resume->target_mode != train.target_mode ||
        g.contact_radius != graph.contact_radius || g.tied_k != graph.tied_k ||
        g.tie_cutoff_factor != graph.tie_cutoff_factor || g.n_frequencies != graph.n_frequencies) {
      throw SchemaError("fit: resumed checkpoint was trained with a different model, graph or target configuration");
    }
    ck = *resume;
    std::istringstream is(resume->rng_state);
    is >> rng;
    if (!ck.adam) ck.adam = AdamState{};
  } else {
    ck.normalizer = fit_normalizer(trajectories, graph, train.target_mode);
    ck.params = init_params(model, train.seed);
    ck.adam = AdamState{};
  }

  std::vector<GraphBuilder> builders;
  builders.reserve(trajectories.size());
  for (const Trajectory& tr : trajectories) builders.emplace_back(tr.mesh, graph);
  const Eigen::RowVectorXd velocity_std = ck.normalizer.node.std.head(trajectories.front().mesh.dim());

  std::uniform_int_distribution<std::size_t> pick_traj(0, trajectories.size() - 1);
  for (Index step = ck.step; step < train.steps; ++step) {
    const std::size_t ti = pick_traj(rng);
    const Trajectory& tr = trajectories[ti];
    if (tr.frame_count() < 2) throw ConfigError("fit: trajectory shorter than two frames");
    std::uniform_int_distribution<Index> pick_step(0, tr.frame_count() - 2);
    const auto mask = deformable_mask(tr.mesh);

    Tape tape;
    BoundParams bound(tape, ck.params, true);
    std::vector<Var> preds;
    std::vector<Tensor> targets;
    for (Index b = 0; b < train.batch_size; ++b) {
      const Index t = pick_step(rng);
      const FrameState clean = tr.frame(t);
      const FrameState input = inject_input_noise(tr.mesh, clean, velocity_std,
                                                  ck.normalizer.position_std, train.noise_scale, rng);
      const GraphSample sample = ck.normalizer.apply(builders[ti].build(input));
      targets.push_back(ck.normalizer.target.normalize(
          step_target(input, tr.frame(t + 1), train.target_mode)));
      ForwardOptions opts;
      opts.train_mode = true;
      opts.rng = &rng;
      preds.push_back(forward(tape, bound, model, sample, opts).prediction);
    }
    Var loss = compute_loss(preds, targets, mask);
    tape.backward(loss);

    std::map<std::string, Tensor> grads;
    double sq = 0.0;
    for (const auto& [name, var] : bound.vars()) {
      grads.emplace(name, var.grad());
      sq += var.grad().squaredNorm();
    }
    const double grad_norm = std::sqrt(sq);
    const double lr = learning_rate(train, step);
    const double value = loss.value()(0, 0);
    if (!std::isfinite(value) || !std::isfinite(grad_norm)) {
      std::ostringstream os;
      os << "non-finite loss at step " << step << " (lr=" << lr << ", grad_norm=" << grad_norm << ")";
      throw TrainingAbort(os.str());
    }
    adam_update(ck.params, grads, *ck.adam, lr);
    ck.history.push_back({step, value, lr, grad_norm});
    ck.step = step + 1;

    const bool periodic = train.checkpoint_every > 0 && ck.step % train.checkpoint_every == 0;
    if (on_checkpoint && (periodic || ck.step == train.steps)) {
      std::ostringstream os;
      os << rng;
      ck.rng_state = os.str();
      on_checkpoint(ck);
    }
  }
  std::ostringstream os;
  os << rng;
  ck.rng_state = os.str();
  FitResult r;
  r.params = ck.params;
  r.history = ck.history;
  r.checkpoint = std::move(ck);
  return r;
}

Surrogate::Surrogate(Checkpoint checkpoint) : checkpoint_(std::move(checkpoint)) {
  checkpoint_.model.validate();
}

Tensor Surrogate::predict(const GraphSample& raw, std::vector<Tensor>* slice_weights) const {
  const GraphSample sample = checkpoint_.normalizer.apply(raw);
  const Tensor y = mgnt::predict(checkpoint_.params, checkpoint_.model, sample, slice_weights);
  return checkpoint_.normalizer.target.denormalize(y);
}

Tensor Surrogate::predict(const GraphBuilder& builder, const FrameState& frame,
                          std::vector<Tensor>* slice_weights) const {
  return predict(builder.build(frame), slice_weights);
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "step,loss,lr,grad_norm\n" << std::setprecision(17);
  for (const auto& r : history) os << r.step << "," << r.loss << "," << r.lr << "," << r.grad_norm << "\n";
}

}  // namespace mgnt
