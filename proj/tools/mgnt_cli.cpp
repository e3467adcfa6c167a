// mgnt command-line driver: data generation, training, evaluation, rollout,
// attention export and the self-check.

#include "mgnt/metrics.hpp"
#include "mgnt/run_config.hpp"
#include "mgnt/verify.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>

namespace fs = std::filesystem;
using namespace mgnt;

namespace {

enum Exit {
  kOk = 0,
  kVerifyFailed = 1,
  kConfigError = 2,
  kTrainingAbort = 3,
  kSchemaMismatch = 4,
  kRuntimeError = 5,  // I/O, oracle instability, rollout abort
};

struct Args {
  std::string config;
  std::string out = ".";
  std::string data;
  std::string checkpoint;
  std::string trajectory;
  std::optional<std::uint64_t> seed;
  Index workers = 1;
  Index horizon = 0;
  Index frame = 0;
  Index block = 0;
  bool resume = false;
  bool attention = false;
  bool sabotage = false;
};

RunConfig resolve_config(const Args& a) {
  RunConfig c = a.config.empty() ? RunConfig() : RunConfig::load(a.config);
  if (const char* env = std::getenv("MGNT_SEED")) c.set("seed", env);
  if (a.seed) c.set("seed", std::to_string(*a.seed));
  c.seed();
  return c;
}

std::vector<Trajectory> load_split(const fs::path& data, const std::string& split,
                                   std::vector<std::string>* names = nullptr) {
  const auto manifest = DatasetManifest::load(data / "manifest.json");
  std::vector<Trajectory> out;
  for (const auto& f : manifest.files(data, split)) {
    out.push_back(Trajectory::load(f));
    if (names) names->push_back(f.filename().string());
  }
  if (out.empty()) throw ConfigError("no '" + split + "' trajectories in " + data.string());
  return out;
}

int cmd_gen_data(const Args& a) {
  const RunConfig c = resolve_config(a);
  const fs::path out = a.out;
  const std::string kind = c.get("data.kind");
  const Index n_train = c.integer("data.n_train");
  const Index n_test = c.integer("data.n_test");
  DatasetManifest m;
  if (kind == "impact") {
    m = gen_dataset(out, n_train, n_test, c.oracle(), c.seed(), a.workers);
  } else if (kind == "chain") {
    m = gen_chain_dataset(out, n_train, n_test, c.chain(), c.seed(), a.workers);
  } else {
    throw ConfigError("config key 'data.kind': expected impact or chain, got '" + kind + "'");
  }
  c.echo(out);
  std::cout << "wrote " << m.entries.size() << " " << kind << " trajectories + manifest to " << out << "\n";
  return kOk;
}

int cmd_train(const Args& a) {
  const RunConfig c = resolve_config(a);
  if (a.data.empty()) throw ConfigError("train: --data DIR is required");
  const fs::path out = a.out;
  fs::create_directories(out);
  c.echo(out);
  const auto trajs = load_split(a.data, "train");
  const GraphOptions graph = c.graph();
  const ModelConfig model = c.model(FeatureDims::for_mesh(trajs.front().mesh.dim(), graph.n_frequencies));
  for (const auto& tr : trajs) check_schema(model, graph, tr.mesh);
  const TrainConfig train = c.train();

  std::optional<Checkpoint> resume;
  const fs::path ck_path = out / "checkpoint.mgnt";
  if (a.resume) {
    if (!fs::exists(ck_path)) throw ConfigError("--resume: no checkpoint at " + ck_path.string());
    resume = Checkpoint::load(ck_path);
    std::cout << "resuming from step " << resume->step << "\n";
  }
  std::cout << "training " << param_count(model) << " parameters on " << trajs.size()
            << " trajectories for " << train.steps << " steps\n";
  auto on_checkpoint = [&](const Checkpoint& ck) {
    ck.save(ck_path);
    write_loss_csv(out / "loss.csv", ck.history);
    std::cout << "step " << ck.step << "  loss " << ck.history.back().loss << "\n" << std::flush;
  };
  const FitResult r = fit(trajs, model, graph, train, on_checkpoint, resume ? &*resume : nullptr);
  r.checkpoint.save(out / "model.mgnt");
  r.checkpoint.save(ck_path);
  write_loss_csv(out / "loss.csv", r.history);
  std::cout << "final loss " << r.history.back().loss << "; wrote " << (out / "model.mgnt") << "\n";
  return kOk;
}

int cmd_eval(const Args& a) {
  const RunConfig c = resolve_config(a);
  if (a.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
  const Surrogate s(Checkpoint::load(a.checkpoint));
  std::vector<std::string> names;
  std::vector<Trajectory> trajs;
  if (!a.trajectory.empty()) {
    trajs.push_back(Trajectory::load(a.trajectory));
    names.push_back(fs::path(a.trajectory).filename().string());
  } else if (!a.data.empty()) {
    trajs = load_split(a.data, c.get("eval.split"), &names);
  } else {
    throw ConfigError("eval: --data DIR or --trajectory FILE is required");
  }
  std::vector<GraphBuilder> builders;
  for (const auto& tr : trajs) {
    check_schema(s.config(), s.checkpoint().graph, tr.mesh);
    builders.push_back(s.builder(tr.mesh));
  }
  const Index horizon = a.horizon > 0 ? a.horizon : c.integer("eval.horizon");
  const MetricsReport report =
      evaluate(surrogate_predictor(s), s.target_mode(), builders, trajs, horizon, nullptr, names);
  report.write(a.out);
  c.echo(a.out);
  std::cout << std::setprecision(6);
  for (const auto& v : report.variables) {
    std::cout << std::left << std::setw(14) << to_string(v.variable) << " rmse_1 " << v.rmse_1.value
              << "  rmse_all " << v.rmse_all.value << "  r_rmse " << v.r_rmse.value << "%\n";
  }
  return kOk;
}

int cmd_rollout(const Args& a) {
  const RunConfig c = resolve_config(a);
  if (a.checkpoint.empty() || a.trajectory.empty()) {
    throw ConfigError("rollout: --checkpoint and --trajectory are required");
  }
  const Surrogate s(Checkpoint::load(a.checkpoint));
  const Trajectory truth = Trajectory::load(a.trajectory);
  check_schema(s.config(), s.checkpoint().graph, truth.mesh);
  const GraphBuilder builder = s.builder(truth.mesh);
  const Index horizon = a.horizon > 0 ? a.horizon : truth.frame_count() - 1;
  const RolloutResult r =
      rollout(surrogate_predictor(s), s.target_mode(), builder, truth, horizon, a.attention);
  const fs::path out = a.out;
  fs::create_directories(out);
  r.trajectory.save(out / "rollout.mgnt");
  if (a.attention) {
    ArrayFile f;
    for (std::size_t t = 0; t < r.slice_weights.size(); ++t) {
      for (std::size_t b = 0; b < r.slice_weights[t].size(); ++b) {
        f.put("weights/step" + std::to_string(t) + "/block" + std::to_string(b), r.slice_weights[t][b]);
      }
    }
    f.meta() = {{"format", "mgnt-attention-steps/1"}, {"steps", r.slice_weights.size()}};
    f.save(out / "attention_steps.mgnt");
  }
  std::ofstream csv(out / "rollout_error.csv");
  csv << std::setprecision(17) << "step,displacement_rmse,velocity_rmse,hardening_rmse,contact_edges\n";
  for (Index t = 1; t <= horizon; ++t) {
    csv << t;
    for (Variable v : kVariables) {
      const Tensor d = variable_values(r.trajectory, v, t) - variable_values(truth, v, t);
      csv << "," << (d.size() ? std::sqrt(d.squaredNorm() / static_cast<double>(d.size())) : 0.0);
    }
    csv << "," << r.contact_counts[static_cast<std::size_t>(t - 1)] << "\n";
  }
  c.echo(out);
  std::cout << "rolled out " << horizon << " steps; wrote " << (out / "rollout.mgnt") << "\n";
  return kOk;
}

int cmd_export_attention(const Args& a) {
  const RunConfig c = resolve_config(a);
  if (a.checkpoint.empty() || a.trajectory.empty()) {
    throw ConfigError("export-attention: --checkpoint and --trajectory are required");
  }
  const Surrogate s(Checkpoint::load(a.checkpoint));
  const Trajectory tr = Trajectory::load(a.trajectory);
  check_schema(s.config(), s.checkpoint().graph, tr.mesh);
  const AttentionExport e = export_attention(s, s.builder(tr.mesh), tr.frame(a.frame), a.block);
  const fs::path out = a.out;
  fs::create_directories(out);
  e.to_file().save(out / "attention.mgnt");
  std::ofstream csv(out / "attention.csv");
  csv << std::setprecision(17);
  for (Index k = 0; k < e.positions.cols(); ++k) csv << "x" << k << ",";
  for (Index j = 0; j < e.weights.cols(); ++j) csv << "w" << j << (j + 1 < e.weights.cols() ? "," : "\n");
  for (Index i = 0; i < e.positions.rows(); ++i) {
    for (Index k = 0; k < e.positions.cols(); ++k) csv << e.positions(i, k) << ",";
    for (Index j = 0; j < e.weights.cols(); ++j) csv << e.weights(i, j) << (j + 1 < e.weights.cols() ? "," : "\n");
  }
  c.echo(out);
  std::cout << "exported block " << a.block << " (" << e.weights.cols() << " tokens) for frame " << a.frame
            << "\n";
  return kOk;
}

int cmd_verify(const Args& a) {
  const RunConfig c = resolve_config(a);
  VerifyOptions opts;
  opts.seed = c.seed();
  opts.sabotage_gradient = a.sabotage;
  const auto results = run_verify(opts);
  print_table(std::cout, results);
  bool ok = true;
  for (const auto& r : results) ok = ok && r.passed;
  if (!ok) {
    std::cerr << "failed:";
    for (const auto& r : results) {
      if (!r.passed) std::cerr << " [" << r.name << "]";
    }
    std::cerr << "\n";
  }
  return ok ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MeshGraphNet-Transformer surrogate at desk scale"};
  app.require_subcommand(1);
  Args a;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", a.config, "key = value config file");
    sub->add_option("--out", a.out, "output directory");
    sub->add_option("--seed", a.seed, "overrides the config seed");
    sub->add_option("--workers", a.workers, "worker threads for per-trajectory work")->check(CLI::PositiveNumber);
  };
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  common(gen);
  auto* train = app.add_subcommand("train", "teacher-forced training");
  common(train);
  train->add_option("--data", a.data, "dataset directory (manifest.json)");
  train->add_flag("--resume", a.resume, "continue from OUT/checkpoint.mgnt");
  auto* eval = app.add_subcommand("eval", "RMSE-1 / RMSE-all / R-RMSE and consistency curves");
  common(eval);
  eval->add_option("--checkpoint", a.checkpoint, "trained model");
  eval->add_option("--data", a.data, "dataset directory");
  eval->add_option("--trajectory", a.trajectory, "single trajectory file instead of a dataset");
  eval->add_option("--horizon", a.horizon, "rollout horizon (default: eval.horizon)");
  auto* roll = app.add_subcommand("rollout", "autoregressive rollout of one trajectory");
  common(roll);
  roll->add_option("--checkpoint", a.checkpoint, "trained model");
  roll->add_option("--trajectory", a.trajectory, "ground-truth trajectory");
  roll->add_option("--horizon", a.horizon, "steps (default: full length)");
  roll->add_flag("--attention", a.attention, "also write per-step slice weights");
  auto* att = app.add_subcommand("export-attention", "slice weights of one block for one frame");
  common(att);
  att->add_option("--checkpoint", a.checkpoint, "trained model");
  att->add_option("--trajectory", a.trajectory, "trajectory file");
  att->add_option("--frame", a.frame, "frame index");
  att->add_option("--block", a.block, "transformer block");
  auto* ver = app.add_subcommand("verify", "fast invariant suite");
  common(ver);
  ver->add_flag("--sabotage-gradient", a.sabotage, "negative control: corrupt one gradient rule");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen) return cmd_gen_data(a);
    if (*train) return cmd_train(a);
    if (*eval) return cmd_eval(a);
    if (*roll) return cmd_rollout(a);
    if (*att) return cmd_export_attention(a);
    if (*ver) return cmd_verify(a);
  } catch (const TrainingAbort& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kTrainingAbort;
  } catch (const SchemaError& e) {
    std::cerr << "schema mismatch: " << e.what() << "\n";
    return kSchemaMismatch;
  } catch (const FormatError& e) {
    std::cerr << "schema mismatch: " << e.what() << "\n";
    return kSchemaMismatch;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kOk;
}
