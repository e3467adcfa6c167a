#pragma once

#include "mgnt/grad_check.hpp"
#include "mgnt/model.hpp"

#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace mgnt {

// Small fixtures shared by the self-check, the unit tests and the
// acceptance suite.

struct ToyProblem {
  Mesh mesh;
  FrameState frame;
};

/// A triangulated rows x cols sheet (component 0, deformable) above a row of
/// `wall` obstacle nodes (component 1), with randomly perturbed current
/// positions, velocities and hardening.
ToyProblem make_toy_problem(Index rows, Index cols, Index wall, std::uint64_t seed);

/// Node i of the result is node perm[i] of the input.
Mesh permute_mesh(const Mesh& mesh, const std::vector<Index>& perm);
FrameState permute_frame(const FrameState& frame, const std::vector<Index>& perm);
std::vector<Index> random_permutation(Index n, std::mt19937_64& rng);

/// Narrow model for fast checks; same topology as the default.
ModelConfig toy_model_config(const FeatureDims& dims);

/// One differentiable primitive wrapped as a scalar function of random
/// inputs (reduced against a fixed random weighting).
struct PrimitiveCase {
  std::string name;
  std::function<std::vector<Tensor>(std::mt19937_64&)> inputs;
  ScalarFunction f;
};

/// Every primitive of the tape. With `sabotage` the square rule carries a
/// deliberately wrong derivative.
std::vector<PrimitiveCase> primitive_cases(bool sabotage = false);

/// x^2 with the derivative 3x instead of 2x.
Var sabotaged_square(Var x);

/// grad_check of loss(forward(sample)) with respect to all parameters, in
/// train mode with a fixed Gumbel draw.
GradCheckResult composite_grad_check(const ModelConfig& config, const GraphSample& sample,
                                     const Tensor& target, std::uint64_t seed, double step = 1e-5,
                                     double tolerance = 1e-4);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  bool sabotage_gradient = false;
  std::uint64_t seed = 0;
};

std::vector<CheckResult> run_verify(const VerifyOptions& options = {});
void print_table(std::ostream& os, const std::vector<CheckResult>& results);

}  // namespace mgnt
