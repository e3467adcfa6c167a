#pragma once

#include "mgnt/mesh_graph.hpp"
#include "mgnt/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace mgnt {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input/output widths of the graph the model is built for.
struct FeatureDims {
  Index node = 0;
  Index mesh_edge = 0;
  Index contact_edge = 0;
  Index encoding = 0;
  Index output = 0;

  /// Widths produced by GraphBuilder for a d-dimensional mesh, with
  /// `n_frequencies` encoding terms and the (displacement, velocity,
  /// hardening) output layout.
  static FeatureDims for_mesh(Index dim, Index n_frequencies);
};

struct ModelConfig {
  Index latent_dim = 64;
  Index mpnn_pre = 2;
  Index mpnn_refine = 2;
  Index n_blocks = 2;
  Index n_heads = 4;
  Index n_tokens = 32;
  /// Transformer widths: node projection width, per-head width, and the
  /// width the attention output is projected back to.
  Index proj_width = 64;
  Index head_width = 32;
  Index ffn_multiplier = 4;
  double tau0 = 0.5;
  double tau_min = 0.01;
  double leaky_slope = 0.01;
  double ln_eps = 1e-5;
  double decoder_init_scale = 0.1;
  FeatureDims dims;

  Index attention_width() const { return n_heads * head_width; }
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Named trainable arrays, ordered by name.
using ParamMap = std::map<std::string, Tensor>;

ParamMap init_params(const ModelConfig& config, std::uint64_t seed);

/// Exact scalar parameter count, derived from the layer shapes without
/// allocating them.
std::int64_t param_count(const ModelConfig& config);

std::int64_t count_scalars(const ParamMap& params);

/// Leaves for every parameter on one tape.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamMap& params, bool trainable = true);
  explicit BoundParams(std::map<std::string, Var> vars) : vars_(std::move(vars)) {}
  Var operator[](const std::string& name) const;
  const std::map<std::string, Var>& vars() const { return vars_; }

 private:
  std::map<std::string, Var> vars_;
};

/// Slicing output: tokens and the slice weights that produced them.
struct SliceResult {
  Var tokens;   // P x d
  Var weights;  // N x P
};

/// Lower bound on a token's total slice weight. Only a token whose weights
/// have all underflowed reaches it; without it that token is 0/0.
inline constexpr double kSliceMassFloor = 1e-5;

/// Per-node logits/temperature to slice weights and token means.
/// `gumbel` holds one Gumbel draw per weight entry (train mode) or is empty.
SliceResult slice(Var features, Var logits, Var temperature, const Tensor* gumbel);

/// Physics-token multi-head attention with output projection.
Var token_attention(Var tokens, const BoundParams& p, const std::string& prefix, Index n_heads);

/// Redistributes tokens to nodes: x'_i = sum_j w_ij z'_j.
Var deslice(Var tokens, Var weights);

/// Gumbel(0,1) draws -log(-log(u)), u uniform on the open unit interval.
Tensor sample_gumbel(Index rows, Index cols, std::mt19937_64& rng);

struct ForwardOptions {
  bool train_mode = false;
  std::mt19937_64* rng = nullptr;  // required in train mode
  bool keep_slice_weights = false;
};

struct ForwardResult {
  Var prediction;                     // N x output
  std::vector<Tensor> slice_weights;  // one N x P matrix per block when requested
};

/// Encoder -> pre MPNN -> transformer blocks -> refinement MPNN -> decoder.
/// Node/edge features are expected already normalized.
ForwardResult forward(Tape& tape, const BoundParams& params, const ModelConfig& config,
                      const GraphSample& sample, const ForwardOptions& options = {});

/// Convenience evaluation without gradients.
Tensor predict(const ParamMap& params, const ModelConfig& config, const GraphSample& sample,
               std::vector<Tensor>* slice_weights = nullptr);

// Building blocks, exposed for tests.
struct LatentGraph {
  Var nodes;
  Var mesh_edges;
  Var contact_edges;  // absent when the sample has no contact edges
  bool has_contact = false;
};

LatentGraph encode(Tape& tape, const BoundParams& p, const ModelConfig& config,
                   const GraphSample& sample);
LatentGraph mpnn_iteration(const LatentGraph& g, const BoundParams& p, const std::string& prefix,
                           const ModelConfig& config, const GraphSample& sample);
Var transformer_block(Var node_latents, Var encoding, const BoundParams& p,
                      const std::string& prefix, const ModelConfig& config,
                      const ForwardOptions& options, Tensor* slice_weights_out);

}  // namespace mgnt
