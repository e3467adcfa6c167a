#include "mgnt/model.hpp"

#include <cmath>
#include <string>

namespace mgnt {

FeatureDims FeatureDims::for_mesh(Index dim, Index n_frequencies) {
  return FeatureDims{node_feature_dim(dim), 2 * (dim + 1), dim + 1, 2 * dim * n_frequencies,
                     2 * dim + 1};
}

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
  };
  positive(latent_dim, "latent_dim");
  positive(n_heads, "n_heads");
  positive(n_tokens, "n_tokens");
  positive(proj_width, "proj_width");
  positive(head_width, "head_width");
  positive(ffn_multiplier, "ffn_multiplier");
  positive(dims.node, "node feature width");
  positive(dims.mesh_edge, "mesh edge feature width");
  positive(dims.contact_edge, "contact edge feature width");
  positive(dims.output, "output width");
  if (mpnn_pre < 0 || mpnn_refine < 0 || n_blocks < 0) {
    throw ConfigError("model config: iteration/block counts must be nonnegative");
  }
  if (n_blocks > 0) positive(dims.encoding, "positional encoding width");
  if (attention_width() % n_heads != 0) {
    throw ConfigError("model config: attention width not divisible by n_heads");
  }
  if (!(tau0 > 0.0) || !(tau_min > 0.0)) throw ConfigError("model config: temperatures must be positive");
  if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("model config: leaky_slope outside (0,1)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"latent_dim", latent_dim},
          {"mpnn_pre", mpnn_pre},
          {"mpnn_refine", mpnn_refine},
          {"n_blocks", n_blocks},
          {"n_heads", n_heads},
          {"n_tokens", n_tokens},
          {"proj_width", proj_width},
          {"head_width", head_width},
          {"ffn_multiplier", ffn_multiplier},
          {"tau0", tau0},
          {"tau_min", tau_min},
          {"leaky_slope", leaky_slope},
          {"ln_eps", ln_eps},
          {"decoder_init_scale", decoder_init_scale},
          {"dims",
           {{"node", dims.node},
            {"mesh_edge", dims.mesh_edge},
            {"contact_edge", dims.contact_edge},
            {"encoding", dims.encoding},
            {"output", dims.output}}}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.latent_dim = j.at("latent_dim").get<Index>();
  c.mpnn_pre = j.at("mpnn_pre").get<Index>();
  c.mpnn_refine = j.at("mpnn_refine").get<Index>();
  c.n_blocks = j.at("n_blocks").get<Index>();
  c.n_heads = j.at("n_heads").get<Index>();
  c.n_tokens = j.at("n_tokens").get<Index>();
  c.proj_width = j.at("proj_width").get<Index>();
  c.head_width = j.at("head_width").get<Index>();
  c.ffn_multiplier = j.at("ffn_multiplier").get<Index>();
  c.tau0 = j.at("tau0").get<double>();
  c.tau_min = j.at("tau_min").get<double>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  c.ln_eps = j.at("ln_eps").get<double>();
  c.decoder_init_scale = j.at("decoder_init_scale").get<double>();
  const auto& d = j.at("dims");
  c.dims = FeatureDims{d.at("node").get<Index>(), d.at("mesh_edge").get<Index>(),
                       d.at("contact_edge").get<Index>(), d.at("encoding").get<Index>(),
                       d.at("output").get<Index>()};
  c.validate();
  return c;
}

namespace {

enum class Role { Weight, Bias, Gain, Shift };

struct ParamSpec {
  std::string name;
  Index rows;
  Index cols;
  Role role;
  double init_scale = 1.0;
};

void add_linear(std::vector<ParamSpec>& out, const std::string& name, Index in, Index width,
                double scale = 1.0) {
  out.push_back({name + ".w", in, width, Role::Weight, scale});
  out.push_back({name + ".b", 1, width, Role::Bias, scale});
}

void add_norm(std::vector<ParamSpec>& out, const std::string& name, Index width) {
  out.push_back({name + ".g", 1, width, Role::Gain});
  out.push_back({name + ".b", 1, width, Role::Shift});
}

void add_mlp(std::vector<ParamSpec>& out, const std::string& name, Index in, Index hidden,
             Index width, bool norm) {
  add_linear(out, name + ".l0", in, hidden);
  add_linear(out, name + ".l1", hidden, width);
  if (norm) add_norm(out, name + ".ln", width);
}

std::string mpnn_name(bool pre, Index k) { return (pre ? "mpnn.pre" : "mpnn.ref") + std::to_string(k); }
std::string block_name(Index b) { return "block" + std::to_string(b); }

std::vector<ParamSpec> layout(const ModelConfig& c) {
  const Index L = c.latent_dim;
  std::vector<ParamSpec> specs;
  add_mlp(specs, "enc.node", c.dims.node, L, L, true);
  add_mlp(specs, "enc.mesh", c.dims.mesh_edge, L, L, true);
  add_mlp(specs, "enc.contact", c.dims.contact_edge, L, L, true);
  auto mpnn = [&](bool pre, Index k) {
    add_mlp(specs, mpnn_name(pre, k) + ".edge", 3 * L, L, L, true);
    add_mlp(specs, mpnn_name(pre, k) + ".node", 3 * L, L, L, true);
  };
  for (Index k = 0; k < c.mpnn_pre; ++k) mpnn(true, k);
  const Index D = c.proj_width;
  const Index A = c.attention_width();
  for (Index b = 0; b < c.n_blocks; ++b) {
    const std::string n = block_name(b);
    add_linear(specs, n + ".in", L + c.dims.encoding, D);
    add_norm(specs, n + ".ln1", D);
    add_linear(specs, n + ".slice", D, c.n_tokens);
    add_linear(specs, n + ".temp", D, 1);
    add_linear(specs, n + ".x", D, A);
    add_linear(specs, n + ".attn.q", A, A);
    add_linear(specs, n + ".attn.k", A, A);
    add_linear(specs, n + ".attn.v", A, A);
    add_linear(specs, n + ".attn.out", A, D);
    add_norm(specs, n + ".ln2", D);
    add_linear(specs, n + ".ffn0", D, c.ffn_multiplier * D);
    add_linear(specs, n + ".ffn1", c.ffn_multiplier * D, D);
    add_linear(specs, n + ".out", D, L);
  }
  for (Index k = 0; k < c.mpnn_refine; ++k) mpnn(false, k);
  add_linear(specs, "dec.l0", L, L);
  add_linear(specs, "dec.l1", L, c.dims.output, c.decoder_init_scale);
  return specs;
}

Var mlp(Var x, const BoundParams& p, const std::string& name, const ModelConfig& c, bool norm) {
  Var h = leaky_relu(linear(x, p[name + ".l0.w"], p[name + ".l0.b"]), c.leaky_slope);
  Var y = linear(h, p[name + ".l1.w"], p[name + ".l1.b"]);
  if (norm) y = layer_norm(y, p[name + ".ln.g"], p[name + ".ln.b"], c.ln_eps);
  return y;
}

}  // namespace

ParamMap init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ParamMap params;
  // Weights and biases share the fan-in of the weight they belong to.
  Index fan_in = 1;
  for (const ParamSpec& s : layout(config)) {
    Tensor t(s.rows, s.cols);
    switch (s.role) {
      case Role::Gain: t.setOnes(); break;
      case Role::Shift: t.setZero(); break;
      case Role::Weight:
        fan_in = s.rows;
        [[fallthrough]];
      case Role::Bias: {
        const double a = s.init_scale / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> u(-a, a);
        for (Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
        break;
      }
    }
    params.emplace(s.name, std::move(t));
  }
  return params;
}

std::int64_t param_count(const ModelConfig& config) {
  config.validate();
  std::int64_t n = 0;
  for (const ParamSpec& s : layout(config)) n += static_cast<std::int64_t>(s.rows * s.cols);
  return n;
}

std::int64_t count_scalars(const ParamMap& params) {
  std::int64_t n = 0;
  for (const auto& [name, t] : params) n += static_cast<std::int64_t>(t.size());
  return n;
}

BoundParams::BoundParams(Tape& tape, const ParamMap& params, bool trainable) {
  for (const auto& [name, t] : params) vars_.emplace(name, trainable ? tape.leaf(t) : tape.constant(t));
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

Tensor sample_gumbel(Index rows, Index cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor g(rows, cols);
  for (Index i = 0; i < g.size(); ++i) {
    double e = u(rng);
    while (e <= 0.0) e = u(rng);
    g.data()[i] = -std::log(-std::log(e));
  }
  return g;
}

SliceResult slice(Var features, Var logits, Var temperature, const Tensor* gumbel) {
  Tape& tape = *features.tape;
  OpScope scope(tape, "slice");
  if (logits.rows() != features.rows() || temperature.rows() != features.rows() ||
      temperature.cols() != 1) {
    throw DimensionError("slice: logits " + shape_string(logits.value()) + " / temperature " +
                         shape_string(temperature.value()) + " for features " +
                         shape_string(features.value()));
  }
  Var scores = gumbel ? add_constant(logits, *gumbel) : logits;
  Var weights = softmax(div_rows(scores, temperature), Axis::Cols);
  Var weights_t = transpose(weights);                         // P x N
  Var mass = clamp_min(transpose(col_sum(weights)), kSliceMassFloor);  // P x 1
  Var tokens = div_rows(matmul(weights_t, features), mass);   // P x d
  return {tokens, weights};
}

Var token_attention(Var tokens, const BoundParams& p, const std::string& prefix, Index n_heads) {
  Tape& tape = *tokens.tape;
  OpScope scope(tape, "attention");
  Var q = linear(tokens, p[prefix + ".q.w"], p[prefix + ".q.b"]);
  Var k = linear(tokens, p[prefix + ".k.w"], p[prefix + ".k.b"]);
  Var v = linear(tokens, p[prefix + ".v.w"], p[prefix + ".v.b"]);
  const Index width = q.cols();
  if (width % n_heads != 0) {
    throw DimensionError("token_attention: width " + std::to_string(width) +
                         " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const Index c = width / n_heads;
  const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (Index h = 0; h < n_heads; ++h) {
    Var qh = slice_cols(q, h * c, c);
    Var kh = slice_cols(k, h * c, c);
    Var vh = slice_cols(v, h * c, c);
    Var attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_c), Axis::Cols);
    heads.push_back(matmul(attn, vh));
  }
  Var merged = n_heads == 1 ? heads.front() : concat_cols(heads);
  return linear(merged, p[prefix + ".out.w"], p[prefix + ".out.b"]);
}

Var deslice(Var tokens, Var weights) {
  Tape& tape = *tokens.tape;
  OpScope scope(tape, "deslice");
  if (weights.cols() != tokens.rows()) {
    throw DimensionError("deslice: weights " + shape_string(weights.value()) + " for tokens " +
                         shape_string(tokens.value()));
  }
  return matmul(weights, tokens);
}

LatentGraph encode(Tape& tape, const BoundParams& p, const ModelConfig& c, const GraphSample& s) {
  if (s.node_features.cols() != c.dims.node || s.mesh_features.cols() != c.dims.mesh_edge ||
      (s.contact_features.rows() > 0 && s.contact_features.cols() != c.dims.contact_edge)) {
    throw ConfigError("encode: sample feature widths (" + std::to_string(s.node_features.cols()) +
                      ", " + std::to_string(s.mesh_features.cols()) + ", " +
                      std::to_string(s.contact_features.cols()) + ") differ from config (" +
                      std::to_string(c.dims.node) + ", " + std::to_string(c.dims.mesh_edge) +
                      ", " + std::to_string(c.dims.contact_edge) + ")");
  }
  LatentGraph g;
  g.nodes = mlp(tape.constant(s.node_features), p, "enc.node", c, true);
  g.mesh_edges = mlp(tape.constant(s.mesh_features), p, "enc.mesh", c, true);
  g.has_contact = !s.contact_edges.empty();
  if (g.has_contact) g.contact_edges = mlp(tape.constant(s.contact_features), p, "enc.contact", c, true);
  return g;
}

LatentGraph mpnn_iteration(const LatentGraph& g, const BoundParams& p, const std::string& prefix,
                           const ModelConfig& c, const GraphSample& s) {
  Tape& tape = *g.nodes.tape;
  const Index n = g.nodes.rows();
  auto update_edges = [&](Var edges, const EdgeSet& set) {
    const Var parts[] = {edges, gather_rows(g.nodes, set.senders), gather_rows(g.nodes, set.receivers)};
    return add(edges, mlp(concat_cols(parts), p, prefix + ".edge", c, true));
  };
  auto aggregate = [&](Var edges, const EdgeSet& set) {
    return segment_sum(edges, set.receivers, n);
  };

  LatentGraph out = g;
  Var mesh_sum = tape.constant(Tensor::Zero(n, c.latent_dim));
  if (!s.mesh_edges.empty()) {
    out.mesh_edges = update_edges(g.mesh_edges, s.mesh_edges);
    mesh_sum = aggregate(out.mesh_edges, s.mesh_edges);
  }
  Var contact_sum = tape.constant(Tensor::Zero(n, c.latent_dim));
  if (g.has_contact) {
    out.contact_edges = update_edges(g.contact_edges, s.contact_edges);
    contact_sum = aggregate(out.contact_edges, s.contact_edges);
  }
  const Var parts[] = {g.nodes, mesh_sum, contact_sum};
  out.nodes = add(g.nodes, mlp(concat_cols(parts), p, prefix + ".node", c, true));
  return out;
}

Var transformer_block(Var node_latents, Var encoding, const BoundParams& p,
                      const std::string& prefix, const ModelConfig& c,
                      const ForwardOptions& options, Tensor* slice_weights_out) {
  Tape& tape = *node_latents.tape;
  const Var in_parts[] = {node_latents, encoding};
  Var h = linear(concat_cols(in_parts), p[prefix + ".in.w"], p[prefix + ".in.b"]);
  Var hn = layer_norm(h, p[prefix + ".ln1.g"], p[prefix + ".ln1.b"], c.ln_eps);

  Var logits;
  Var temperature;
  Var features;
  std::optional<Tensor> gumbel;
  {
    OpScope scope(tape, "slice");
    logits = linear(hn, p[prefix + ".slice.w"], p[prefix + ".slice.b"]);
    Var offset = linear(hn, p[prefix + ".temp.w"], p[prefix + ".temp.b"]);
    temperature = clamp_min(add_constant(offset, Tensor::Constant(offset.rows(), 1, c.tau0)), c.tau_min);
    if (options.train_mode) {
      if (!options.rng) throw std::invalid_argument("transformer_block: train mode needs an rng");
      gumbel = sample_gumbel(logits.rows(), logits.cols(), *options.rng);
    }
  }
  {
    OpScope scope(tape, "slice_projection");
    features = linear(hn, p[prefix + ".x.w"], p[prefix + ".x.b"]);
  }
  SliceResult sliced = slice(features, logits, temperature, gumbel ? &*gumbel : nullptr);
  if (slice_weights_out) *slice_weights_out = sliced.weights.value();
  Var updated = token_attention(sliced.tokens, p, prefix + ".attn", c.n_heads);
  h = add(h, deslice(updated, sliced.weights));

  Var hn2 = layer_norm(h, p[prefix + ".ln2.g"], p[prefix + ".ln2.b"], c.ln_eps);
  Var ff = linear(leaky_relu(linear(hn2, p[prefix + ".ffn0.w"], p[prefix + ".ffn0.b"]), c.leaky_slope),
                  p[prefix + ".ffn1.w"], p[prefix + ".ffn1.b"]);
  h = add(h, ff);
  return add(node_latents, linear(h, p[prefix + ".out.w"], p[prefix + ".out.b"]));
}

ForwardResult forward(Tape& tape, const BoundParams& params, const ModelConfig& config,
                      const GraphSample& sample, const ForwardOptions& options) {
  ForwardResult result;
  LatentGraph g = encode(tape, params, config, sample);
  for (Index k = 0; k < config.mpnn_pre; ++k) {
    g = mpnn_iteration(g, params, mpnn_name(true, k), config, sample);
  }
  if (config.n_blocks > 0) {
    if (sample.positional_encoding.rows() != sample.node_count() ||
        sample.positional_encoding.cols() != config.dims.encoding) {
      throw ConfigError("forward: positional encoding " + shape_string(sample.positional_encoding) +
                        " does not match config width " + std::to_string(config.dims.encoding));
    }
    Var encoding = tape.constant(sample.positional_encoding);
    for (Index b = 0; b < config.n_blocks; ++b) {
      Tensor weights;
      g.nodes = transformer_block(g.nodes, encoding, params, block_name(b), config, options,
                                  options.keep_slice_weights ? &weights : nullptr);
      if (options.keep_slice_weights) result.slice_weights.push_back(std::move(weights));
    }
  }
  for (Index k = 0; k < config.mpnn_refine; ++k) {
    g = mpnn_iteration(g, params, mpnn_name(false, k), config, sample);
  }
  Var h = leaky_relu(linear(g.nodes, params["dec.l0.w"], params["dec.l0.b"]), config.leaky_slope);
  result.prediction = linear(h, params["dec.l1.w"], params["dec.l1.b"]);
  return result;
}

Tensor predict(const ParamMap& params, const ModelConfig& config, const GraphSample& sample,
               std::vector<Tensor>* slice_weights) {
  Tape tape;
  BoundParams bound(tape, params, false);
  ForwardOptions opts;
  opts.keep_slice_weights = slice_weights != nullptr;
  ForwardResult r = forward(tape, bound, config, sample, opts);
  if (slice_weights) *slice_weights = std::move(r.slice_weights);
  return r.prediction.value();
}

}  // namespace mgnt
