#include "dcco/encoder.hpp"

#include <cmath>

#include "dcco/errors.hpp"
#include "dcco/rng.hpp"

namespace dcco {

namespace {

struct LayerSpec {
  std::string name;
  Index in = 0;
  Index out = 0;
  bool normed = false;  // group norm + relu after the affine map
};

// The trunk is every hidden layer plus an optional final map to embed_dim;
// the projection head follows, with its last layer left as a plain affine.
std::vector<LayerSpec> layer_plan(const EncoderConfig& cfg) {
  std::vector<LayerSpec> plan;
  Index cur = cfg.input_dim;
  int idx = 0;
  for (Index h : cfg.hidden_dims) {
    plan.push_back({"enc" + std::to_string(idx++), cur, h, true});
    cur = h;
  }
  if (cfg.embed_dim > 0) {
    plan.push_back({"enc" + std::to_string(idx++), cur, cfg.embed_dim, true});
    cur = cfg.embed_dim;
  }
  for (std::size_t i = 0; i < cfg.projection_dims.size(); ++i) {
    const bool last = i + 1 == cfg.projection_dims.size();
    plan.push_back({"proj" + std::to_string(i), cur, cfg.projection_dims[i], !last});
    cur = cfg.projection_dims[i];
  }
  return plan;
}

Value affine(const EncoderConfig& cfg, const BoundParams& params, const LayerSpec& layer,
             Value x) {
  auto pick = [&](const std::string& suffix) -> Value {
    auto it = params.find(layer.name + suffix);
    if (it == params.end())
      throw InvalidConfig("encode: missing parameter '" + layer.name + suffix + "'");
    return it->second;
  };
  Value w = pick(".weight");
  if (cfg.weight_standardization && layer.normed) w = standardize_weights(w, cfg.ws_eps);
  const Index n = x.graph->shape(x.id)[0];
  Value y = matmul(x, transpose(w)) + broadcast_to(pick(".bias"), n, layer.out);
  if (!layer.normed) return y;
  return relu(group_norm(y, cfg.groups, pick(".gamma"), pick(".beta"), cfg.gn_eps));
}

}  // namespace

void EncoderConfig::validate() const {
  if (input_dim <= 0) throw InvalidConfig("encoder: input_dim must be positive");
  if (groups <= 0) throw InvalidConfig("encoder: groups must be positive");
  if (embed_dim < 0) throw InvalidConfig("encoder: embed_dim must be non-negative");
  if (projection_dims.empty()) throw InvalidConfig("encoder: projection_dims must be non-empty");
  for (Index h : hidden_dims)
    if (h <= 0) throw InvalidConfig("encoder: hidden width must be positive");
  for (Index p : projection_dims)
    if (p <= 0) throw InvalidConfig("encoder: projection width must be positive");
  auto check_div = [&](Index w, const char* what) {
    if (w % groups != 0)
      throw IndivisibleWidth(std::string("encoder: ") + what + " width " + std::to_string(w) +
                             " not divisible by " + std::to_string(groups) + " groups");
  };
  for (Index h : hidden_dims) check_div(h, "hidden");
  if (embed_dim > 0) check_div(embed_dim, "embedding");
  for (std::size_t i = 0; i + 1 < projection_dims.size(); ++i)
    check_div(projection_dims[i], "projection");
}

Index EncoderConfig::embedding_dim() const {
  if (embed_dim > 0) return embed_dim;
  if (!hidden_dims.empty()) return hidden_dims.back();
  return input_dim;
}

ModelParams init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams params;
  Rng rng(Rng::derive({seed, 0x1417}));
  for (const LayerSpec& layer : layer_plan(cfg)) {
    const double bound = std::sqrt(6.0 / static_cast<double>(layer.in));
    Tensor w = Tensor::zeros({layer.out, layer.in});
    for (double& v : w.values_mut()) v = rng.uniform(-bound, bound);
    params[layer.name + ".weight"] = std::move(w);
    params[layer.name + ".bias"] = Tensor::zeros({1, layer.out});
    if (layer.normed) {
      params[layer.name + ".gamma"] = Tensor::ones({1, layer.out});
      params[layer.name + ".beta"] = Tensor::zeros({1, layer.out});
    }
  }
  return params;
}

BoundParams bind_params(Graph& g, const ModelParams& params) {
  BoundParams bound;
  for (const auto& [name, tensor] : params) bound.emplace(name, g.param(name, tensor));
  return bound;
}

Encoded encode(const EncoderConfig& cfg, const BoundParams& params, Value batch) {
  cfg.validate();
  Graph& g = *batch.graph;
  const auto& bs = g.shape(batch.id);
  if (bs.size() != 2 || bs[1] != cfg.input_dim)
    throw ShapeMismatch("encode: batch must be N x " + std::to_string(cfg.input_dim));

  Value x = batch;
  Value embedding = batch;  // zero-depth trunk: the input is the embedding
  const std::size_t trunk_layers =
      cfg.hidden_dims.size() + (cfg.embed_dim > 0 ? 1 : 0);
  std::size_t i = 0;
  for (const LayerSpec& layer : layer_plan(cfg)) {
    x = affine(cfg, params, layer, x);
    if (++i == trunk_layers) embedding = x;
  }
  return Encoded{embedding, x};
}

Tensor encode_once(const EncoderConfig& cfg, const ModelParams& params, const Tensor& batch) {
  Graph g;
  BoundParams bound = bind_params(g, params);
  Encoded enc = encode(cfg, bound, g.input("batch", batch));
  return g.value(enc.projection);
}

Tensor embed_once(const EncoderConfig& cfg, const ModelParams& params, const Tensor& batch) {
  Graph g;
  BoundParams bound = bind_params(g, params);
  Encoded enc = encode(cfg, bound, g.input("batch", batch));
  return g.value(enc.embedding);
}

Value group_norm(Value x, Index groups, Value scale, Value shift, double eps) {
  Graph& g = *x.graph;
  const auto& xs = g.shape(x.id);
  if (xs.size() != 2) throw ShapeMismatch("group_norm: input must be rank 2");
  const Index n = xs[0], w = xs[1];
  if (groups <= 0 || w % groups != 0)
    throw IndivisibleWidth("group_norm: width " + std::to_string(w) + " not divisible by " +
                           std::to_string(groups) + " groups");
  const Index gsize = w / groups;

  // Group means as a product with a constant averaging matrix keeps the whole
  // operation inside the op set and strictly per-sample.
  Tensor avg = Tensor::zeros({w, groups});
  Tensor sel = Tensor::zeros({groups, w});
  for (Index i = 0; i < w; ++i) {
    const Index gi = i / gsize;
    avg.mat()(i, gi) = 1.0 / static_cast<double>(gsize);
    sel.mat()(gi, i) = 1.0;
  }
  Value a = g.constant(std::move(avg));
  Value b = g.constant(std::move(sel));

  Value mean = matmul(matmul(x, a), b);                         // N x w, group mean
  Value centered = x - mean;
  Value var = matmul(matmul(square(centered), a), b);           // N x w, group variance
  Value normed = centered / sqrt(var + eps);
  return normed * broadcast_to(scale, n, w) + broadcast_to(shift, n, w);
}

Tensor group_norm(const Tensor& x, Index groups, const Tensor& scale, const Tensor& shift,
                  double eps) {
  Graph g;
  Value out = group_norm(g.input("x", x), groups, g.constant(scale), g.constant(shift), eps);
  return g.value(out);
}

Value standardize_weights(Value w, double eps) {
  Graph& g = *w.graph;
  const auto& ws = g.shape(w.id);
  if (ws.size() != 2) throw ShapeMismatch("standardize_weights: weight must be rank 2");
  const Index out = ws[0], in = ws[1];
  Value mean = broadcast_to(mean_axis(w, 1), out, in);
  Value centered = w - mean;
  Value var = broadcast_to(mean_axis(square(centered), 1), out, in);
  return centered / sqrt(var + eps);
}

Tensor standardize_weights(const Tensor& w, double eps) {
  Graph g;
  Value out = standardize_weights(g.input("w", w), eps);
  return g.value(out);
}

}  // namespace dcco
