#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dcco/graph.hpp"
#include "dcco/tensor.hpp"

namespace dcco {

// Dual-encoder architecture: a shared-weight MLP trunk producing the
// embedding used for downstream evaluation, followed by a fully-connected
// projection head whose last layer is a plain affine map (no normalization).
// Every other layer is (optionally weight-standardized) linear + group norm
// + relu.
struct EncoderConfig {
  Index input_dim = 64;
  std::vector<Index> hidden_dims{128, 128};
  // Width of the evaluation embedding; 0 drops the trunk's final layer so the
  // embedding is the last hidden activation (or the raw input if hidden_dims
  // is empty too).
  Index embed_dim = 64;
  std::vector<Index> projection_dims{128, 128, 128};
  Index groups = 8;
  bool weight_standardization = true;
  double gn_eps = 1e-5;
  double ws_eps = 1e-10;

  void validate() const;

  // Width of the embedding fed to probes.
  Index embedding_dim() const;
  // Width of the projection output, the correlation-loss dimensionality d.
  Index loss_dim() const { return projection_dims.empty() ? 0 : projection_dims.back(); }
};

// Layer-name → tensor, sorted by name so every client iterates parameters in
// the same order during aggregation.
using ModelParams = std::map<std::string, Tensor>;

// Reproducible initialization: weights fan-in-scaled uniform
// U(-sqrt(6/fan_in), +sqrt(6/fan_in)), biases zero, norm scale one, shift zero.
ModelParams init_params(const EncoderConfig& cfg, std::uint64_t seed);

// Parameter leaves bound into a graph, keyed by the same names.
using BoundParams = std::map<std::string, Value>;
BoundParams bind_params(Graph& g, const ModelParams& params);

struct Encoded {
  Value embedding;   // N x embedding_dim, input to evaluation probes
  Value projection;  // N x loss_dim, input to the correlation loss
};

// Builds the differentiable forward pass for one batch. Parameters must have
// been bound into the same graph; two views share weights by calling encode
// twice with the same BoundParams.
Encoded encode(const EncoderConfig& cfg, const BoundParams& params, Value batch);

// Convenience: one-shot forward through a scratch graph.
Tensor encode_once(const EncoderConfig& cfg, const ModelParams& params, const Tensor& batch);
Tensor embed_once(const EncoderConfig& cfg, const ModelParams& params, const Tensor& batch);

// Per-sample group normalization: within each of `groups` equal slices of the
// feature axis, subtract the sample's group mean and divide by the group
// standard deviation (eps-stabilized), then apply scale and shift. No
// cross-sample coupling, so batch composition cannot leak between clients.
Value group_norm(Value x, Index groups, Value scale, Value shift, double eps = 1e-5);
Tensor group_norm(const Tensor& x, Index groups, const Tensor& scale, const Tensor& shift,
                  double eps = 1e-5);

// Weight standardization: each output unit's incoming weights are shifted to
// mean zero and scaled to unit variance (eps-stabilized).
Value standardize_weights(Value w, double eps = 1e-10);
Tensor standardize_weights(const Tensor& w, double eps = 1e-10);

}  // namespace dcco
