#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "dcco/encoder.hpp"
#include "dcco/tensor.hpp"

namespace dcco {

enum class OptimizerKind : std::uint8_t { kSgd, kAdam, kLars };

const char* optimizer_name(OptimizerKind kind);
OptimizerKind optimizer_from_name(const std::string& name);

// Name-keyed gradients aligned with ModelParams.
using NamedGrads = std::map<std::string, Tensor>;

// Deterministic optimizer state machine. Moment tensors are created lazily on
// first use and always match parameter shapes; `step` increments by exactly
// one per apply().
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kSgd;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double trust_coeff = 1e-3;  // LARS layer-wise scaling
  double momentum = 0.9;      // LARS momentum
  std::uint64_t step = 0;
  std::map<std::string, Tensor> m;  // Adam first moment / LARS momentum buffer
  std::map<std::string, Tensor> v;  // Adam second moment
};

// Bias and normalization parameters (names ending .bias/.gamma/.beta) are
// exempt from weight decay and from LARS trust adaptation.
bool decay_exempt(const std::string& name);

// One optimizer step over every (param, grad) pair, in place.
//   SGD:  p <- p - lr (g + wd p)
//   Adam: bias-corrected first/second moments, eps outside the square root
//   LARS: momentum buffer of trust-scaled gradients, trust = tc |p| / |g + wd p|
void apply(OptimizerState& state, ModelParams& params, const NamedGrads& grads, double lr);

// base * 0.5 * (1 + cos(pi * step / total_steps))
double cosine_lr(double base, std::uint64_t step, std::uint64_t total_steps);

}  // namespace dcco
