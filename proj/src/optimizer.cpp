#include "dcco/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "dcco/errors.hpp"

namespace dcco {

const char* optimizer_name(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kAdam: return "adam";
    case OptimizerKind::kLars: return "lars";
  }
  return "?";
}

OptimizerKind optimizer_from_name(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "lars") return OptimizerKind::kLars;
  throw InvalidConfig("unknown optimizer '" + name + "'");
}

bool decay_exempt(const std::string& name) {
  for (const char* suffix : {".bias", ".gamma", ".beta"}) {
    const std::string s(suffix);
    if (name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0)
      return true;
  }
  return false;
}

namespace {

Tensor& moment(std::map<std::string, Tensor>& buf, const std::string& name, const Tensor& like) {
  auto it = buf.find(name);
  if (it == buf.end()) it = buf.emplace(name, Tensor::zeros(like.shape())).first;
  if (!it->second.same_shape(like))
    throw ShapeMismatch("optimizer: moment shape for '" + name + "' does not match parameter");
  return it->second;
}

}  // namespace

void apply(OptimizerState& state, ModelParams& params, const NamedGrads& grads, double lr) {
  if (lr < 0.0) throw InvalidConfig("optimizer: lr must be >= 0");
  const std::uint64_t t = state.step + 1;
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end())
      throw ShapeMismatch("optimizer: missing gradient for '" + name + "'");
    const Tensor& g = git->second;
    if (!g.same_shape(p))
      throw ShapeMismatch("optimizer: gradient shape for '" + name + "' does not match parameter");

    const bool exempt = decay_exempt(name);
    const double wd = exempt ? 0.0 : state.weight_decay;

    switch (state.kind) {
      case OptimizerKind::kSgd: {
        p.mat() -= lr * (g.mat() + wd * p.mat());
        break;
      }
      case OptimizerKind::kAdam: {
        Matrix geff = g.mat() + wd * p.mat();
        Tensor& m = moment(state.m, name, p);
        Tensor& v = moment(state.v, name, p);
        m.mat() = state.beta1 * m.mat() + (1.0 - state.beta1) * geff;
        v.mat() = state.beta2 * v.mat() +
                  (1.0 - state.beta2) * geff.cwiseProduct(geff);
        const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));
        Matrix mhat = m.mat() / c1;
        Matrix vhat = v.mat() / c2;
        p.mat() -= lr * mhat.cwiseQuotient(
                       (vhat.array().sqrt() + state.eps).matrix());
        break;
      }
      case OptimizerKind::kLars: {
        Matrix geff = g.mat() + wd * p.mat();
        double trust = 1.0;
        if (!exempt) {
          const double pn = p.mat().norm();
          const double gn = geff.norm();
          // Degenerate norms fall back to an unscaled step.
          trust = (pn > 0.0 && gn > 0.0) ? state.trust_coeff * pn / gn : 1.0;
        }
        Tensor& buf = moment(state.m, name, p);
        buf.mat() = state.momentum * buf.mat() + lr * trust * geff;
        p.mat() -= buf.mat();
        break;
      }
    }
  }
  state.step = t;
}

double cosine_lr(double base, std::uint64_t step, std::uint64_t total_steps) {
  if (total_steps < 1) throw StepOutOfRange("cosine_lr: total_steps must be >= 1");
  if (step > total_steps)
    throw StepOutOfRange("cosine_lr: step " + std::to_string(step) + " beyond " +
                         std::to_string(total_steps));
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace dcco
