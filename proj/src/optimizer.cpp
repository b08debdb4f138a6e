#include "cade/optimizer.hpp"

#include <cmath>

namespace cade {

void optimizer_step(ag::ParameterStore& params, const OptimizerConfig& config,
                    OptimizerState& state) {
  if (!(config.lr > 0)) throw Error("optimizer: learning rate must be positive");
  for (const auto& name : params.names())
    if (!params.has_grad(name)) throw Error("optimizer: missing gradient for parameter '" + name + "'");

  ++state.steps;
  const double t = static_cast<double>(state.steps);
  for (const auto& name : params.names()) {
    Tensor& p = params.mutable_value(name);
    const Tensor& g = params.grad(name);
    auto [it, fresh] = state.first.try_emplace(name, Tensor(p.shape()));
    Tensor& m = it->second;
    if (config.kind == OptimizerConfig::Kind::sgd) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = config.momentum * m[i] + g[i];
        p[i] -= config.lr * m[i];
      }
      continue;
    }
    Tensor& v = state.second.try_emplace(name, Tensor(p.shape())).first->second;
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      p[i] -= config.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
    }
  }
}

}  // namespace cade
