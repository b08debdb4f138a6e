#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "cade/autodiff.hpp"

namespace cade {

struct OptimizerConfig {
  enum class Kind { sgd, adam };
  Kind kind = Kind::sgd;
  double lr = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter moment buffers. For sgd only `first` (the velocity) is used.
struct OptimizerState {
  std::map<std::string, Tensor> first;
  std::map<std::string, Tensor> second;
  std::size_t steps = 0;
};

/// One update from the gradients held in `params`. Every parameter must
/// have a gradient; sgd: v = momentum*v + g, p -= lr*v; adam: bias-corrected
/// moments.
void optimizer_step(ag::ParameterStore& params, const OptimizerConfig& config,
                    OptimizerState& state);

}  // namespace cade
