#pragma once

#include <cstdint>

#include "raseg/ndiff/graph.hpp"

namespace raseg::nd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

/// Moments are keyed by parameter name and created lazily on the first step.
template <typename T>
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::map<std::string, Tensor5<T>> m;
  std::map<std::string, Tensor5<T>> v;
};

/// One bias-corrected Adam update over every parameter in `params` using the
/// gradients stored alongside them. Throws NumericalError naming the first
/// parameter whose gradient is not finite; no parameter is modified then.
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state);

}  // namespace raseg::nd
