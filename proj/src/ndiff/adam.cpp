#include "raseg/ndiff/adam.hpp"

#include <cmath>

namespace raseg::nd {

void AdamConfig::validate() const {
  if (!(lr >= 0.0)) throw ValidationError("adam: lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ValidationError("adam: beta1 must be in [0,1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("adam: beta2 must be in [0,1)");
  if (!(eps > 0.0)) throw ValidationError("adam: eps must be > 0");
}

template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state) {
  state.config.validate();
  for (const auto& [name, p] : params) {
    if (p.grad.empty()) continue;
    if (p.grad.shape() != p.value.shape()) {
      throw DimensionError("adam: gradient of '" + name + "' has shape " + p.grad.shape().str() + ", parameter " +
                           p.value.shape().str());
    }
    if (!p.grad.all_finite()) throw NumericalError("adam: non-finite gradient for parameter '" + name + "'");
  }
  const AdamConfig& c = state.config;
  const std::int64_t t = ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (auto& [name, p] : params) {
    if (p.grad.empty()) continue;
    auto mi = state.m.try_emplace(name, p.value.shape()).first;
    auto vi = state.v.try_emplace(name, p.value.shape()).first;
    Tensor5<T>& m = mi->second;
    Tensor5<T>& v = vi->second;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double gk = p.grad[k];
      const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
      const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      p.value[k] = static_cast<T>(p.value[k] - c.lr * (mk / bc1) / (std::sqrt(vk / bc2) + c.eps));
    }
  }
}

template void adam_step<float>(ParamStore<float>&, AdamState<float>&);
template void adam_step<double>(ParamStore<double>&, AdamState<double>&);

}  // namespace raseg::nd
