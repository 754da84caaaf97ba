#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "raseg/ndiff/graph.hpp"

namespace raseg::nd {

struct GradCheckOptions {
  double step = 1e-4;
  /// Lower bound of the relative-error denominator, so that entries whose
  /// true gradient is ~0 are judged on absolute error.
  double denominator_floor = 1e-6;
  /// 0 checks every element; otherwise a seeded sample of this many elements
  /// per tensor.
  std::size_t max_elements_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Graph mode for every evaluation; dropout masks repeat because each
  /// evaluation uses a fresh graph with the same seed.
  bool training = false;
};

struct GradCheckEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  GradCheckEntry worst;
  std::size_t elements_checked = 0;
  /// Worst relative error per checked tensor ("input0", ..., parameter names).
  std::vector<std::pair<std::string, double>> per_tensor;
};

/// Builds the graph from the registered inputs and returns its output. The
/// builder registers parameters itself with Graph::param so their gradients
/// can be found by name.
using GraphBuilder = std::function<Var(Graph<double>&, std::span<const Var> inputs)>;

/// Compares reverse-mode gradients with central differences. The objective
/// is the output itself when scalar, otherwise its contraction with a fixed
/// random tensor. Inputs and parameters are perturbed in place and restored.
GradCheckReport grad_check(const GraphBuilder& build, std::vector<Tensor5<double>>& inputs,
                           ParamStore<double>* params, const GradCheckOptions& opts = {});

}  // namespace raseg::nd
