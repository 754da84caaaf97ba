#include "raseg/ndiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace raseg::nd {

namespace {

std::vector<std::size_t> pick_indices(std::size_t n, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (limit == 0 || limit >= n) return idx;
  rng.shuffle(idx);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradCheckReport grad_check(const GraphBuilder& build, std::vector<Tensor5<double>>& inputs,
                           ParamStore<double>* params, const GradCheckOptions& opts) {
  const std::uint64_t graph_seed = derive_seed(opts.seed, 1);
  Tensor5<double> probe;

  auto evaluate = [&]() -> double {
    Graph<double> g(opts.training, graph_seed);
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(g.input(x, false));
    const Tensor5<double>& y = g.value(build(g, vars));
    if (y.size() == 1) return y[0];
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * probe[i];
    return acc;
  };

  // Analytic pass.
  Graph<double> g(opts.training, graph_seed);
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(g.input(x, true));
  const Var out = build(g, vars);
  const Shape5 out_shape = g.shape(out);
  if (out_shape.numel() == 1) {
    probe = Tensor5<double>(out_shape, 1.0);
  } else {
    probe = Tensor5<double>(out_shape);
    Rng prng(derive_seed(opts.seed, 2));
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = prng.normal();
  }
  g.backward(out, probe);

  GradCheckReport report;
  report.worst.rel_error = -1.0;
  Rng pick(derive_seed(opts.seed, 3));

  auto check_tensor = [&](const std::string& name, Tensor5<double>& target, const Tensor5<double>* analytic) {
    double worst = 0.0;
    for (std::size_t k : pick_indices(target.size(), opts.max_elements_per_tensor, pick)) {
      const double saved = target[k];
      target[k] = saved + opts.step;
      const double fp = evaluate();
      target[k] = saved - opts.step;
      const double fm = evaluate();
      target[k] = saved;
      const double numeric = (fp - fm) / (2.0 * opts.step);
      const double a = analytic ? (*analytic)[k] : 0.0;
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.denominator_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.elements_checked;
      worst = std::max(worst, rel);
      if (rel > report.worst.rel_error) report.worst = {name, k, a, numeric, rel};
    }
    report.per_tensor.emplace_back(name, worst);
    report.max_rel_error = std::max(report.max_rel_error, worst);
  };

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    // A node that received no gradient is exactly zero-gradient.
    const Tensor5<double>* a = nullptr;
    Tensor5<double> copy;
    try {
      copy = g.grad(vars[i]);
      a = &copy;
    } catch (const StateError&) {
    }
    check_tensor("input" + std::to_string(i), inputs[i], a);
  }
  if (params) {
    for (auto& [name, p] : *params) {
      const Tensor5<double>* a = g.param_grad(name);
      Tensor5<double> copy;
      if (a) {
        copy = *a;
        a = &copy;
      }
      check_tensor(name, p.value, a);
    }
  }
  if (report.worst.rel_error < 0.0) report.worst.rel_error = 0.0;
  return report;
}

}  // namespace raseg::nd
