#include "bitfold/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace bitfold {

GradCheckReport grad_check(const ScalarFn& fn, ParameterSet params, const GradCheckOptions& opts) {
  Gradients analytic;
  {
    Graph g(true);
    Var loss = fn(g, params);
    analytic = g.backward(loss, params);
  }
  auto eval = [&](const ParameterSet& ps) {
    Graph g(false);
    return fn(g, ps).value().item();
  };

  GradCheckReport report;
  std::mt19937_64 gen(opts.seed);
  for (const std::string& name : params.names()) {
    const std::size_t n = params.get(name).size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (n > opts.max_elements_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), gen);
      idx.resize(opts.max_elements_per_tensor);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      Tensor& p = params.get(name);
      const double saved = p[i];
      p[i] = saved + opts.step;
      const double up = eval(params);
      p[i] = saved - opts.step;
      const double down = eval(params);
      p[i] = saved;
      const double numeric = (up - down) / (2 * opts.step);
      const double a = analytic.at(name)[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

} // namespace bitfold
