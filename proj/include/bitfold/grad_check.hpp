#ifndef BITFOLD_GRAD_CHECK_HPP_
#define BITFOLD_GRAD_CHECK_HPP_

#include <cstdint>
#include <functional>
#include <string>

#include "bitfold/graph.hpp"

namespace bitfold {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed(double tol = 1e-4) const { return max_rel_error < tol; }
};

struct GradCheckOptions {
  double step = 1e-5;
  std::uint64_t seed = 0;
  /// Elements per tensor beyond which a seeded subsample is checked.
  std::size_t max_elements_per_tensor = 24;
  /// Gradients below this magnitude are compared on an absolute scale.
  double abs_floor = 1e-6;
};

using ScalarFn = std::function<Var(Graph&, const ParameterSet&)>;

/// Compares reverse-mode gradients of `fn` against central differences,
/// element by element, over every tensor of `params`. `fn` must be
/// deterministic; it is re-evaluated with gradients disabled for each probe.
GradCheckReport grad_check(const ScalarFn& fn, ParameterSet params, const GradCheckOptions& opts = {});

} // namespace bitfold

#endif
