#pragma once

#include <functional>
#include <vector>

#include "seld/autodiff.hpp"

namespace seld {

/// Builds a scalar-valued graph from differentiable leaves.
using GraphBuilder = std::function<Var(Graph&, const std::vector<Var>& leaves)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients with central differences at `point`.
/// Relative error per coordinate is |a - c| / max(|a|, |c|, 1e-8).
GradCheckReport finite_diff_report(const GraphBuilder& f, const std::vector<Tensor>& point, double eps = 1e-5);

inline double finite_diff_check(const GraphBuilder& f, const std::vector<Tensor>& point, double eps = 1e-5) {
  return finite_diff_report(f, point, eps).max_rel_err;
}

}  // namespace seld
