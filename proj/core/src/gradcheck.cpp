#include "seld/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace seld {

GradCheckReport finite_diff_report(const GraphBuilder& f, const std::vector<Tensor>& point, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw std::invalid_argument("finite_diff_check: eps must lie in (0, 1e-2]");
  Graph g;
  std::vector<Var> leaves;
  for (const auto& t : point) leaves.push_back(g.variable(t, true));
  Var out = f(g, leaves);
  if (out.numel() != 1) {
    throw std::invalid_argument("finite_diff_check: function must be scalar-valued, got shape " +
                                shape_str(out.shape()));
  }
  g.forward_eval();
  g.backward(out);
  std::vector<Tensor> analytic;
  for (auto& v : leaves) analytic.push_back(g.grad(v));

  GradCheckReport rep;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    Tensor probe = point[l];
    for (std::size_t i = 0; i < probe.size(); ++i) {
      const double x0 = probe[i];
      probe[i] = x0 + eps;
      g.set_value(leaves[l], probe);
      g.forward_eval();
      const double fp = g.value(out)[0];
      probe[i] = x0 - eps;
      g.set_value(leaves[l], probe);
      g.forward_eval();
      const double fm = g.value(out)[0];
      probe[i] = x0;
      const double num = (fp - fm) / (2.0 * eps);
      const double ana = analytic[l][i];
      const double err = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-8});
      if (err > rep.max_rel_err) rep = GradCheckReport{err, l, i, ana, num};
    }
    g.set_value(leaves[l], point[l]);
  }
  return rep;
}

}  // namespace seld
