#include "latent_depth/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace latent_depth {

FiniteDiffResult finite_diff_check(const ScalarFunction& f, const Tensor& x,
                                   const FiniteDiffOptions& options) {
  if (!x.defined()) throw ArgumentError("finite_diff_check: undefined input");
  if (!(options.eps > 0.0)) throw ArgumentError("finite_diff_check: eps must be positive");

  Tensor probe = x.detach();
  probe.set_requires_grad(true);
  Tensor out = f(probe);
  if (out.numel() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
  std::vector<Real> analytic;
  if (out.requires_grad()) {
    out.backward();
    analytic = probe.grad();
  } else {
    analytic.assign(x.numel(), 0.0);  // f does not depend on x at all
  }

  FiniteDiffResult result;
  Tensor shifted = x.detach();
  auto values = shifted.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Real original = values[i];
    values[i] = original + options.eps;
    const Real plus = f(shifted).item();
    values[i] = original - options.eps;
    const Real minus = f(shifted).item();
    values[i] = original;
    const Real numeric = (plus - minus) / (2.0 * options.eps);
    const Real denom =
        std::max({std::abs(analytic[i]), std::abs(numeric), options.abs_floor});
    Real err = std::abs(analytic[i] - numeric) / denom;
    if (std::isnan(err)) err = std::numeric_limits<Real>::infinity();
    if (i == 0 || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
      result.worst_analytic = analytic[i];
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace latent_depth
