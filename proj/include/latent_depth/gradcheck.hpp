#pragma once

#include <functional>

#include "latent_depth/tensor.hpp"

namespace latent_depth {

struct FiniteDiffOptions {
  Real eps = 1e-5;
  // Denominator floor: error_i = |analytic - numeric| / max(|analytic|, |numeric|, floor).
  Real abs_floor = 1e-4;
};

struct FiniteDiffResult {
  Real max_rel_error = 0.0;
  std::size_t worst_index = 0;
  Real worst_analytic = 0.0;
  Real worst_numeric = 0.0;
};

using ScalarFunction = std::function<Tensor(const Tensor&)>;

// Compares d f / d x from backward() with central differences, element by
// element. `f` must be deterministic and return a single-element tensor.
FiniteDiffResult finite_diff_check(const ScalarFunction& f, const Tensor& x,
                                   const FiniteDiffOptions& options = {});

}  // namespace latent_depth
