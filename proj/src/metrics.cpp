#include "latent_depth/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "latent_depth/errors.hpp"

namespace latent_depth {

nlohmann::json EvalResult::to_json() const {
  return {{"rmse", rmse}, {"n_valid_pixels", n_valid_pixels}, {"n_images", n_images}};
}

std::string EvalResult::summary() const {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "rmse %.6f over %zu valid pixels in %zu images", rmse,
                n_valid_pixels, n_images);
  return buf;
}

EvalResult rmse(std::span<const EvalPair> pairs) {
  Real sum = 0.0;
  EvalResult result;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const EvalPair& p = pairs[i];
    if (p.prediction.shape() != p.truth.shape() || p.mask.shape() != p.truth.shape()) {
      throw ShapeError("rmse: pair " + std::to_string(i) + " has mismatched shapes " +
                       shape_string(p.prediction.shape()) + ", " + shape_string(p.truth.shape()) +
                       ", " + shape_string(p.mask.shape()));
    }
    const auto y = p.prediction.data();
    const auto t = p.truth.data();
    const auto m = p.mask.data();
    for (std::size_t k = 0; k < y.size(); ++k) {
      if (m[k] == 0.0) continue;
      const Real d = y[k] - t[k];
      sum += d * d;
      ++result.n_valid_pixels;
    }
  }
  if (result.n_valid_pixels == 0) throw ArgumentError("rmse: no valid pixels");
  result.n_images = pairs.size();
  result.rmse = std::sqrt(sum / static_cast<Real>(result.n_valid_pixels));
  if (!std::isfinite(result.rmse)) throw NonFiniteError("rmse: non-finite result");
  return result;
}

Real relative_improvement(Real baseline_rmse, Real ours_rmse) {
  if (!(baseline_rmse > 0.0)) {
    throw ArgumentError("relative_improvement: baseline must be positive");
  }
  return 100.0 * (baseline_rmse - ours_rmse) / baseline_rmse;
}

}  // namespace latent_depth
