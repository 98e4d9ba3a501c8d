#pragma once

#include <span>
#include <string>

#include <json.hpp>

#include "latent_depth/tensor.hpp"

namespace latent_depth {

struct EvalPair {
  Tensor prediction;
  Tensor truth;
  Tensor mask;  // 1 = valid, 0 = excluded
};

struct EvalResult {
  Real rmse = 0.0;
  std::size_t n_valid_pixels = 0;
  std::size_t n_images = 0;

  nlohmann::json to_json() const;
  std::string summary() const;
};

// Root mean squared error pooled over every valid pixel of every pair.
// Squared errors are accumulated image by image in row-major order.
EvalResult rmse(std::span<const EvalPair> pairs);

// 100 * (baseline - ours) / baseline.
Real relative_improvement(Real baseline_rmse, Real ours_rmse);

}  // namespace latent_depth
