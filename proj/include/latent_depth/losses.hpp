#pragma once

#include <functional>
#include <string>
#include <vector>

#include "latent_depth/network.hpp"
#include "latent_depth/tensor.hpp"

namespace latent_depth {

// Depth maps are 1 x H x W or N x 1 x H x W. Masks have the same shape and
// hold 1 for valid pixels and 0 otherwise. Batched losses are averaged over
// the batch.

struct LossWeights {
  Real data = 1.0;
  Real latent = 1.0;
  Real grad_image = 1.0;
  Real grad_feature = 1.0;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

struct LossReport {
  Real data = 0.0;
  Real latent = 0.0;
  Real grad_image = 0.0;
  Real grad_feature = 0.0;
  Real total = 0.0;

  static std::string csv_header();  // step,data,latent,grad_image,grad_feature,total
  std::string csv_row(std::size_t step) const;
};

// Differentiable loss terms and their weighted sum.
struct LossTerms {
  Tensor data;
  Tensor latent;
  Tensor grad_image;
  Tensor grad_feature;
  Tensor total;

  LossReport report() const;
};

using FeatureList = std::vector<Tensor>;
using FeatureExtractor = std::function<FeatureList(const Tensor&)>;

// Mean absolute error over valid pixels.
Tensor data_loss(const Tensor& y, const Tensor& y_star, const Tensor& mask);

// Mean over pixels of |dh(y) - dh(y*)| + |dv(y) - dv(y*)|.
Tensor image_gradient_loss(const Tensor& y, const Tensor& y_star);

// Sum over layers of (1 / locations) * sum over locations of
// ||f(y)_k - f(y*)_k||^2 / 2, the norm taken over the channel vector.
Tensor latent_loss_from_features(const FeatureList& fy, const FeatureList& fy_star);

// Sum over layers of (1 / locations) * L1 distance between the spatial
// gradients of the two feature maps, summed over channels.
Tensor feature_gradient_loss_from_features(const FeatureList& fy, const FeatureList& fy_star);

// Feature-space losses through a frozen guided model.
Tensor latent_loss(const DepthModel& guided, const Tensor& y, const Tensor& y_star,
                   const LayerSet& layers);
Tensor feature_gradient_loss(const DepthModel& guided, const Tensor& y, const Tensor& y_star,
                             const LayerSet& layers);

// Weighted sum of all four terms. Features are extracted once per input. A
// term with weight 0 is still reported but does not join the graph.
LossTerms total_loss(const FeatureExtractor& extract, const Tensor& y, const Tensor& y_star,
                     const Tensor& mask, const LossWeights& weights);
LossTerms total_loss(const DepthModel& guided, const Tensor& y, const Tensor& y_star,
                     const Tensor& mask, const LossWeights& weights, const LayerSet& layers);

// Feature extractor backed by a frozen guided model.
FeatureExtractor guided_features(const DepthModel& guided, const LayerSet& layers);

}  // namespace latent_depth
