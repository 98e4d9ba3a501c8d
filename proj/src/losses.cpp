#include "latent_depth/losses.hpp"

#include <cmath>
#include <cstdio>

#include "latent_depth/errors.hpp"
#include "latent_depth/ops.hpp"

namespace latent_depth {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.defined() || !b.defined()) throw ArgumentError(std::string(what) + ": undefined input");
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

// Batch size and spatial location count of a C x H x W or N x C x H x W map.
std::pair<std::size_t, std::size_t> batch_and_locations(const Tensor& t, const char* what) {
  if (t.rank() == 3) return {1, t.dim(1) * t.dim(2)};
  if (t.rank() == 4) return {t.dim(0), t.dim(2) * t.dim(3)};
  throw ShapeError(std::string(what) + ": expected rank 3 or 4, got " + shape_string(t.shape()));
}

// Sum over channels and locations of |dh(a) - dh(b)| + |dv(a) - dv(b)|.
Tensor gradient_l1(const Tensor& a, const Tensor& b, bool allow_single) {
  auto [ha, va] = spatial_gradients(a, allow_single);
  auto [hb, vb] = spatial_gradients(b, allow_single);
  return add(reduce(sub(ha, hb), Reduction::kL1), reduce(sub(va, vb), Reduction::kL1));
}

void require_matching_features(const FeatureList& fy, const FeatureList& fy_star,
                               const char* what) {
  if (fy.empty()) throw ArgumentError(std::string(what) + ": empty layer set");
  if (fy.size() != fy_star.size()) {
    throw ShapeError(std::string(what) + ": " + std::to_string(fy.size()) + " vs " +
                     std::to_string(fy_star.size()) + " feature layers");
  }
  for (std::size_t j = 0; j < fy.size(); ++j) require_same_shape(fy[j], fy_star[j], what);
}

}  // namespace

void LossWeights::validate() const {
  for (Real w : {data, latent, grad_image, grad_feature}) {
    if (!std::isfinite(w) || w < 0.0) {
      throw ArgumentError("LossWeights: weights must be finite and >= 0");
    }
  }
  if (data == 0.0 && latent == 0.0 && grad_image == 0.0 && grad_feature == 0.0) {
    throw ArgumentError("LossWeights: at least one weight must be positive");
  }
}

std::string LossReport::csv_header() { return "step,data,latent,grad_image,grad_feature,total"; }

std::string LossReport::csv_row(std::size_t step) const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g", step, data, latent,
                grad_image, grad_feature, total);
  return buf;
}

LossReport LossTerms::report() const {
  return {data.item(), latent.item(), grad_image.item(), grad_feature.item(), total.item()};
}

Tensor data_loss(const Tensor& y, const Tensor& y_star, const Tensor& mask) {
  require_same_shape(y, y_star, "data_loss");
  require_same_shape(y, mask, "data_loss");
  std::size_t valid = 0;
  for (Real m : mask.data()) {
    if (m != 0.0 && m != 1.0) throw ArgumentError("data_loss: mask values must be 0 or 1");
    valid += m == 1.0 ? 1 : 0;
  }
  if (valid == 0) throw ArgumentError("data_loss: mask has no valid pixels");
  const Tensor masked = mul(sub(y, y_star), mask.detach());
  return scale(reduce(masked, Reduction::kL1), 1.0 / static_cast<Real>(valid));
}

Tensor image_gradient_loss(const Tensor& y, const Tensor& y_star) {
  require_same_shape(y, y_star, "image_gradient_loss");
  const auto [batch, pixels] = batch_and_locations(y, "image_gradient_loss");
  return scale(gradient_l1(y, y_star, false), 1.0 / static_cast<Real>(batch * pixels));
}

Tensor latent_loss_from_features(const FeatureList& fy, const FeatureList& fy_star) {
  require_matching_features(fy, fy_star, "latent_loss");
  Tensor total;
  for (std::size_t j = 0; j < fy.size(); ++j) {
    const auto [batch, locations] = batch_and_locations(fy[j], "latent_loss");
    Tensor term = scale(reduce(sub(fy[j], fy_star[j]), Reduction::kL2Squared),
                        1.0 / (2.0 * static_cast<Real>(batch * locations)));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor feature_gradient_loss_from_features(const FeatureList& fy, const FeatureList& fy_star) {
  require_matching_features(fy, fy_star, "feature_gradient_loss");
  Tensor total;
  for (std::size_t j = 0; j < fy.size(); ++j) {
    const auto [batch, locations] = batch_and_locations(fy[j], "feature_gradient_loss");
    Tensor term = scale(gradient_l1(fy[j], fy_star[j], true),
                        1.0 / static_cast<Real>(batch * locations));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

FeatureExtractor guided_features(const DepthModel& guided, const LayerSet& layers) {
  return [&guided, layers](const Tensor& y) { return guided.extract_features(y, layers); };
}

Tensor latent_loss(const DepthModel& guided, const Tensor& y, const Tensor& y_star,
                   const LayerSet& layers) {
  require_same_shape(y, y_star, "latent_loss");
  return latent_loss_from_features(guided.extract_features(y, layers),
                                   guided.extract_features(y_star.detach(), layers));
}

Tensor feature_gradient_loss(const DepthModel& guided, const Tensor& y, const Tensor& y_star,
                             const LayerSet& layers) {
  require_same_shape(y, y_star, "feature_gradient_loss");
  return feature_gradient_loss_from_features(guided.extract_features(y, layers),
                                             guided.extract_features(y_star.detach(), layers));
}

LossTerms total_loss(const FeatureExtractor& extract, const Tensor& y, const Tensor& y_star,
                     const Tensor& mask, const LossWeights& weights) {
  weights.validate();
  require_same_shape(y, y_star, "total_loss");
  const bool need_features_grad = weights.latent > 0.0 || weights.grad_feature > 0.0;
  const Tensor target = y_star.detach();

  LossTerms terms;
  terms.data = data_loss(weights.data > 0.0 ? y : y.detach(), target, mask);
  terms.grad_image = image_gradient_loss(weights.grad_image > 0.0 ? y : y.detach(), target);
  const FeatureList fy = extract(need_features_grad ? y : y.detach());
  const FeatureList fy_star = extract(target);
  const FeatureList fy_const = [&] {
    FeatureList out;
    for (const Tensor& f : fy) out.push_back(f.detach());
    return out;
  }();
  terms.latent = latent_loss_from_features(weights.latent > 0.0 ? fy : fy_const, fy_star);
  terms.grad_feature =
      feature_gradient_loss_from_features(weights.grad_feature > 0.0 ? fy : fy_const, fy_star);

  // Left-to-right: data, latent, grad_image, grad_feature.
  terms.total = scale(terms.data, weights.data);
  terms.total = add(terms.total, scale(terms.latent, weights.latent));
  terms.total = add(terms.total, scale(terms.grad_image, weights.grad_image));
  terms.total = add(terms.total, scale(terms.grad_feature, weights.grad_feature));
  return terms;
}

LossTerms total_loss(const DepthModel& guided, const Tensor& y, const Tensor& y_star,
                     const Tensor& mask, const LossWeights& weights, const LayerSet& layers) {
  return total_loss(guided_features(guided, layers), y, y_star, mask, weights);
}

}  // namespace latent_depth
