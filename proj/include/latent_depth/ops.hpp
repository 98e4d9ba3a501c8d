#pragma once

#include <cstddef>
#include <span>
#include <utility>

#include "latent_depth/tensor.hpp"

namespace latent_depth {

// Convolution geometry. Padding is always "same": (k - 1) / 2 on each side,
// so the output spatial size is ceil(input / stride).
struct ConvSpec {
  std::size_t out_channels = 1;
  std::size_t in_channels = 1;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;

  std::size_t pad_h() const { return (kernel_h - 1) / 2; }
  std::size_t pad_w() const { return (kernel_w - 1) / 2; }
  Shape weight_shape() const { return {out_channels, in_channels, kernel_h, kernel_w}; }
  std::size_t output_size(std::size_t input) const { return (input + stride - 1) / stride; }

  // Throws ArgumentError for even kernels or strides outside {1, 2}.
  void validate() const;
};

// Images are C x H x W or batched N x C x H x W; outputs keep the input rank.
Tensor conv2d(const Tensor& input, const ConvSpec& spec, const Tensor& weights,
              const Tensor& bias);

enum class NormMode { kTrain, kEval };

struct BatchNormOptions {
  Real eps = 1e-5;
  Real momentum = 0.1;  // running = (1 - momentum) * running + momentum * batch
  NormMode mode = NormMode::kTrain;
  bool update_running_stats = true;
};

// Per-channel normalization over N*H*W. Train mode uses batch statistics and
// (optionally) folds them into running_mean / running_var, which use the
// unbiased variance. Eval mode normalizes with the running statistics.
Tensor batch_norm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, const BatchNormOptions& options);

Tensor relu(const Tensor& input);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);

// Differentiable reshape; element count must match.
Tensor reshape(const Tensor& input, Shape shape);

// Factor-2 bilinear upsampling, half-pixel centers (align_corners = false),
// source coordinates clamped at the border.
Tensor bilinear_upsample_x2(const Tensor& input);

enum class Reduction { kSum, kMean, kL1, kL2Squared };

// Scalar (shape {1}) reduction in row-major order.
Tensor reduce(const Tensor& input, Reduction kind);

// Forward differences along width (first) and height (second); the trailing
// column / row of each is zero. Works on any tensor of rank >= 2 whose last two
// axes are H x W, with H, W >= 2. With allow_single, an axis of length 1 is
// accepted and its difference map is all zero.
std::pair<Tensor, Tensor> spatial_gradients(const Tensor& input, bool allow_single = false);

// Non-differentiable batching helpers for data assembly.
Tensor stack(std::span<const Tensor> items);
Tensor batch_item(const Tensor& batch, std::size_t index);

}  // namespace latent_depth
