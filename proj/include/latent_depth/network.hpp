#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "latent_depth/ops.hpp"
#include "latent_depth/tensor.hpp"

namespace latent_depth {

struct ResBlockSpec {
  std::size_t channels = 1;
  std::size_t kernel = 3;

  void validate() const;
};

// Encoder / bottleneck / decoder description. Stage widths are base, 2 base,
// 4 base and 8 base; four stride-2 convolutions take H x W to H/16 x W/16.
struct NetworkConfig {
  std::size_t input_channels = 3;
  std::size_t output_channels = 1;
  std::size_t base_width = 64;
  std::size_t bottleneck_blocks = 6;
  std::size_t input_h = 320;
  std::size_t input_w = 240;

  std::array<std::size_t, 4> stage_widths() const {
    return {base_width, 2 * base_width, 4 * base_width, 8 * base_width};
  }
  Shape input_shape() const { return {input_channels, input_h, input_w}; }
  Shape latent_shape() const { return {8 * base_width, input_h / 16, input_w / 16}; }
  Shape output_shape() const { return {output_channels, input_h, input_w}; }

  void validate() const;
  bool operator==(const NetworkConfig&) const = default;

  static NetworkConfig full_scale(std::size_t input_channels);
  static NetworkConfig desk_scale(std::size_t input_channels, std::size_t h = 32,
                                  std::size_t w = 32, std::size_t base_width = 4);
};

enum class Phase { kTrain, kEval };

enum class InitMode {
  kDefault,       // fan-in uniform conv weights, gamma = 1, beta = 0, bias = 0
  kZeroResidual,  // as default, but every residual branch conv weight and gamma is 0
};

struct ConvLayer {
  ConvSpec spec;
  Tensor weight;
  Tensor bias;
};

struct NormLayer {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
};

struct ResBlockParams {
  ResBlockSpec spec;
  ConvLayer conv1;
  NormLayer norm1;
  ConvLayer conv2;
  NormLayer norm2;
};

ResBlockParams make_res_block(const ResBlockSpec& spec);

BatchNormOptions norm_options(Phase phase);

// x + bn(conv(relu(bn(conv(x))))). No activation after the join.
Tensor res_block(const Tensor& x, const ResBlockParams& params, Phase phase);

// Number of feature taps: four encoder stages plus the deepest encoding.
inline constexpr std::size_t kTapCount = 5;

// Ordered, non-empty subset of tap indices (0 = shallowest).
class LayerSet {
 public:
  explicit LayerSet(std::vector<std::size_t> indices);
  static LayerSet all();
  static LayerSet deepest();
  // "all", "deepest", or a comma-separated index list such as "0,2,4".
  static LayerSet parse(std::string_view text);

  const std::vector<std::size_t>& indices() const { return indices_; }
  std::string to_string() const;
  bool operator==(const LayerSet&) const = default;

 private:
  std::vector<std::size_t> indices_;
};

struct EncoderOutput {
  Tensor latent;
  std::vector<Tensor> taps;  // stage outputs, then the latent
};

struct ForwardOutput {
  Tensor prediction;
  std::vector<Tensor> taps;  // stage outputs, then the bottleneck output
};

enum class TensorRole { kParameter, kBuffer };

// Parameterized network instance. Copies are deep.
class DepthModel {
 public:
  DepthModel(const NetworkConfig& config, std::uint64_t seed, InitMode init = InitMode::kDefault);
  DepthModel(const DepthModel& other);
  DepthModel& operator=(const DepthModel& other);
  DepthModel(DepthModel&&) noexcept = default;
  DepthModel& operator=(DepthModel&&) noexcept = default;
  ~DepthModel() = default;

  const NetworkConfig& config() const { return config_; }

  // Inputs are C x H x W or N x C x H x W; outputs and taps keep that rank.
  // Train phase normalizes with batch statistics and updates running stats.
  EncoderOutput encode(const Tensor& x, Phase phase);
  Tensor bottleneck(const Tensor& latent, Phase phase);
  Tensor decode(const Tensor& latent, Phase phase);
  ForwardOutput forward(const Tensor& x, Phase phase);

  // Eval-phase prediction; does not touch model state.
  Tensor predict(const Tensor& x) const;

  // Features G_j(y) of the selected taps (eval phase). The model must be
  // frozen; gradients flow to y only.
  std::vector<Tensor> extract_features(const Tensor& y, const LayerSet& layers) const;

  void freeze();
  bool frozen() const { return frozen_; }

  // Trainable tensors in declaration order.
  std::vector<Tensor> parameters() const;
  // Every stored tensor (parameters and running statistics) in declaration order.
  void for_each_tensor(
      const std::function<void(const std::string& name, Tensor& tensor, TensorRole role)>& fn);
  void for_each_tensor(const std::function<void(const std::string& name, const Tensor& tensor,
                                                TensorRole role)>& fn) const;
  std::vector<Shape> parameter_shapes() const;
  std::size_t parameter_count() const;
  // Every residual block: encoder stages, bottleneck, decoder stages.
  std::vector<const ResBlockParams*> res_blocks() const;

 private:
  struct Stage {
    ConvLayer conv;
    NormLayer norm;
    ResBlockParams block;
  };

  Tensor as_batch(const Tensor& x, std::string_view what) const;
  EncoderOutput encode_impl(const Tensor& batch, Phase phase) const;
  Tensor bottleneck_impl(const Tensor& latent, Phase phase) const;
  Tensor decode_impl(const Tensor& latent, Phase phase) const;
  void initialize(std::uint64_t seed, InitMode init);
  void deep_copy_tensors();

  NetworkConfig config_;
  std::array<Stage, 4> encoder_;
  ConvLayer latent_conv_;
  NormLayer latent_norm_;
  std::vector<ResBlockParams> bottleneck_;
  std::array<Stage, 4> decoder_;
  ConvLayer output_conv_;
  bool frozen_ = false;
};

}  // namespace latent_depth
