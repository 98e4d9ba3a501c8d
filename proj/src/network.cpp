#include "latent_depth/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace latent_depth {

namespace {

// Encoder stage kernels and strides; decoder stages mirror them in reverse.
constexpr std::array<std::size_t, 4> kStageKernels = {9, 7, 5, 3};
constexpr std::array<std::size_t, 4> kStageStrides = {1, 2, 2, 2};
constexpr std::size_t kLatentKernel = 3;
constexpr std::size_t kBottleneckKernel = 3;
constexpr std::size_t kOutputKernel = 9;

ConvLayer make_conv(std::size_t out, std::size_t in, std::size_t kernel, std::size_t stride) {
  ConvLayer layer;
  layer.spec = ConvSpec{out, in, kernel, kernel, stride};
  layer.spec.validate();
  layer.weight = Tensor(layer.spec.weight_shape(), 0.0);
  layer.weight.set_requires_grad(true);
  layer.bias = Tensor(Shape{out}, 0.0);
  layer.bias.set_requires_grad(true);
  return layer;
}

NormLayer make_norm(std::size_t channels) {
  NormLayer norm;
  norm.gamma = Tensor(Shape{channels}, 1.0);
  norm.gamma.set_requires_grad(true);
  norm.beta = Tensor(Shape{channels}, 0.0);
  norm.beta.set_requires_grad(true);
  norm.running_mean = Tensor(Shape{channels}, 0.0);
  norm.running_var = Tensor(Shape{channels}, 1.0);
  return norm;
}

Tensor apply_norm(const Tensor& x, const NormLayer& norm, Phase phase) {
  Tensor running_mean = norm.running_mean;  // handles share storage
  Tensor running_var = norm.running_var;
  return batch_norm2d(x, norm.gamma, norm.beta, running_mean, running_var, norm_options(phase));
}

Tensor conv_norm_relu(const Tensor& x, const ConvLayer& conv, const NormLayer& norm, Phase phase) {
  return relu(apply_norm(conv2d(x, conv.spec, conv.weight, conv.bias), norm, phase));
}

using MutableVisitor = std::function<void(const std::string&, Tensor&, TensorRole)>;

void visit_conv(const std::string& prefix, ConvLayer& conv, const MutableVisitor& fn) {
  fn(prefix + ".weight", conv.weight, TensorRole::kParameter);
  fn(prefix + ".bias", conv.bias, TensorRole::kParameter);
}

void visit_norm(const std::string& prefix, NormLayer& norm, const MutableVisitor& fn) {
  fn(prefix + ".gamma", norm.gamma, TensorRole::kParameter);
  fn(prefix + ".beta", norm.beta, TensorRole::kParameter);
  fn(prefix + ".running_mean", norm.running_mean, TensorRole::kBuffer);
  fn(prefix + ".running_var", norm.running_var, TensorRole::kBuffer);
}

void visit_block(const std::string& prefix, ResBlockParams& block, const MutableVisitor& fn) {
  visit_conv(prefix + ".conv1", block.conv1, fn);
  visit_norm(prefix + ".norm1", block.norm1, fn);
  visit_conv(prefix + ".conv2", block.conv2, fn);
  visit_norm(prefix + ".norm2", block.norm2, fn);
}

bool is_residual_branch(const std::string& name) {
  const bool in_block = name.find(".block.") != std::string::npos ||
                        name.rfind("bottleneck.", 0) == 0;
  if (!in_block) return false;
  return name.ends_with(".weight") || name.ends_with(".gamma");
}

Shape drop_batch(const Shape& s) { return Shape(s.begin() + 1, s.end()); }

}  // namespace

void ResBlockSpec::validate() const {
  if (channels == 0) throw ArgumentError("ResBlockSpec: channels must be positive");
  if (kernel % 2 == 0) {
    throw ArgumentError("ResBlockSpec: kernel must be odd, got " + std::to_string(kernel));
  }
}

void NetworkConfig::validate() const {
  if (input_channels == 0 || output_channels == 0 || base_width == 0) {
    throw ArgumentError("NetworkConfig: channel counts and base width must be positive");
  }
  if (input_h == 0 || input_w == 0 || input_h % 16 != 0 || input_w % 16 != 0) {
    throw ArgumentError("NetworkConfig: input " + std::to_string(input_h) + "x" +
                        std::to_string(input_w) + " must be positive multiples of 16");
  }
}

NetworkConfig NetworkConfig::full_scale(std::size_t input_channels) {
  NetworkConfig c;
  c.input_channels = input_channels;
  return c;
}

NetworkConfig NetworkConfig::desk_scale(std::size_t input_channels, std::size_t h, std::size_t w,
                                        std::size_t base_width) {
  NetworkConfig c;
  c.input_channels = input_channels;
  c.base_width = base_width;
  c.input_h = h;
  c.input_w = w;
  return c;
}

ResBlockParams make_res_block(const ResBlockSpec& spec) {
  spec.validate();
  ResBlockParams p;
  p.spec = spec;
  p.conv1 = make_conv(spec.channels, spec.channels, spec.kernel, 1);
  p.norm1 = make_norm(spec.channels);
  p.conv2 = make_conv(spec.channels, spec.channels, spec.kernel, 1);
  p.norm2 = make_norm(spec.channels);
  return p;
}

BatchNormOptions norm_options(Phase phase) {
  BatchNormOptions opt;
  opt.mode = phase == Phase::kTrain ? NormMode::kTrain : NormMode::kEval;
  opt.update_running_stats = phase == Phase::kTrain;
  return opt;
}

Tensor res_block(const Tensor& x, const ResBlockParams& params, Phase phase) {
  const std::size_t channel_axis = x.rank() == 4 ? 1 : 0;
  if (x.rank() < 3 || x.dim(channel_axis) != params.spec.channels) {
    throw ShapeError("res_block: input " + shape_string(x.shape()) + " does not have " +
                     std::to_string(params.spec.channels) + " channels");
  }
  Tensor branch = conv_norm_relu(x, params.conv1, params.norm1, phase);
  branch = apply_norm(conv2d(branch, params.conv2.spec, params.conv2.weight, params.conv2.bias),
                      params.norm2, phase);
  return add(x, branch);
}

LayerSet::LayerSet(std::vector<std::size_t> indices) : indices_(std::move(indices)) {
  if (indices_.empty()) throw ArgumentError("LayerSet: empty layer selection");
  std::sort(indices_.begin(), indices_.end());
  indices_.erase(std::unique(indices_.begin(), indices_.end()), indices_.end());
  if (indices_.back() >= kTapCount) {
    throw ArgumentError("LayerSet: tap index " + std::to_string(indices_.back()) +
                        " out of range (" + std::to_string(kTapCount) + " taps)");
  }
}

LayerSet LayerSet::all() { return LayerSet({0, 1, 2, 3, 4}); }

LayerSet LayerSet::deepest() { return LayerSet({kTapCount - 1}); }

LayerSet LayerSet::parse(std::string_view text) {
  if (text == "all") return all();
  if (text == "deepest") return deepest();
  std::vector<std::size_t> indices;
  std::stringstream ss{std::string(text)};
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw ArgumentError("LayerSet: cannot parse '" + std::string(text) + "'");
    }
    indices.push_back(std::stoul(item));
  }
  return LayerSet(std::move(indices));
}

std::string LayerSet::to_string() const {
  if (*this == all()) return "all";
  std::string out;
  for (std::size_t i : indices_) {
    if (!out.empty()) out += ',';
    out += std::to_string(i);
  }
  return out;
}

DepthModel::DepthModel(const NetworkConfig& config, std::uint64_t seed, InitMode init)
    : config_(config) {
  config_.validate();
  const auto widths = config_.stage_widths();
  std::size_t in = config_.input_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    encoder_[s].conv = make_conv(widths[s], in, kStageKernels[s], kStageStrides[s]);
    encoder_[s].norm = make_norm(widths[s]);
    encoder_[s].block = make_res_block({widths[s], kStageKernels[s]});
    in = widths[s];
  }
  latent_conv_ = make_conv(widths[3], widths[3], kLatentKernel, 2);
  latent_norm_ = make_norm(widths[3]);
  for (std::size_t b = 0; b < config_.bottleneck_blocks; ++b) {
    bottleneck_.push_back(make_res_block({widths[3], kBottleneckKernel}));
  }
  // Decoder stage s brings the width from widths[3 - s + 1] (or the latent
  // width) down to widths[3 - s], mirroring the encoder.
  std::size_t dec_in = widths[3];
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t level = 3 - s;
    const std::size_t conv_kernel = s == 0 ? kStageKernels[3] : kStageKernels[level + 1];
    decoder_[s].conv = make_conv(widths[level], dec_in, conv_kernel, 1);
    decoder_[s].norm = make_norm(widths[level]);
    decoder_[s].block = make_res_block({widths[level], kStageKernels[level]});
    dec_in = widths[level];
  }
  output_conv_ = make_conv(config_.output_channels, widths[0], kOutputKernel, 1);
  initialize(seed, init);
}

DepthModel::DepthModel(const DepthModel& other)
    : config_(other.config_),
      encoder_(other.encoder_),
      latent_conv_(other.latent_conv_),
      latent_norm_(other.latent_norm_),
      bottleneck_(other.bottleneck_),
      decoder_(other.decoder_),
      output_conv_(other.output_conv_),
      frozen_(other.frozen_) {
  deep_copy_tensors();
}

DepthModel& DepthModel::operator=(const DepthModel& other) {
  if (this != &other) {
    DepthModel copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void DepthModel::deep_copy_tensors() {
  for_each_tensor([](const std::string&, Tensor& t, TensorRole) {
    const bool grad = t.requires_grad();
    t = t.detach();
    if (grad) t.set_requires_grad(true);
  });
}

void DepthModel::initialize(std::uint64_t seed, InitMode init) {
  std::mt19937_64 rng(seed);
  for_each_tensor([&](const std::string& name, Tensor& t, TensorRole) {
    if (!name.ends_with(".weight")) return;
    const Shape& s = t.shape();
    const auto fan_in = static_cast<Real>(s[1] * s[2] * s[3]);
    const Real bound = std::sqrt(3.0 / fan_in);
    std::uniform_real_distribution<Real> dist(-bound, bound);
    for (Real& v : t.mutable_data()) v = dist(rng);
  });
  if (init == InitMode::kZeroResidual) {
    for_each_tensor([](const std::string& name, Tensor& t, TensorRole) {
      if (is_residual_branch(name)) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
    });
  }
}

void DepthModel::for_each_tensor(const MutableVisitor& fn) {
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string p = "encoder." + std::to_string(s);
    visit_conv(p + ".conv", encoder_[s].conv, fn);
    visit_norm(p + ".norm", encoder_[s].norm, fn);
    visit_block(p + ".block", encoder_[s].block, fn);
  }
  visit_conv("latent.conv", latent_conv_, fn);
  visit_norm("latent.norm", latent_norm_, fn);
  for (std::size_t b = 0; b < bottleneck_.size(); ++b) {
    visit_block("bottleneck." + std::to_string(b), bottleneck_[b], fn);
  }
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string p = "decoder." + std::to_string(s);
    visit_conv(p + ".conv", decoder_[s].conv, fn);
    visit_norm(p + ".norm", decoder_[s].norm, fn);
    visit_block(p + ".block", decoder_[s].block, fn);
  }
  visit_conv("output.conv", output_conv_, fn);
}

void DepthModel::for_each_tensor(
    const std::function<void(const std::string&, const Tensor&, TensorRole)>& fn) const {
  // The mutable walk only hands out references; fn sees them as const.
  const_cast<DepthModel*>(this)->for_each_tensor(
      [&](const std::string& name, Tensor& t, TensorRole role) { fn(name, t, role); });
}

std::vector<Tensor> DepthModel::parameters() const {
  std::vector<Tensor> out;
  for_each_tensor([&](const std::string&, const Tensor& t, TensorRole role) {
    if (role == TensorRole::kParameter) out.push_back(t);
  });
  return out;
}

std::vector<Shape> DepthModel::parameter_shapes() const {
  std::vector<Shape> out;
  for_each_tensor([&](const std::string&, const Tensor& t, TensorRole role) {
    if (role == TensorRole::kParameter) out.push_back(t.shape());
  });
  return out;
}

std::size_t DepthModel::parameter_count() const {
  std::size_t n = 0;
  for (const Shape& s : parameter_shapes()) n += shape_numel(s);
  return n;
}

std::vector<const ResBlockParams*> DepthModel::res_blocks() const {
  std::vector<const ResBlockParams*> out;
  for (const Stage& s : encoder_) out.push_back(&s.block);
  for (const ResBlockParams& b : bottleneck_) out.push_back(&b);
  for (const Stage& s : decoder_) out.push_back(&s.block);
  return out;
}

void DepthModel::freeze() {
  for_each_tensor([](const std::string&, Tensor& t, TensorRole role) {
    if (role == TensorRole::kParameter) t.set_requires_grad(false);
  });
  frozen_ = true;
}

Tensor DepthModel::as_batch(const Tensor& x, std::string_view what) const {
  const Shape expected = config_.input_shape();
  Shape got = x.shape();
  if (got.size() == 4) got = drop_batch(got);
  if (x.rank() < 3 || x.rank() > 4 || got != expected) {
    throw ShapeError(std::string(what) + ": input " + shape_string(x.shape()) +
                     " does not match configured " + shape_string(expected));
  }
  if (x.rank() == 4) return x;
  Shape batched{1};
  batched.insert(batched.end(), expected.begin(), expected.end());
  return reshape(x, batched);
}

EncoderOutput DepthModel::encode_impl(const Tensor& batch, Phase phase) const {
  EncoderOutput out;
  Tensor h = batch;
  for (const Stage& stage : encoder_) {
    h = conv_norm_relu(h, stage.conv, stage.norm, phase);
    h = res_block(h, stage.block, phase);
    out.taps.push_back(h);
  }
  out.latent = conv_norm_relu(h, latent_conv_, latent_norm_, phase);
  out.taps.push_back(out.latent);
  return out;
}

Tensor DepthModel::bottleneck_impl(const Tensor& latent, Phase phase) const {
  Tensor h = latent;
  for (const ResBlockParams& block : bottleneck_) h = res_block(h, block, phase);
  return h;
}

Tensor DepthModel::decode_impl(const Tensor& latent, Phase phase) const {
  Shape got = latent.rank() == 4 ? drop_batch(latent.shape()) : latent.shape();
  if (got != config_.latent_shape()) {
    throw ShapeError("decode: latent " + shape_string(latent.shape()) + " does not match " +
                     shape_string(config_.latent_shape()));
  }
  Tensor h = latent;
  for (const Stage& stage : decoder_) {
    h = bilinear_upsample_x2(h);
    h = conv_norm_relu(h, stage.conv, stage.norm, phase);
    h = res_block(h, stage.block, phase);
  }
  return conv2d(h, output_conv_.spec, output_conv_.weight, output_conv_.bias);
}

EncoderOutput DepthModel::encode(const Tensor& x, Phase phase) {
  EncoderOutput out = encode_impl(as_batch(x, "encode"), phase);
  if (x.rank() == 3) {
    for (Tensor& t : out.taps) t = reshape(t, drop_batch(t.shape()));
    out.latent = out.taps.back();
  }
  return out;
}

Tensor DepthModel::bottleneck(const Tensor& latent, Phase phase) {
  Shape got = latent.rank() == 4 ? drop_batch(latent.shape()) : latent.shape();
  if (got != config_.latent_shape()) {
    throw ShapeError("bottleneck: latent " + shape_string(latent.shape()) + " does not match " +
                     shape_string(config_.latent_shape()));
  }
  return bottleneck_impl(latent, phase);
}

Tensor DepthModel::decode(const Tensor& latent, Phase phase) { return decode_impl(latent, phase); }

ForwardOutput DepthModel::forward(const Tensor& x, Phase phase) {
  EncoderOutput enc = encode_impl(as_batch(x, "forward"), phase);
  ForwardOutput out;
  Tensor deep = bottleneck_impl(enc.latent, phase);
  out.prediction = decode_impl(deep, phase);
  out.taps = std::move(enc.taps);
  out.taps.back() = deep;
  if (x.rank() == 3) {
    out.prediction = reshape(out.prediction, drop_batch(out.prediction.shape()));
    for (Tensor& t : out.taps) t = reshape(t, drop_batch(t.shape()));
  }
  return out;
}

Tensor DepthModel::predict(const Tensor& x) const {
  const NoGradScope no_grad;
  Tensor batch = as_batch(x.detach(), "predict");
  EncoderOutput enc = encode_impl(batch, Phase::kEval);
  Tensor pred = decode_impl(bottleneck_impl(enc.latent, Phase::kEval), Phase::kEval);
  if (x.rank() == 3) pred = reshape(pred, drop_batch(pred.shape()));
  return pred.detach();
}

std::vector<Tensor> DepthModel::extract_features(const Tensor& y, const LayerSet& layers) const {
  if (!frozen_) throw GraphError("extract_features: the guided model must be frozen first");
  EncoderOutput enc = encode_impl(as_batch(y, "extract_features"), Phase::kEval);
  enc.taps.back() = bottleneck_impl(enc.latent, Phase::kEval);
  std::vector<Tensor> out;
  for (std::size_t j : layers.indices()) {
    Tensor t = enc.taps[j];
    if (y.rank() == 3) t = reshape(t, drop_batch(t.shape()));
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace latent_depth
