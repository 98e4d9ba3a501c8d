#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "latent_depth/dataset.hpp"
#include "latent_depth/losses.hpp"
#include "latent_depth/metrics.hpp"
#include "latent_depth/network.hpp"

namespace latent_depth {

enum class Stage { kGuided, kColor };
std::string to_string(Stage stage);

struct TrainConfig {
  Stage stage = Stage::kGuided;
  std::size_t batch_size = 32;
  Real learning_rate = 0.01;
  Real momentum = 0.9;
  std::size_t steps = 100;
  std::uint64_t seed = 7;
  LossWeights weights;
  LayerSet layers = LayerSet::all();
  // A checkpoint named <stage>_step_<t>.ckpt holds the model after t updates.
  // 0 disables periodic checkpoints; the final model is always saved when a
  // directory is given.
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
  std::filesystem::path log_path;  // loss CSV; empty disables

  void validate() const;
  nlohmann::json to_json() const;
};

// v <- momentum * v + g; p <- p - lr * v.
void sgd_update(std::span<Real> param, std::span<const Real> grad, std::span<Real> velocity,
                Real learning_rate, Real momentum);

class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor> params, Real learning_rate, Real momentum);
  // Applies the accumulated gradients, then clears them.
  void step();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<Real>> velocity_;
  Real learning_rate_;
  Real momentum_;
};

// steps batches of batch_size sample indices drawn from consecutive seeded
// shuffles of [0, n).
std::vector<std::vector<std::size_t>> make_batch_plan(std::size_t n, std::size_t batch_size,
                                                      std::size_t steps, std::uint64_t seed);

// The batch plan a trainer follows for a dataset of n samples.
std::vector<std::vector<std::size_t>> training_plan(const TrainConfig& config, std::size_t n);

struct TrainResult {
  DepthModel model;
  std::vector<LossReport> history;  // history[t]: loss before update t
};

// Depth-to-depth reconstruction with the data loss.
TrainResult train_guided(const TrainConfig& config, const NetworkConfig& network,
                         const std::vector<RgbdSample>& data);

// Colour-to-depth training on the weighted objective, with features from the
// frozen guided model. The guided model is never modified.
TrainResult train_color(const TrainConfig& config, const NetworkConfig& network,
                        const std::vector<RgbdSample>& data, const DepthModel& guided);

// Network input for a sample: colour for 3-channel models, depth for 1-channel.
Tensor model_input(const DepthModel& model, const RgbdSample& sample);

// Eval-phase pooled RMSE over all samples. Per-image RMSE is appended to
// per_image when given. The model is not modified.
EvalResult evaluate(const DepthModel& model, const std::vector<RgbdSample>& data,
                    std::vector<Real>* per_image = nullptr);

// Loss of one batch with the model in the training phase, as logged by the
// trainers. Updates running statistics like a training step does.
LossReport batch_loss(DepthModel& model, const TrainConfig& config,
                      const std::vector<RgbdSample>& data, std::span<const std::size_t> batch,
                      const DepthModel* guided);

nlohmann::json run_summary(const TrainConfig& config, const NetworkConfig& network,
                           const TrainResult& result, const EvalResult* eval);

}  // namespace latent_depth
