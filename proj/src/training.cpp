#include "latent_depth/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "latent_depth/checkpoint.hpp"
#include "latent_depth/errors.hpp"
#include "latent_depth/ops.hpp"

namespace latent_depth {

namespace {

struct Batch {
  Tensor input;
  Tensor target;
  Tensor mask;
};

Batch assemble(const DepthModel& model, const std::vector<RgbdSample>& data,
               std::span<const std::size_t> indices) {
  std::vector<Tensor> inputs, targets, masks;
  for (std::size_t i : indices) {
    inputs.push_back(model_input(model, data.at(i)));
    targets.push_back(data[i].depth);
    masks.push_back(data[i].mask);
  }
  return {stack(inputs), stack(targets), stack(masks)};
}

LossTerms step_terms(DepthModel& model, const TrainConfig& config, const Batch& batch,
                     const DepthModel* guided) {
  const Tensor pred = model.forward(batch.input, Phase::kTrain).prediction;
  if (config.stage == Stage::kColor) {
    return total_loss(*guided, pred, batch.target, batch.mask, config.weights, config.layers);
  }
  LossTerms terms;
  terms.data = data_loss(pred, batch.target, batch.mask);
  terms.latent = Tensor::scalar(0.0);
  terms.grad_image = Tensor::scalar(0.0);
  terms.grad_feature = Tensor::scalar(0.0);
  terms.total = terms.data;
  return terms;
}

void check_samples(const std::vector<RgbdSample>& data, const NetworkConfig& network,
                   const char* what) {
  if (data.empty()) throw ArgumentError(std::string(what) + ": empty dataset");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].height() != network.input_h || data[i].width() != network.input_w) {
      throw ShapeError(std::string(what) + ": sample " + std::to_string(i) + " is " +
                       std::to_string(data[i].height()) + "x" + std::to_string(data[i].width()) +
                       " but the network expects " + std::to_string(network.input_h) + "x" +
                       std::to_string(network.input_w));
    }
  }
}

TrainResult run_training(const TrainConfig& config, const NetworkConfig& network,
                         const std::vector<RgbdSample>& data, const DepthModel* guided) {
  const char* what = config.stage == Stage::kGuided ? "train_guided" : "train_color";
  TrainResult result{DepthModel(network, config.seed), {}};
  DepthModel& model = result.model;
  SgdMomentum optimizer(model.parameters(), config.learning_rate, config.momentum);
  const auto plan = training_plan(config, data.size());

  const auto make_dir = [](const std::filesystem::path& dir) {
    if (dir.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  };
  const bool checkpoints = !config.checkpoint_dir.empty();
  if (checkpoints) make_dir(config.checkpoint_dir);
  std::ofstream log;
  if (!config.log_path.empty()) {
    make_dir(config.log_path.parent_path());
    log.open(config.log_path, std::ios::trunc);
    if (!log) throw IoError("cannot open loss log " + config.log_path.string());
    log << LossReport::csv_header() << "\n";
  }
  const nlohmann::json meta = {{"stage", to_string(config.stage)}};
  const auto save_step = [&](std::size_t t) {
    if (checkpoints && config.checkpoint_every > 0 && t > 0 && t % config.checkpoint_every == 0) {
      nlohmann::json m = meta;
      m["step"] = t;
      save_checkpoint(config.checkpoint_dir /
                          (to_string(config.stage) + "_step_" + std::to_string(t) + ".ckpt"),
                      model, m);
    }
  };

  for (std::size_t t = 0; t < config.steps; ++t) {
    save_step(t);
    LossTerms terms = step_terms(model, config, assemble(model, data, plan[t]), guided);
    const LossReport report = terms.report();
    if (!std::isfinite(report.total)) {
      throw NonFiniteError(std::string(what) + ": non-finite loss at step " + std::to_string(t));
    }
    result.history.push_back(report);
    if (log) log << report.csv_row(t) << std::endl;
    terms.total.backward();
    optimizer.step();
  }
  save_step(config.steps);
  if (checkpoints) {
    nlohmann::json m = meta;
    m["step"] = config.steps;
    save_checkpoint(config.checkpoint_dir / (to_string(config.stage) + "_final.ckpt"), model, m);
  }
  if (log && !log.flush()) throw IoError("failed writing " + config.log_path.string());
  return result;
}

}  // namespace

std::string to_string(Stage stage) { return stage == Stage::kGuided ? "guided" : "color"; }

void TrainConfig::validate() const {
  if (batch_size == 0) throw ArgumentError("TrainConfig: batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ArgumentError("TrainConfig: momentum must be in [0, 1)");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ArgumentError("TrainConfig: learning rate must be positive");
  }
  weights.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"stage", to_string(stage)},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"momentum", momentum},
          {"steps", steps},
          {"seed", seed},
          {"weights",
           {{"data", weights.data},
            {"latent", weights.latent},
            {"grad_image", weights.grad_image},
            {"grad_feature", weights.grad_feature}}},
          {"layers", layers.to_string()},
          {"checkpoint_every", checkpoint_every},
          {"checkpoint_dir", checkpoint_dir.string()},
          {"log_path", log_path.string()}};
}

void sgd_update(std::span<Real> param, std::span<const Real> grad, std::span<Real> velocity,
                Real learning_rate, Real momentum) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw ShapeError("sgd_update: parameter, gradient and velocity sizes differ (" +
                     std::to_string(param.size()) + ", " + std::to_string(grad.size()) + ", " +
                     std::to_string(velocity.size()) + ")");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    param[i] -= learning_rate * velocity[i];
  }
}

SgdMomentum::SgdMomentum(std::vector<Tensor> params, Real learning_rate, Real momentum)
    : params_(std::move(params)), learning_rate_(learning_rate), momentum_(momentum) {
  for (const Tensor& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void SgdMomentum::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    if (!p.has_grad()) continue;
    sgd_update(p.mutable_data(), p.grad_view(), velocity_[k], learning_rate_, momentum_);
    p.zero_grad();
  }
}

std::vector<std::vector<std::size_t>> make_batch_plan(std::size_t n, std::size_t batch_size,
                                                      std::size_t steps, std::uint64_t seed) {
  if (n == 0) throw ArgumentError("make_batch_plan: empty dataset");
  if (batch_size == 0) throw ArgumentError("make_batch_plan: batch_size must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::size_t next = n;  // forces a shuffle before the first draw
  std::vector<std::vector<std::size_t>> plan(steps);
  for (auto& batch : plan) {
    batch.reserve(batch_size);
    while (batch.size() < batch_size) {
      if (next == n) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        next = 0;
      }
      batch.push_back(order[next++]);
    }
  }
  return plan;
}

std::vector<std::vector<std::size_t>> training_plan(const TrainConfig& config, std::size_t n) {
  return make_batch_plan(n, config.batch_size, config.steps, config.seed + 1);
}

Tensor model_input(const DepthModel& model, const RgbdSample& sample) {
  const std::size_t c = model.config().input_channels;
  if (c == 3) return sample.rgb;
  if (c == 1) return sample.depth;
  throw ShapeError("model_input: unsupported input channel count " + std::to_string(c));
}

LossReport batch_loss(DepthModel& model, const TrainConfig& config,
                      const std::vector<RgbdSample>& data, std::span<const std::size_t> batch,
                      const DepthModel* guided) {
  if (config.stage == Stage::kColor && guided == nullptr) {
    throw ArgumentError("batch_loss: colour stage needs the guided model");
  }
  return step_terms(model, config, assemble(model, data, batch), guided).report();
}

TrainResult train_guided(const TrainConfig& config, const NetworkConfig& network,
                         const std::vector<RgbdSample>& data) {
  config.validate();
  if (config.stage != Stage::kGuided) throw ArgumentError("train_guided: stage must be guided");
  if (network.input_channels != 1 || network.output_channels != 1) {
    throw ArgumentError("train_guided: the guided network maps 1 channel to 1 channel");
  }
  network.validate();
  check_samples(data, network, "train_guided");
  return run_training(config, network, data, nullptr);
}

TrainResult train_color(const TrainConfig& config, const NetworkConfig& network,
                        const std::vector<RgbdSample>& data, const DepthModel& guided) {
  config.validate();
  if (config.stage != Stage::kColor) throw ArgumentError("train_color: stage must be color");
  network.validate();
  if (network.input_channels != 3 || network.output_channels != 1) {
    throw ArgumentError("train_color: the colour network maps 3 channels to 1 channel");
  }
  const NetworkConfig& g = guided.config();
  if (g.input_channels != 1 || g.output_channels != 1 || g.input_h != network.input_h ||
      g.input_w != network.input_w) {
    throw ShapeError("train_color: guided model config is incompatible with the colour network");
  }
  check_samples(data, network, "train_color");
  DepthModel frozen = guided;
  frozen.freeze();
  return run_training(config, network, data, &frozen);
}

EvalResult evaluate(const DepthModel& model, const std::vector<RgbdSample>& data,
                    std::vector<Real>* per_image) {
  if (data.empty()) throw ArgumentError("evaluate: empty dataset");
  check_samples(data, model.config(), "evaluate");
  std::vector<EvalPair> pairs;
  for (const RgbdSample& s : data) {
    pairs.push_back({model.predict(model_input(model, s)), s.depth, s.mask});
    if (per_image != nullptr) {
      const bool any = std::any_of(s.mask.data().begin(), s.mask.data().end(),
                                   [](Real m) { return m != 0.0; });
      per_image->push_back(any ? rmse(std::span(&pairs.back(), 1)).rmse
                               : std::numeric_limits<Real>::quiet_NaN());
    }
  }
  return rmse(pairs);
}

nlohmann::json run_summary(const TrainConfig& config, const NetworkConfig& network,
                           const TrainResult& result, const EvalResult* eval) {
  const auto report_json = [](const LossReport& r) {
    return nlohmann::json{{"data", r.data},
                          {"latent", r.latent},
                          {"grad_image", r.grad_image},
                          {"grad_feature", r.grad_feature},
                          {"total", r.total}};
  };
  nlohmann::json j = {{"config", config.to_json()},
                      {"network", config_to_json(network)},
                      {"steps", result.history.size()},
                      {"parameters", result.model.parameter_count()}};
  const bool any = !result.history.empty();
  j["initial_loss"] = any ? report_json(result.history.front()) : nlohmann::json();
  j["final_loss"] = any ? report_json(result.history.back()) : nlohmann::json();
  j["eval"] = eval != nullptr ? eval->to_json() : nlohmann::json();
  return j;
}

}  // namespace latent_depth
