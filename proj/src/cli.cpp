#include "latent_depth/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <regex>

#include <CLI11.hpp>
#include <json.hpp>

#include "latent_depth/checkpoint.hpp"
#include "latent_depth/dataset.hpp"
#include "latent_depth/errors.hpp"
#include "latent_depth/image_io.hpp"
#include "latent_depth/metrics.hpp"
#include "latent_depth/synth.hpp"
#include "latent_depth/training.hpp"
#include "latent_depth/verification.hpp"

namespace latent_depth {

namespace {

namespace fs = std::filesystem;
using Dims = std::pair<std::size_t, std::size_t>;

// Rejected flag values, reported before any file is written.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VerificationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename F>
auto usage_checked(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

Dims parse_dims(const std::string& text, const char* flag) {
  static const std::regex pattern(R"((\d+)x(\d+))");
  std::smatch m;
  if (!std::regex_match(text, m, pattern)) {
    throw UsageError(std::string(flag) + ": expected HxW, got '" + text + "'");
  }
  const Dims d{std::stoul(m[1]), std::stoul(m[2])};
  if (d.first == 0 || d.second == 0 || d.first % 16 != 0 || d.second % 16 != 0) {
    throw UsageError(std::string(flag) + ": " + text + " is not divisible by 16");
  }
  return d;
}

std::optional<Dims> optional_dims(const std::string& text, const char* flag) {
  if (text.empty()) return std::nullopt;
  return parse_dims(text, flag);
}

void write_json(const std::string& path, const nlohmann::json& j) {
  if (path.empty()) return;
  const fs::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create " + p.parent_path().string() + ": " + ec.message());
  }
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path);
  f << j.dump(2) << "\n";
  if (!f.flush()) throw IoError("failed writing " + path);
}

std::string fixed(Real v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

DatasetManifest load_manifest(const std::string& data) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= "manifest.json";
  return DatasetManifest::load(p);
}

// ---------------------------------------------------------------- gen-synth

struct GenSynthArgs {
  std::string out_dir;
  std::uint64_t seed = 7;
  std::size_t count = 64;
  std::string size = "32x32";
  std::size_t objects = 3;
  Real test_fraction = 0.25;
  std::string out;
};

nlohmann::json gen_synth(const GenSynthArgs& a, std::ostream& out) {
  SynthOptions o;
  o.seed = a.seed;
  o.count = a.count;
  std::tie(o.height, o.width) = parse_dims(a.size, "--size");
  o.objects = a.objects;
  o.test_fraction = a.test_fraction;
  if (o.count == 0) throw UsageError("--count must be at least 1");
  if (!(o.test_fraction >= 0.0 && o.test_fraction <= 1.0)) {
    throw UsageError("--test-fraction must be in [0, 1]");
  }
  const DatasetManifest m = write_synth_dataset(o, a.out_dir);
  const std::size_t n_test = m.indices(Split::kTest).size();
  out << "wrote " << m.records.size() << " scenes (" << m.records.size() - n_test << " train, "
      << n_test << " test) of " << o.height << "x" << o.width << " to " << a.out_dir << "\n";
  return {{"command", "gen-synth"},
          {"out_dir", a.out_dir},
          {"manifest", (fs::path(a.out_dir) / "manifest.json").string()},
          {"seed", o.seed},
          {"count", m.records.size()},
          {"train", m.records.size() - n_test},
          {"test", n_test},
          {"height", o.height},
          {"width", o.width},
          {"objects", o.objects}};
}

// ---------------------------------------------------------------- training

struct TrainArgs {
  std::string data;
  std::string split = "train";
  std::string resize;
  std::size_t rebalance = 0;
  std::size_t steps = 100;
  std::size_t batch_size = 32;
  Real lr = 0.01;
  Real momentum = 0.9;
  std::uint64_t seed = 7;
  std::size_t base_width = 4;
  std::size_t bottleneck_blocks = 6;
  std::string checkpoint_dir;
  std::size_t checkpoint_every = 0;
  std::string log;
  std::string out;
  // Colour stage only.
  std::string guided;
  LossWeights weights;
  std::string layers = "all";
};

std::vector<RgbdSample> load_training_data(const DatasetManifest& m, Split split,
                                           std::optional<Dims> target, std::size_t rebalance,
                                           std::uint64_t seed) {
  if (rebalance == 0) return load_split(m, split, target);
  if (split != Split::kTrain) throw UsageError("--rebalance applies to the train split only");
  std::vector<RgbdSample> out;
  for (std::size_t i : rebalance_scenes(m, rebalance, seed)) {
    const ManifestRecord& r = m.records[i];
    RgbdSample s = load_rgbd_pair(m.resolve(r.rgb), m.resolve(r.depth));
    s.scene_id = r.scene;
    if (target && (target->first != s.height() || target->second != s.width())) {
      s = preprocess(s, target->first, target->second);
    }
    out.push_back(std::move(s));
  }
  return out;
}

nlohmann::json train(const TrainArgs& a, Stage stage, std::ostream& out) {
  TrainConfig config;
  config.stage = stage;
  config.batch_size = a.batch_size;
  config.learning_rate = a.lr;
  config.momentum = a.momentum;
  config.steps = a.steps;
  config.seed = a.seed;
  config.checkpoint_every = a.checkpoint_every;
  config.checkpoint_dir = a.checkpoint_dir;
  config.log_path = a.log.empty() ? fs::path(a.checkpoint_dir) / (to_string(stage) + "_loss.csv")
                                  : fs::path(a.log);
  if (stage == Stage::kColor) {
    config.weights = a.weights;
    config.layers = usage_checked([&] { return LayerSet::parse(a.layers); });
  }
  const Split split = usage_checked([&] { return parse_split(a.split); });
  const std::optional<Dims> target = optional_dims(a.resize, "--resize");
  usage_checked([&] { config.validate(); });
  if (a.base_width == 0) throw UsageError("--base-width must be at least 1");

  std::optional<Checkpoint> guided;
  if (stage == Stage::kColor) guided = load_checkpoint(a.guided);
  const DatasetManifest manifest = load_manifest(a.data);
  const std::vector<RgbdSample> data =
      load_training_data(manifest, split, target, a.rebalance, a.seed);
  if (data.empty()) throw ArgumentError("no samples in the " + a.split + " split");

  NetworkConfig network = NetworkConfig::desk_scale(stage == Stage::kGuided ? 1 : 3,
                                                    data[0].height(), data[0].width(),
                                                    a.base_width);
  network.bottleneck_blocks = a.bottleneck_blocks;
  network.validate();
  TrainResult result = stage == Stage::kGuided
                           ? train_guided(config, network, data)
                           : train_color(config, network, data, guided->model);

  // Held-out evaluation when the manifest has a test split, else training data.
  const bool has_test = !manifest.indices(Split::kTest).empty();
  const std::vector<RgbdSample> eval_data =
      has_test ? load_split(manifest, Split::kTest, Dims{network.input_h, network.input_w}) : data;
  const EvalResult eval = evaluate(result.model, eval_data);

  nlohmann::json j = run_summary(config, network, result, &eval);
  j["command"] = "train-" + to_string(stage);
  j["eval_split"] = has_test ? "test" : a.split;
  j["final_checkpoint"] = (fs::path(a.checkpoint_dir) / (to_string(stage) + "_final.ckpt")).string();
  if (stage == Stage::kColor) j["guided"] = a.guided;

  out << to_string(stage) << " training: " << result.history.size() << " steps on "
      << data.size() << " samples, " << result.model.parameter_count() << " parameters\n";
  if (!result.history.empty()) {
    out << "loss " << fixed(result.history.front().total, 6) << " -> "
        << fixed(result.history.back().total, 6) << "\n";
  }
  out << "eval (" << j["eval_split"].get<std::string>() << "): " << eval.summary() << "\n";
  out << "checkpoint: " << j["final_checkpoint"].get<std::string>() << "\n";
  return j;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string model;
  std::string data;
  std::string split = "test";
  std::string resize;
  bool per_image = false;
  std::string out;
};

nlohmann::json eval_command(const EvalArgs& a, std::ostream& out) {
  const Split split = usage_checked([&] { return parse_split(a.split); });
  std::optional<Dims> target = optional_dims(a.resize, "--resize");
  const Checkpoint ck = load_checkpoint(a.model);
  const NetworkConfig& c = ck.model.config();
  if (!target) target = Dims{c.input_h, c.input_w};
  const DatasetManifest manifest = load_manifest(a.data);
  const std::vector<RgbdSample> data = load_split(manifest, split, target);
  std::vector<Real> per_image;
  const EvalResult r = evaluate(ck.model, data, a.per_image ? &per_image : nullptr);
  out << "eval (" << a.split << "): " << r.summary() << "\n";
  nlohmann::json j = r.to_json();
  j["command"] = "eval";
  j["model"] = a.model;
  j["split"] = a.split;
  if (a.per_image) {
    nlohmann::json images = nlohmann::json::array();
    for (std::size_t i = 0; i < per_image.size(); ++i) {
      const bool valid = std::isfinite(per_image[i]);
      images.push_back({{"index", i},
                        {"scene", data[i].scene_id},
                        {"rmse", valid ? nlohmann::json(per_image[i]) : nlohmann::json()}});
      out << "  image " << i << " (" << data[i].scene_id
          << "): " << (valid ? fixed(per_image[i], 6) : std::string("no valid pixels")) << "\n";
    }
    j["per_image"] = images;
  }
  return j;
}

// ---------------------------------------------------------------- predict

struct PredictArgs {
  std::string model;
  std::string rgb;
  std::string out;
  std::string json;
};

nlohmann::json predict_command(const PredictArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.model);
  const NetworkConfig& c = ck.model.config();
  if (c.input_channels != 3) {
    throw ArgumentError("predict: " + a.model + " is not a colour model (" +
                        std::to_string(c.input_channels) + " input channels)");
  }
  Tensor rgb = read_ppm(a.rgb);
  const std::size_t h = rgb.dim(1), w = rgb.dim(2);
  if (h != c.input_h || w != c.input_w) {
    if (h < c.input_h || w < c.input_w) {
      throw ShapeError("predict: image is " + std::to_string(h) + "x" + std::to_string(w) +
                       " but the model expects " + std::to_string(c.input_h) + "x" +
                       std::to_string(c.input_w));
    }
    RgbdSample s{rgb, Tensor::full({1, h, w}, 1.0), Tensor::full({1, h, w}, 1.0), ""};
    rgb = preprocess(s, c.input_h, c.input_w).rgb;
  }
  const Tensor depth = ck.model.predict(rgb);
  const Gray16 raw = depth_to_millimetres(depth);
  write_pgm16(a.out, raw);
  Real lo = depth.data()[0], hi = lo;
  for (Real v : depth.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  out << "predicted " << c.input_h << "x" << c.input_w << " depth (" << fixed(lo, 3) << " to "
      << fixed(hi, 3) << " m) -> " << a.out << "\n";
  return {{"command", "predict"},
          {"model", a.model},
          {"rgb", a.rgb},
          {"out", a.out},
          {"height", c.input_h},
          {"width", c.input_w},
          {"min_depth_m", lo},
          {"max_depth_m", hi}};
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  std::uint64_t seed = 1;
  std::size_t seeds = 20;
  std::string scale = "tiny";
  std::string out;
  std::string inject_fault;
};

nlohmann::json gradcheck_command(const GradcheckArgs& a, std::ostream& out) {
  if (a.scale != "tiny") throw UsageError("--scale: only 'tiny' is supported");
  if (a.seeds == 0) throw UsageError("--seeds must be at least 1");
  GradCheckOptions o;
  o.seed = a.seed;
  o.seeds = a.seeds;
  struct FaultGuard {
    explicit FaultGuard(const std::string& op) { set_backward_fault(op); }
    ~FaultGuard() { set_backward_fault(""); }
  } guard(a.inject_fault);
  const GradCheckReport r = run_gradcheck_suite(o);
  out << r.text();
  out << r.entries.size() - r.failures().size() << "/" << r.entries.size() << " checks passed\n";
  nlohmann::json j = r.to_json();
  j["command"] = "gradcheck";
  j["scale"] = a.scale;
  if (!a.inject_fault.empty()) j["injected_fault"] = a.inject_fault;
  return j;
}

std::string failure_message(const nlohmann::json& report) {
  std::string msg = "gradient check failed:";
  for (const auto& c : report["checks"]) {
    if (c["passed"].get<bool>()) continue;
    char buf[160];
    std::snprintf(buf, sizeof(buf), " %s (%s, max rel error %.3e)",
                  c["name"].get<std::string>().c_str(), c["op"].get<std::string>().c_str(),
                  c["max_rel_error"].get<Real>());
    msg += buf;
  }
  return msg;
}

// ---------------------------------------------------------------- report

struct ReportArgs {
  bool table2 = false;
  Real ours = 0.416;
  std::string out;
};

nlohmann::json report_command(const ReportArgs& a, std::ostream& out) {
  if (!a.table2) throw UsageError("report: choose a table (--table2)");
  if (!(a.ours >= 0.0) || !std::isfinite(a.ours)) throw UsageError("--ours must be >= 0");
  const std::pair<const char*, Real> baselines[] = {
      {"baseline 1", 0.907}, {"baseline 2", 0.454}, {"baseline 3", 0.590}};
  nlohmann::json rows = nlohmann::json::array();
  out << "method              RMSE   improvement (%)\n";
  for (const auto& [name, rmse] : baselines) {
    const Real imp = relative_improvement(rmse, a.ours);
    rows.push_back({{"method", name}, {"rmse", rmse}, {"improvement_percent", imp}});
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%-18s %6.3f %8.2f\n", name, rmse, imp);
    out << buf;
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%-18s %6.3f\n", "ours", a.ours);
  out << buf;
  return {{"command", "report"}, {"table", "table2"}, {"ours", a.ours}, {"baselines", rows}};
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Monocular depth estimation with guided latent supervision", "latent_depth"};
  app.require_subcommand(1);

  GenSynthArgs gs;
  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic RGB-D dataset and manifest");
  gen->add_option("--out-dir", gs.out_dir, "Output directory")->required();
  gen->add_option("--seed", gs.seed, "Dataset seed")->capture_default_str();
  gen->add_option("--count", gs.count, "Number of scenes")->capture_default_str();
  gen->add_option("--size", gs.size, "Image size HxW, multiples of 16")->capture_default_str();
  gen->add_option("--objects", gs.objects, "Objects per scene")->capture_default_str();
  gen->add_option("--test-fraction", gs.test_fraction, "Fraction of scenes in the test split")
      ->capture_default_str();
  gen->add_option("--out", gs.out, "JSON result path");

  TrainArgs tg, tc;
  const auto add_train = [](CLI::App* sub, TrainArgs& a) {
    sub->add_option("--data", a.data, "Manifest file or dataset directory")->required();
    sub->add_option("--split", a.split, "train or test")->capture_default_str();
    sub->add_option("--resize", a.resize, "Resize samples to HxW");
    sub->add_option("--rebalance", a.rebalance, "Draw N frames per scene");
    sub->add_option("--steps", a.steps, "SGD steps")->capture_default_str();
    sub->add_option("--batch-size", a.batch_size, "Batch size")->capture_default_str();
    sub->add_option("--lr", a.lr, "Learning rate")->capture_default_str();
    sub->add_option("--momentum", a.momentum, "Momentum")->capture_default_str();
    sub->add_option("--seed", a.seed, "Initialization and batch-order seed")
        ->capture_default_str();
    sub->add_option("--base-width", a.base_width, "First stage width")->capture_default_str();
    sub->add_option("--bottleneck-blocks", a.bottleneck_blocks, "Residual blocks at the latent")
        ->capture_default_str();
    sub->add_option("--checkpoint-dir", a.checkpoint_dir, "Checkpoint directory")->required();
    sub->add_option("--checkpoint-every", a.checkpoint_every, "Checkpoint period in steps, 0 = off")
        ->capture_default_str();
    sub->add_option("--log", a.log, "Loss CSV path (default <checkpoint-dir>/<stage>_loss.csv)");
    sub->add_option("--out", a.out, "JSON run summary path");
  };
  auto* train_g = app.add_subcommand("train-guided", "Train the depth-to-depth guided network");
  add_train(train_g, tg);
  auto* train_c = app.add_subcommand("train-color", "Train the colour-to-depth network");
  add_train(train_c, tc);
  train_c->add_option("--guided", tc.guided, "Guided checkpoint")->required();
  train_c->add_option("--w-data", tc.weights.data, "Data loss weight")->capture_default_str();
  train_c->add_option("--w-latent", tc.weights.latent, "Latent loss weight")
      ->capture_default_str();
  train_c->add_option("--w-grad-image", tc.weights.grad_image, "Image gradient loss weight")
      ->capture_default_str();
  train_c->add_option("--w-grad-feature", tc.weights.grad_feature,
                      "Feature gradient loss weight")
      ->capture_default_str();
  train_c->add_option("--layers", tc.layers, "Guided feature taps: all, deepest or 0,2,4")
      ->capture_default_str();

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Pooled RMSE of a checkpoint on a dataset split");
  eval->add_option("--model", ev.model, "Checkpoint")->required();
  eval->add_option("--data", ev.data, "Manifest file or dataset directory")->required();
  eval->add_option("--split", ev.split, "train or test")->capture_default_str();
  eval->add_option("--resize", ev.resize, "Resize samples to HxW (default: model size)");
  eval->add_flag("--per-image", ev.per_image, "Also report per-image RMSE");
  eval->add_option("--out", ev.out, "JSON result path");

  PredictArgs pr;
  auto* predict = app.add_subcommand("predict", "Predict a depth map from a colour image");
  predict->add_option("--model", pr.model, "Colour checkpoint")->required();
  predict->add_option("--rgb", pr.rgb, "Input PPM")->required();
  predict->add_option("--out", pr.out, "Output 16-bit PGM in millimetres")->required();
  predict->add_option("--json", pr.json, "JSON result path");

  GradcheckArgs gc;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient verification suite");
  grad->add_option("--seed", gc.seed, "Base seed")->capture_default_str();
  grad->add_option("--seeds", gc.seeds, "Random instances per check")->capture_default_str();
  grad->add_option("--scale", gc.scale, "Problem scale (tiny)")->capture_default_str();
  grad->add_option("--out", gc.out, "JSON report path");
  grad->add_option("--inject-fault", gc.inject_fault, "Corrupt the backward pass of an op")
      ->group("");

  ReportArgs rp;
  auto* report = app.add_subcommand("report", "Print the published comparison arithmetic");
  report->add_flag("--table2", rp.table2, "RMSE comparison table");
  report->add_option("--ours", rp.ours, "RMSE of the proposed model")->capture_default_str();
  report->add_option("--out", rp.out, "JSON result path");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) {
      write_json(gs.out, gen_synth(gs, out));
    } else if (train_g->parsed()) {
      write_json(tg.out, train(tg, Stage::kGuided, out));
    } else if (train_c->parsed()) {
      write_json(tc.out, train(tc, Stage::kColor, out));
    } else if (eval->parsed()) {
      write_json(ev.out, eval_command(ev, out));
    } else if (predict->parsed()) {
      write_json(pr.json, predict_command(pr, out));
    } else if (grad->parsed()) {
      const nlohmann::json j = gradcheck_command(gc, out);
      write_json(gc.out, j);
      if (!j["passed"].get<bool>()) throw VerificationFailure(failure_message(j));
    } else if (report->parsed()) {
      write_json(rp.out, report_command(rp, out));
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const VerificationFailure& e) {
    err << e.what() << "\n";
    return kExitVerification;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace latent_depth
