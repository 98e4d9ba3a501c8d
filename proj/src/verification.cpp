#include "latent_depth/verification.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>

#include "latent_depth/gradcheck.hpp"
#include "latent_depth/losses.hpp"
#include "latent_depth/network.hpp"
#include "latent_depth/ops.hpp"

namespace latent_depth {

namespace {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  Tensor uniform(Shape shape, Real lo = -1.0, Real hi = 1.0) {
    std::uniform_real_distribution<Real> dist(lo, hi);
    std::vector<Real> v(shape_numel(shape));
    for (Real& x : v) x = dist(engine_);
    return Tensor(std::move(shape), std::move(v));
  }

  // Values with |x| >= margin, keeping kinks (relu, abs) out of the stencil.
  Tensor away_from_zero(Shape shape, Real margin = 0.1) {
    Tensor t = uniform(std::move(shape));
    for (Real& x : t.mutable_data()) {
      if (std::abs(x) < margin) x = x < 0.0 ? x - margin : x + margin;
    }
    return t;
  }

  Tensor binary(Shape shape) {
    Tensor t = uniform(std::move(shape), 0.0, 1.0);
    for (Real& x : t.mutable_data()) x = x < 0.7 ? 1.0 : 0.0;
    t.mutable_data()[0] = 1.0;
    return t;
  }

 private:
  std::mt19937_64 engine_;
};

// Scalar probe of a tensor-valued result: sum of the result weighted by fixed
// random coefficients, so every output element contributes.
Tensor probe(const Tensor& t, const Tensor& weights) {
  return reduce(mul(t, weights), Reduction::kSum);
}

using Instance = std::function<FiniteDiffResult(Rng&)>;

struct Check {
  std::string name;
  std::string op;
  Instance run;
};

ConvSpec conv_spec(std::size_t in, std::size_t out, std::size_t k, std::size_t stride) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_h = k;
  s.kernel_w = k;
  s.stride = stride;
  return s;
}

std::vector<Check> conv_checks() {
  std::vector<Check> out;
  for (std::size_t stride : {1, 2}) {
    const std::string suffix = stride == 1 ? "" : "/stride2";
    out.push_back({"conv2d/input" + suffix, "conv2d", [stride](Rng& rng) {
                     const ConvSpec s = conv_spec(2, 3, 3, stride);
                     const Tensor w = rng.uniform(s.weight_shape());
                     const Tensor b = rng.uniform({3});
                     const Tensor x = rng.uniform({2, 2, 4, 5});
                     const Tensor pw =
                         rng.uniform({2, 3, s.output_size(4), s.output_size(5)});
                     return finite_diff_check(
                         [&](const Tensor& v) { return probe(conv2d(v, s, w, b), pw); }, x);
                   }});
  }
  out.push_back({"conv2d/weights", "conv2d", [](Rng& rng) {
                   const ConvSpec s = conv_spec(2, 2, 5, 2);
                   const Tensor x = rng.uniform({2, 2, 6, 6});
                   const Tensor b = rng.uniform({2});
                   const Tensor pw = rng.uniform({2, 2, 3, 3});
                   return finite_diff_check(
                       [&](const Tensor& w) { return probe(conv2d(x, s, w, b), pw); },
                       rng.uniform(s.weight_shape()));
                 }});
  out.push_back({"conv2d/bias", "conv2d", [](Rng& rng) {
                   const ConvSpec s = conv_spec(2, 3, 3, 1);
                   const Tensor x = rng.uniform({1, 2, 4, 4});
                   const Tensor w = rng.uniform(s.weight_shape());
                   const Tensor pw = rng.uniform({1, 3, 4, 4});
                   return finite_diff_check(
                       [&](const Tensor& b) { return probe(conv2d(x, s, w, b), pw); },
                       rng.uniform({3}));
                 }});
  return out;
}

std::vector<Check> norm_checks() {
  const auto bn = [](NormMode mode, int arg) {
    return [mode, arg](Rng& rng) {
      Tensor x = rng.uniform({3, 2, 3, 3}, -2.0, 2.0);
      Tensor gamma = rng.uniform({2}, 0.5, 1.5);
      Tensor beta = rng.uniform({2});
      Tensor mean = rng.uniform({2});
      Tensor var = rng.uniform({2}, 0.5, 2.0);
      const Tensor pw = rng.uniform(x.shape());
      BatchNormOptions o;
      o.mode = mode;
      o.update_running_stats = false;
      const auto f = [&](const Tensor& v) {
        Tensor m = mean, r = var;
        const Tensor& in = arg == 0 ? v : x;
        const Tensor& g = arg == 1 ? v : gamma;
        const Tensor& b = arg == 2 ? v : beta;
        return probe(batch_norm2d(in, g, b, m, r, o), pw);
      };
      return finite_diff_check(f, arg == 0 ? x : (arg == 1 ? gamma : beta));
    };
  };
  return {{"batch_norm2d/train/input", "batch_norm2d", bn(NormMode::kTrain, 0)},
          {"batch_norm2d/train/gamma", "batch_norm2d", bn(NormMode::kTrain, 1)},
          {"batch_norm2d/train/beta", "batch_norm2d", bn(NormMode::kTrain, 2)},
          {"batch_norm2d/eval/input", "batch_norm2d", bn(NormMode::kEval, 0)}};
}

std::vector<Check> elementwise_checks() {
  std::vector<Check> out;
  out.push_back({"relu", "relu", [](Rng& rng) {
                   const Tensor pw = rng.uniform({2, 3, 4});
                   return finite_diff_check([&](const Tensor& v) { return probe(relu(v), pw); },
                                            rng.away_from_zero({2, 3, 4}));
                 }});
  const auto binary = [](const char* name, Tensor (*fn)(const Tensor&, const Tensor&), int arg) {
    return Check{std::string(name) + (arg == 0 ? "/lhs" : "/rhs"), name, [fn, arg](Rng& rng) {
                   const Tensor a = rng.uniform({3, 4}), b = rng.uniform({3, 4});
                   const Tensor pw = rng.uniform({3, 4});
                   return finite_diff_check(
                       [&](const Tensor& v) {
                         return probe(arg == 0 ? fn(v, b) : fn(a, v), pw);
                       },
                       arg == 0 ? a : b);
                 }};
  };
  for (int arg : {0, 1}) {
    out.push_back(binary("add", &add, arg));
    out.push_back(binary("sub", &sub, arg));
    out.push_back(binary("mul", &mul, arg));
  }
  out.push_back({"scale", "scale", [](Rng& rng) {
                   const Tensor pw = rng.uniform({5});
                   return finite_diff_check(
                       [&](const Tensor& v) { return probe(scale(v, -1.75), pw); },
                       rng.uniform({5}));
                 }});
  out.push_back({"reshape", "reshape", [](Rng& rng) {
                   const Tensor pw = rng.uniform({6, 2});
                   return finite_diff_check(
                       [&](const Tensor& v) { return probe(reshape(v, {6, 2}), pw); },
                       rng.uniform({3, 4}));
                 }});
  out.push_back({"bilinear_upsample_x2", "bilinear_upsample_x2", [](Rng& rng) {
                   const Tensor pw = rng.uniform({2, 2, 6, 8});
                   return finite_diff_check(
                       [&](const Tensor& v) { return probe(bilinear_upsample_x2(v), pw); },
                       rng.uniform({2, 2, 3, 4}));
                 }});
  const std::pair<const char*, Reduction> reductions[] = {{"reduce/sum", Reduction::kSum},
                                                          {"reduce/mean", Reduction::kMean},
                                                          {"reduce/l1", Reduction::kL1},
                                                          {"reduce/l2sq", Reduction::kL2Squared}};
  for (const auto& [name, kind] : reductions) {
    out.push_back({name, "reduce", [kind](Rng& rng) {
                     return finite_diff_check([&](const Tensor& v) { return reduce(v, kind); },
                                              rng.away_from_zero({3, 5}));
                   }});
  }
  out.push_back({"spatial_gradients", "spatial_gradients", [](Rng& rng) {
                   const Tensor ph = rng.uniform({2, 4, 5}), pv = rng.uniform({2, 4, 5});
                   return finite_diff_check(
                       [&](const Tensor& v) {
                         auto [h, g] = spatial_gradients(v);
                         return add(probe(h, ph), probe(g, pv));
                       },
                       rng.uniform({2, 4, 5}));
                 }});
  return out;
}

std::vector<Check> block_checks() {
  return {{"res_block", "res_block", [](Rng& rng) {
             ResBlockParams p = make_res_block({2, 3});
             for (Tensor* t : {&p.conv1.weight, &p.conv2.weight, &p.conv1.bias, &p.norm1.beta}) {
               const Tensor r = rng.uniform(t->shape(), -0.5, 0.5);
               std::copy(r.data().begin(), r.data().end(), t->mutable_data().begin());
             }
             const Tensor pw = rng.uniform({2, 2, 4, 4});
             return finite_diff_check(
                 [&](const Tensor& v) { return probe(res_block(v, p, Phase::kTrain), pw); },
                 rng.uniform({2, 2, 4, 4}, -2.0, 2.0));
           }}};
}

DepthModel tiny_guided(std::uint64_t seed) {
  NetworkConfig c = NetworkConfig::desk_scale(1, 16, 16, 2);
  c.bottleneck_blocks = 1;
  DepthModel g(c, seed);
  g.freeze();
  return g;
}

std::vector<Check> loss_checks(std::uint64_t model_seed) {
  std::vector<Check> out;
  out.push_back({"data_loss", "data_loss", [](Rng& rng) {
                   const Tensor target = rng.uniform({1, 6, 6}, 1.0, 5.0);
                   const Tensor mask = rng.binary({1, 6, 6});
                   const Tensor y = add(target, rng.away_from_zero({1, 6, 6}));
                   return finite_diff_check(
                       [&](const Tensor& v) { return data_loss(v, target, mask); }, y);
                 }});
  out.push_back({"image_gradient_loss", "image_gradient_loss", [](Rng& rng) {
                   const Tensor target = rng.uniform({1, 6, 6}, 1.0, 5.0);
                   return finite_diff_check(
                       [&](const Tensor& v) { return image_gradient_loss(v, target); },
                       rng.uniform({1, 6, 6}, 1.0, 5.0));
                 }});
  const auto guided_check = [model_seed](const char* name, int which) {
    return Check{name, name, [model_seed, which](Rng& rng) {
                   const DepthModel g = tiny_guided(model_seed);
                   const Tensor target = rng.uniform({1, 16, 16}, 1.0, 5.0);
                   const Tensor mask = rng.binary({1, 16, 16});
                   const LayerSet layers = LayerSet::all();
                   const auto f = [&](const Tensor& v) {
                     if (which == 0) return latent_loss(g, v, target, layers);
                     if (which == 1) return feature_gradient_loss(g, v, target, layers);
                     return total_loss(g, v, target, mask, LossWeights{}, layers).total;
                   };
                   return finite_diff_check(f, rng.uniform({1, 16, 16}, 1.0, 5.0));
                 }};
  };
  out.push_back(guided_check("latent_loss", 0));
  out.push_back(guided_check("feature_gradient_loss", 1));
  out.push_back(guided_check("total_loss", 2));
  return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t instance_seed(std::uint64_t base, std::size_t check, std::size_t k) {
  return splitmix64(splitmix64(base) ^ splitmix64((static_cast<std::uint64_t>(check) << 32) | k));
}

}  // namespace

bool GradCheckReport::passed() const { return failures().empty() && !entries.empty(); }

std::vector<const GradCheckEntry*> GradCheckReport::failures() const {
  std::vector<const GradCheckEntry*> out;
  for (const GradCheckEntry& e : entries) {
    if (!e.passed) out.push_back(&e);
  }
  return out;
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json checks = nlohmann::json::array();
  for (const GradCheckEntry& e : entries) {
    checks.push_back({{"name", e.name},
                      {"op", e.op},
                      {"seeds", e.seeds},
                      {"max_rel_error", e.max_rel_error},
                      {"worst_seed", e.worst_seed},
                      {"passed", e.passed}});
  }
  return {{"seed", options.seed},
          {"seeds", options.seeds},
          {"tolerance", options.tolerance},
          {"passed", passed()},
          {"checks", checks}};
}

std::string GradCheckReport::text() const {
  std::string out;
  char buf[160];
  for (const GradCheckEntry& e : entries) {
    std::snprintf(buf, sizeof(buf), "%-34s max rel error %.3e over %zu seeds  %s\n",
                  e.name.c_str(), e.max_rel_error, e.seeds, e.passed ? "PASS" : "FAIL");
    out += buf;
  }
  return out;
}

GradCheckReport run_gradcheck_suite(const GradCheckOptions& options) {
  if (options.seeds == 0) throw ArgumentError("gradcheck: need at least one seed");
  if (!(options.tolerance > 0.0)) throw ArgumentError("gradcheck: tolerance must be positive");
  std::vector<Check> checks;
  for (auto&& group : {conv_checks(), norm_checks(), elementwise_checks(), block_checks(),
                       loss_checks(options.seed)}) {
    checks.insert(checks.end(), group.begin(), group.end());
  }
  GradCheckReport report;
  report.options = options;
  for (std::size_t c = 0; c < checks.size(); ++c) {
    GradCheckEntry e{checks[c].name, checks[c].op, options.seeds, 0.0, 0, true};
    for (std::size_t k = 0; k < options.seeds; ++k) {
      const std::uint64_t seed = instance_seed(options.seed, c, k);
      Rng rng(seed);
      const FiniteDiffResult r = checks[c].run(rng);
      const Real err = std::isnan(r.max_rel_error) ? std::numeric_limits<Real>::infinity() : r.max_rel_error;
      if (k == 0 || err > e.max_rel_error) {
        e.max_rel_error = err;
        e.worst_seed = seed;
      }
    }
    e.passed = e.max_rel_error < options.tolerance;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace latent_depth
