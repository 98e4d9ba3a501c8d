#include <cmath>
#include <limits>

#include "doctest.h"
#include "latent_depth/gradcheck.hpp"
#include "latent_depth/losses.hpp"
#include "test_util.hpp"

using namespace latent_depth;
using latent_depth::test::random_tensor;

namespace {

Tensor map2x2(Real a, Real b, Real c, Real d) { return Tensor({1, 2, 2}, {a, b, c, d}); }

Tensor ones_like(const Tensor& t) { return Tensor(t.shape(), 1.0); }

DepthModel tiny_guided(std::uint64_t seed) {
  NetworkConfig c = NetworkConfig::desk_scale(1, 16, 16, 2);
  c.bottleneck_blocks = 1;
  DepthModel g(c, seed);
  g.freeze();
  return g;
}

bool close(Real a, Real b, Real rel) {
  return std::abs(a - b) <= rel * std::max({std::abs(a), std::abs(b), 1.0});
}

}  // namespace

TEST_CASE("spatial_gradients examples") {
  auto [h, v] = spatial_gradients(map2x2(0, 1, 2, 3));
  CHECK(std::vector<Real>(h.data().begin(), h.data().end()) == std::vector<Real>{1, 0, 1, 0});
  CHECK(std::vector<Real>(v.data().begin(), v.data().end()) == std::vector<Real>{2, 2, 0, 0});

  auto [hc, vc] = spatial_gradients(Tensor({1, 3, 4}, 2.5));
  for (Real x : hc.data()) CHECK(x == 0.0);
  for (Real x : vc.data()) CHECK(x == 0.0);

  CHECK_THROWS_AS(spatial_gradients(Tensor({1, 1, 4}, 1.0)), ShapeError);
  auto [hs, vs] = spatial_gradients(Tensor({2, 1, 3}, {0, 1, 3, 5, 5, 5}), true);
  CHECK(std::vector<Real>(hs.data().begin(), hs.data().end()) ==
        std::vector<Real>{1, 2, 0, 0, 0, 0});
  for (Real x : vs.data()) CHECK(x == 0.0);
}

TEST_CASE("data_loss examples") {
  const Tensor y({1, 1, 2}, {0, 3});
  const Tensor t({1, 1, 2}, {4, 3});
  CHECK(data_loss(y, t, ones_like(y)).item() == 2.0);
  CHECK(data_loss(y, y, ones_like(y)).item() == 0.0);
  CHECK(data_loss(y, t, Tensor({1, 1, 2}, {0, 1})).item() == 0.0);
  CHECK_THROWS_AS(data_loss(y, t, Tensor({1, 1, 2}, 0.0)), ArgumentError);
  CHECK_THROWS_AS(data_loss(y, t, Tensor({1, 1, 2}, 0.5)), ArgumentError);
  CHECK_THROWS_AS(data_loss(y, Tensor({1, 2, 1}, 0.0), ones_like(y)), ShapeError);
}

TEST_CASE("latent loss with stub features") {
  const FeatureList a{Tensor({2, 1, 1}, {1, 2})};
  const FeatureList zero{Tensor({2, 1, 1}, 0.0)};
  CHECK(latent_loss_from_features(a, zero).item() == 2.5);
  CHECK(latent_loss_from_features(a, a).item() == 0.0);

  // (1/4) * ((1 + 4 + 9 + 16) + 0) / 2 over a 2-channel 2x2 layer.
  const FeatureList b{Tensor({2, 2, 2}, {1, 2, 3, 4, 0, 0, 0, 0})};
  const FeatureList zb{Tensor({2, 2, 2}, 0.0)};
  CHECK(latent_loss_from_features(b, zb).item() == 30.0 / 8.0);

  const FeatureList both{a[0], b[0]};
  const FeatureList both_zero{zero[0], zb[0]};
  CHECK(latent_loss_from_features(both, both_zero).item() == 2.5 + 30.0 / 8.0);

  CHECK_THROWS_AS(latent_loss_from_features({}, {}), ArgumentError);
  CHECK_THROWS_AS(latent_loss_from_features(a, zb), ShapeError);
}

TEST_CASE("image gradient loss examples") {
  const Tensor y = map2x2(0, 1, 2, 3);
  const Tensor zeros({1, 2, 2}, 0.0);
  CHECK(image_gradient_loss(y, zeros).item() == 1.5);
  CHECK(image_gradient_loss(y, y).item() == 0.0);
  CHECK(image_gradient_loss(Tensor({1, 4, 4}, 1.0), Tensor({1, 4, 4}, 7.0)).item() == 0.0);
  CHECK_THROWS_AS(image_gradient_loss(y, Tensor({1, 2, 3}, 0.0)), ShapeError);

  // A batch of two copies averages to the same value.
  const Tensor batch = stack(std::vector<Tensor>{y, y});
  CHECK(image_gradient_loss(batch, Tensor(batch.shape(), 0.0)).item() == 1.5);
}

TEST_CASE("image gradient loss is invariant to a constant offset") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor y = random_tensor({1, 8, 8}, seed, 0.0, 5.0);
    const Tensor t = random_tensor({1, 8, 8}, seed + 100, 0.0, 5.0);
    const Real c = 0.37 * static_cast<Real>(seed + 1);
    const Real base = image_gradient_loss(y, t).item();
    const Real shifted = image_gradient_loss(add(y, Tensor(y.shape(), c)),
                                             add(t, Tensor(t.shape(), c)))
                             .item();
    CHECK(close(base, shifted, 64 * std::numeric_limits<Real>::epsilon()));
  }
}

TEST_CASE("feature gradient loss with stub features") {
  const FeatureList a{map2x2(0, 1, 2, 3)};
  const FeatureList zero{Tensor({1, 2, 2}, 0.0)};
  CHECK(feature_gradient_loss_from_features(a, zero).item() == 1.5);
  CHECK(feature_gradient_loss_from_features(a, a).item() == 0.0);

  // Identity extractor reproduces the image loss.
  const FeatureExtractor identity = [](const Tensor& y) { return FeatureList{y}; };
  const Tensor y = random_tensor({1, 6, 6}, 3);
  const Tensor t = random_tensor({1, 6, 6}, 4);
  CHECK(feature_gradient_loss_from_features(identity(y), identity(t)).item() ==
        image_gradient_loss(y, t).item());

  const FeatureList two{a[0], a[0]};
  const FeatureList two_zero{zero[0], zero[0]};
  CHECK(feature_gradient_loss_from_features(two, two_zero).item() == 3.0);
}

TEST_CASE("guided losses are symmetric, zero on identity and additive over layers") {
  const DepthModel g = tiny_guided(4);
  const Tensor y = random_tensor({1, 16, 16}, 1, 1.0, 5.0);
  const Tensor t = random_tensor({1, 16, 16}, 2, 1.0, 5.0);
  const LayerSet all = LayerSet::all();

  CHECK(latent_loss(g, y, y, all).item() == 0.0);
  CHECK(feature_gradient_loss(g, y, y, all).item() == 0.0);
  CHECK(latent_loss(g, y, t, all).item() == latent_loss(g, t, y, all).item());
  CHECK(feature_gradient_loss(g, y, t, all).item() == feature_gradient_loss(g, t, y, all).item());
  CHECK(latent_loss(g, y, t, all).item() > 0.0);

  const LayerSet lo({0, 1}), hi({2, 3, 4});
  CHECK(close(latent_loss(g, y, t, all).item(),
              latent_loss(g, y, t, lo).item() + latent_loss(g, y, t, hi).item(), 1e-13));
  CHECK(close(feature_gradient_loss(g, y, t, all).item(),
              feature_gradient_loss(g, y, t, lo).item() +
                  feature_gradient_loss(g, y, t, hi).item(),
              1e-13));
}

TEST_CASE("total_loss composition") {
  const DepthModel g = tiny_guided(5);
  const Tensor y = random_tensor({2, 1, 16, 16}, 3, 1.0, 5.0);
  const Tensor t = random_tensor({2, 1, 16, 16}, 4, 1.0, 5.0);
  const Tensor mask = ones_like(y);

  const LossReport same = total_loss(g, y, y, mask, {}, LayerSet::all()).report();
  CHECK(same.data == 0.0);
  CHECK(same.latent == 0.0);
  CHECK(same.grad_image == 0.0);
  CHECK(same.grad_feature == 0.0);
  CHECK(same.total == 0.0);

  const LossWeights data_only{1.0, 0.0, 0.0, 0.0};
  const LossTerms d = total_loss(g, y, t, mask, data_only, LayerSet::all());
  CHECK(d.total.item() == data_loss(y, t, mask).item());
  CHECK(d.latent.item() > 0.0);

  const LossWeights w{0.5, 2.0, 1.25, 0.75};
  const LossReport r = total_loss(g, y, t, mask, w, LayerSet::all()).report();
  CHECK(r.total == w.data * r.data + w.latent * r.latent + w.grad_image * r.grad_image +
                       w.grad_feature * r.grad_feature);
  CHECK(r.latent == latent_loss(g, y, t, LayerSet::all()).item());
  CHECK(r.grad_feature == feature_gradient_loss(g, y, t, LayerSet::all()).item());
  CHECK(r.grad_image == image_gradient_loss(y, t).item());

  CHECK_THROWS_AS(total_loss(g, y, t, mask, {0, 0, 0, 0}, LayerSet::all()), ArgumentError);
  CHECK_THROWS_AS(total_loss(g, y, t, mask, {-1, 1, 1, 1}, LayerSet::all()), ArgumentError);
}

TEST_CASE("zero-weight terms stay out of the graph") {
  const DepthModel g = tiny_guided(6);
  Tensor y = random_tensor({1, 16, 16}, 8, 1.0, 5.0);
  y.set_requires_grad(true);
  const Tensor t = random_tensor({1, 16, 16}, 9, 1.0, 5.0);
  const LossTerms terms = total_loss(g, y, t, ones_like(y), {1, 0, 1, 0}, LayerSet::all());
  CHECK(terms.data.requires_grad());
  CHECK_FALSE(terms.latent.requires_grad());
  CHECK_FALSE(terms.grad_feature.requires_grad());
  CHECK(terms.total.requires_grad());
}

TEST_CASE("total_loss gradient matches finite differences") {
  const DepthModel g = tiny_guided(7);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor y0 = random_tensor({1, 16, 16}, 20 + seed, 1.0, 5.0);
    const Tensor t = random_tensor({1, 16, 16}, 40 + seed, 1.0, 5.0);
    Tensor mask = ones_like(t);
    mask.mutable_data()[seed] = 0.0;
    const auto f = [&](const Tensor& y) {
      return total_loss(g, y, t, mask, {}, LayerSet::all()).total;
    };
    const FiniteDiffResult r = finite_diff_check(f, y0);
    CHECK(r.max_rel_error < 1e-4);
  }
  for (Tensor p : g.parameters()) CHECK_FALSE(p.has_grad());
}

TEST_CASE("loss report CSV") {
  CHECK(LossReport::csv_header() == "step,data,latent,grad_image,grad_feature,total");
  const LossReport r{0.5, 0.25, 1.0, 0.125, 1.875};
  CHECK(r.csv_row(3) == "3,0.5,0.25,1,0.125,1.875");
  const LossReport third{1.0 / 3.0, 0, 0, 0, 1.0 / 3.0};
  const std::string row = third.csv_row(0);
  CHECK(std::stod(row.substr(2, row.find(',', 2) - 2)) == 1.0 / 3.0);
}
