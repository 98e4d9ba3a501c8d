#include "latent_depth/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "latent_depth/errors.hpp"

namespace latent_depth {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::array<Real, 3> random_albedo(std::mt19937_64& rng) {
  std::uniform_real_distribution<Real> u(-0.75, 0.75);
  std::array<Real, 3> a{u(rng), u(rng), u(rng)};
  const Real mean = (a[0] + a[1] + a[2]) / 3.0;
  for (Real& v : a) v -= mean;
  return a;
}

void check_dims(std::size_t h, std::size_t w, const char* what) {
  if (h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0) {
    throw ArgumentError(std::string(what) + ": size " + std::to_string(h) + "x" +
                        std::to_string(w) + " must be positive multiples of 16");
  }
}

Real quantize(Real v, Real levels) { return std::round(v * levels) / levels; }

std::string numbered(const char* prefix, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04zu.%s", prefix, i, ext);
  return buf;
}

}  // namespace

Real SceneLayout::background_depth(std::size_t row) const {
  if (height <= 1) return background_bottom;
  const Real t = static_cast<Real>(row) / static_cast<Real>(height - 1);
  return background_top + t * (background_bottom - background_top);
}

SceneLayout random_layout(std::uint64_t seed, std::size_t h, std::size_t w,
                          std::size_t n_objects) {
  check_dims(h, w, "random_layout");
  if (n_objects == 0) throw ArgumentError("random_layout: need at least one object");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Real> bottom(2.5, 3.0), top(4.5, 5.0), depth(1.0, 2.3);
  SceneLayout layout;
  layout.height = h;
  layout.width = w;
  layout.background_bottom = bottom(rng);
  layout.background_top = top(rng);
  layout.background_albedo = random_albedo(rng);
  for (std::size_t k = 0; k < n_objects; ++k) {
    SceneObject o;
    o.height = std::uniform_int_distribution<std::size_t>(h / 8, h / 2)(rng);
    o.width = std::uniform_int_distribution<std::size_t>(w / 8, w / 2)(rng);
    o.top = std::uniform_int_distribution<std::size_t>(0, h - o.height)(rng);
    o.left = std::uniform_int_distribution<std::size_t>(0, w - o.width)(rng);
    o.depth = depth(rng);
    o.albedo = random_albedo(rng);
    layout.objects.push_back(o);
  }
  return layout;
}

RgbdSample render_scene(const SceneLayout& layout) {
  const std::size_t h = layout.height, w = layout.width, plane = h * w;
  if (h == 0 || w == 0) throw ArgumentError("render_scene: empty layout");
  std::vector<Real> depth(plane), rgb(3 * plane);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      Real d = layout.background_depth(i);
      const std::array<Real, 3>* albedo = &layout.background_albedo;
      for (const SceneObject& o : layout.objects) {
        const bool covers =
            i >= o.top && i < o.top + o.height && j >= o.left && j < o.left + o.width;
        if (covers && o.depth < d) {
          d = o.depth;
          albedo = &o.albedo;
        }
      }
      d = quantize(d, 1000.0);
      depth[i * w + j] = d;
      const Real shade = std::clamp((kFarDepth - d) / (kFarDepth - kNearDepth), 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c) {
        const Real v = std::clamp(0.1 + 0.8 * shade + 0.1 * (*albedo)[c], 0.0, 1.0);
        rgb[c * plane + i * w + j] = quantize(v, 255.0);
      }
    }
  }
  RgbdSample s;
  s.rgb = Tensor({3, h, w}, std::move(rgb));
  s.depth = Tensor({1, h, w}, std::move(depth));
  s.mask = Tensor({1, h, w}, 1.0);
  return s;
}

RgbdSample synth_scene(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t n_objects) {
  return render_scene(random_layout(seed, h, w, n_objects));
}

std::vector<RgbdSample> synth_dataset(const SynthOptions& options, std::vector<Split>* splits) {
  if (options.count == 0) throw ArgumentError("synth_dataset: count must be >= 1");
  if (!(options.test_fraction >= 0.0 && options.test_fraction < 1.0)) {
    throw ArgumentError("synth_dataset: test fraction must be in [0, 1)");
  }
  const auto n_test = static_cast<std::size_t>(
      std::lround(static_cast<Real>(options.count) * options.test_fraction));
  std::vector<RgbdSample> out;
  if (splits != nullptr) splits->clear();
  for (std::size_t i = 0; i < options.count; ++i) {
    RgbdSample s = synth_scene(splitmix64(options.seed ^ splitmix64(i)), options.height,
                               options.width, options.objects);
    s.scene_id = "synth-" + std::to_string(i / 8);
    out.push_back(std::move(s));
    if (splits != nullptr) {
      splits->push_back(i + n_test >= options.count ? Split::kTest : Split::kTrain);
    }
  }
  return out;
}

DatasetManifest write_synth_dataset(const SynthOptions& options, const std::filesystem::path& dir) {
  std::vector<Split> splits;
  const std::vector<RgbdSample> samples = synth_dataset(options, &splits);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  DatasetManifest manifest;
  manifest.base_dir = dir;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ManifestRecord r{numbered("rgb", i, "ppm"), numbered("depth", i, "pgm"), samples[i].scene_id,
                     splits[i]};
    save_rgbd_pair(samples[i], dir / r.rgb, dir / r.depth);
    manifest.records.push_back(std::move(r));
  }
  manifest.save(dir / "manifest.json");
  return manifest;
}

}  // namespace latent_depth
