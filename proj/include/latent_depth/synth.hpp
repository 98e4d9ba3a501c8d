#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "latent_depth/dataset.hpp"

namespace latent_depth {

// Axis-aligned fronto-parallel rectangle at constant depth.
struct SceneObject {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 1;
  std::size_t width = 1;
  Real depth = 1.0;              // metres
  std::array<Real, 3> albedo{};  // zero-mean chroma offsets in [-1, 1]
};

// Background plane whose depth grows linearly from the bottom row to the top
// row, plus occluding objects. The nearest surface wins at every pixel.
struct SceneLayout {
  std::size_t height = 32;
  std::size_t width = 32;
  Real background_bottom = 2.5;  // depth of the bottom row
  Real background_top = 5.0;     // depth of the top row
  std::array<Real, 3> background_albedo{};
  std::vector<SceneObject> objects;

  Real background_depth(std::size_t row) const;
};

// Shading range: brightness falls linearly from kNearDepth to kFarDepth.
inline constexpr Real kNearDepth = 1.0;
inline constexpr Real kFarDepth = 5.0;

SceneLayout random_layout(std::uint64_t seed, std::size_t h, std::size_t w,
                          std::size_t n_objects);

// Depth is stored at millimetre precision and colour at 8-bit precision, so a
// rendered sample survives save/load unchanged. Mask is all valid.
RgbdSample render_scene(const SceneLayout& layout);

RgbdSample synth_scene(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t n_objects);

struct SynthOptions {
  std::uint64_t seed = 7;
  std::size_t count = 64;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t objects = 3;
  Real test_fraction = 0.25;  // the last round(count * fraction) scenes form the test split
};

// Scene i uses a seed derived from (options.seed, i); scene ids group every
// eight frames.
std::vector<RgbdSample> synth_dataset(const SynthOptions& options,
                                      std::vector<Split>* splits = nullptr);

// Writes rgb_XXXX.ppm / depth_XXXX.pgm pairs and manifest.json into dir.
DatasetManifest write_synth_dataset(const SynthOptions& options, const std::filesystem::path& dir);

}  // namespace latent_depth
