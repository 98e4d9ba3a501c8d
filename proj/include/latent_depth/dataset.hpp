#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "latent_depth/tensor.hpp"

namespace latent_depth {

struct RgbdSample {
  Tensor rgb;    // 3 x H x W in [0, 1]
  Tensor depth;  // 1 x H x W metres
  Tensor mask;   // 1 x H x W, 1 = valid
  std::string scene_id;

  std::size_t height() const { return depth.dim(1); }
  std::size_t width() const { return depth.dim(2); }
  void validate() const;
};

// PPM colour + 16-bit millimetre PGM depth. Mask = raw depth > 0.
RgbdSample load_rgbd_pair(const std::filesystem::path& rgb_path,
                          const std::filesystem::path& depth_path);
// Inverse of load_rgbd_pair; masked-out pixels are written as 0 mm.
void save_rgbd_pair(const RgbdSample& sample, const std::filesystem::path& rgb_path,
                    const std::filesystem::path& depth_path);

// Colour: bilinear with half-pixel centres. Depth and mask: nearest neighbour.
// Targets must be multiples of 16 and no larger than the source.
RgbdSample preprocess(const RgbdSample& sample, std::size_t target_h, std::size_t target_w);

enum class Split { kTrain, kTest };
std::string to_string(Split split);
Split parse_split(const std::string& text);

struct ManifestRecord {
  std::string rgb;    // relative to the manifest directory unless absolute
  std::string depth;
  std::string scene;
  Split split = Split::kTrain;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::filesystem::path base_dir;

  // Checks nonempty scene ids and unique colour paths.
  void validate() const;
  std::vector<std::size_t> indices(Split split) const;
  std::filesystem::path resolve(const std::string& relative) const;

  // {"records": [{"rgb", "depth", "scene", "split"}]}. Load also checks that
  // every referenced file exists.
  static DatasetManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

enum class Draws { kWithReplacement, kUnique };

// Indices into manifest.records (train split) in which every scene appears
// exactly per_scene_target times, shuffled. Deterministic in (manifest, seed).
std::vector<std::size_t> rebalance_scenes(const DatasetManifest& manifest,
                                          std::size_t per_scene_target, std::uint64_t seed,
                                          Draws draws = Draws::kWithReplacement);

// Loads one split, resizing each pair to target dims when given.
std::vector<RgbdSample> load_split(const DatasetManifest& manifest, Split split,
                                   std::optional<std::pair<std::size_t, std::size_t>> target = {});

}  // namespace latent_depth
