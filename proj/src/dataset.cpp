#include "latent_depth/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include <json.hpp>

#include "latent_depth/image_io.hpp"

namespace latent_depth {

namespace {

// Source coordinate for output index i under half-pixel centres.
Real half_pixel_source(std::size_t i, Real scale) {
  return (static_cast<Real>(i) + 0.5) * scale - 0.5;
}

Tensor resize_bilinear(const Tensor& img, std::size_t th, std::size_t tw) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const Real sy = static_cast<Real>(h) / static_cast<Real>(th);
  const Real sx = static_cast<Real>(w) / static_cast<Real>(tw);
  std::vector<Real> out(c * th * tw);
  const auto src = img.data();
  for (std::size_t i = 0; i < th; ++i) {
    const Real fy = std::clamp(half_pixel_source(i, sy), 0.0, static_cast<Real>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const Real ty = fy - static_cast<Real>(y0);
    for (std::size_t j = 0; j < tw; ++j) {
      const Real fx = std::clamp(half_pixel_source(j, sx), 0.0, static_cast<Real>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const Real tx = fx - static_cast<Real>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const Real* p = src.data() + ch * h * w;
        const Real top = p[y0 * w + x0] + tx * (p[y0 * w + x1] - p[y0 * w + x0]);
        const Real bottom = p[y1 * w + x0] + tx * (p[y1 * w + x1] - p[y1 * w + x0]);
        out[(ch * th + i) * tw + j] = top + ty * (bottom - top);
      }
    }
  }
  return Tensor({c, th, tw}, std::move(out));
}

Tensor resize_nearest(const Tensor& img, std::size_t th, std::size_t tw) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const Real sy = static_cast<Real>(h) / static_cast<Real>(th);
  const Real sx = static_cast<Real>(w) / static_cast<Real>(tw);
  std::vector<Real> out(c * th * tw);
  const auto src = img.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < th; ++i) {
      const auto y =
          std::min(static_cast<std::size_t>((static_cast<Real>(i) + 0.5) * sy), h - 1);
      for (std::size_t j = 0; j < tw; ++j) {
        const auto x =
            std::min(static_cast<std::size_t>((static_cast<Real>(j) + 0.5) * sx), w - 1);
        out[(ch * th + i) * tw + j] = src[(ch * h + y) * w + x];
      }
    }
  }
  return Tensor({c, th, tw}, std::move(out));
}

}  // namespace

void RgbdSample::validate() const {
  if (!rgb.defined() || !depth.defined() || !mask.defined()) {
    throw ArgumentError("RgbdSample: missing tensor");
  }
  if (rgb.rank() != 3 || rgb.dim(0) != 3 || depth.rank() != 3 || depth.dim(0) != 1 ||
      mask.shape() != depth.shape() || rgb.dim(1) != depth.dim(1) || rgb.dim(2) != depth.dim(2)) {
    throw ShapeError("RgbdSample: inconsistent shapes rgb " + shape_string(rgb.shape()) +
                     ", depth " + shape_string(depth.shape()) + ", mask " +
                     shape_string(mask.shape()));
  }
  for (std::size_t i = 0; i < depth.numel(); ++i) {
    const Real m = mask.at(i);
    if (m != 0.0 && m != 1.0) throw ArgumentError("RgbdSample: mask values must be 0 or 1");
    if (m == 1.0 && !(depth.at(i) >= 0.0)) {
      throw ArgumentError("RgbdSample: negative or NaN depth at a valid pixel");
    }
  }
}

RgbdSample load_rgbd_pair(const std::filesystem::path& rgb_path,
                          const std::filesystem::path& depth_path) {
  RgbdSample s;
  s.rgb = read_ppm(rgb_path);
  const Gray16 raw = read_pgm16(depth_path);
  if (raw.height != s.rgb.dim(1) || raw.width != s.rgb.dim(2)) {
    throw ImageFormatError(
        ImageFormatError::Kind::kDimensionMismatch,
        rgb_path.string() + " is " + std::to_string(s.rgb.dim(2)) + "x" +
            std::to_string(s.rgb.dim(1)) + " but " + depth_path.string() + " is " +
            std::to_string(raw.width) + "x" + std::to_string(raw.height));
  }
  s.depth = depth_from_millimetres(raw);
  s.mask = mask_from_millimetres(raw);
  return s;
}

void save_rgbd_pair(const RgbdSample& sample, const std::filesystem::path& rgb_path,
                    const std::filesystem::path& depth_path) {
  sample.validate();
  write_ppm(rgb_path, sample.rgb);
  write_pgm16(depth_path, depth_to_millimetres(sample.depth, &sample.mask));
}

RgbdSample preprocess(const RgbdSample& sample, std::size_t target_h, std::size_t target_w) {
  sample.validate();
  if (target_h == 0 || target_w == 0 || target_h % 16 != 0 || target_w % 16 != 0) {
    throw ArgumentError("preprocess: target " + std::to_string(target_h) + "x" +
                        std::to_string(target_w) + " must be positive multiples of 16");
  }
  if (target_h > sample.height() || target_w > sample.width()) {
    throw ArgumentError("preprocess: target " + std::to_string(target_h) + "x" +
                        std::to_string(target_w) + " exceeds source " +
                        std::to_string(sample.height()) + "x" + std::to_string(sample.width()));
  }
  RgbdSample out;
  out.scene_id = sample.scene_id;
  out.rgb = resize_bilinear(sample.rgb, target_h, target_w);
  out.depth = resize_nearest(sample.depth, target_h, target_w);
  out.mask = resize_nearest(sample.mask, target_h, target_w);
  return out;
}

std::string to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "test") return Split::kTest;
  throw ArgumentError("unknown split '" + text + "' (expected train or test)");
}

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].scene.empty()) {
      throw ArgumentError("manifest record " + std::to_string(i) + " has an empty scene id");
    }
    if (!seen.insert(records[i].rgb).second) {
      throw ArgumentError("manifest lists " + records[i].rgb + " more than once");
    }
  }
}

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == split) out.push_back(i);
  }
  return out;
}

std::filesystem::path DatasetManifest::resolve(const std::string& relative) const {
  const std::filesystem::path p(relative);
  return p.is_absolute() ? p : base_dir / p;
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.base_dir = path.parent_path();
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    for (const auto& r : j.at("records")) {
      m.records.push_back({r.at("rgb").get<std::string>(), r.at("depth").get<std::string>(),
                           r.at("scene").get<std::string>(),
                           parse_split(r.at("split").get<std::string>())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  } catch (const ArgumentError& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
  try {
    m.validate();
  } catch (const ArgumentError& e) {
    throw IoError("invalid manifest " + path.string() + ": " + e.what());
  }
  for (const ManifestRecord& r : m.records) {
    for (const std::string& file : {r.rgb, r.depth}) {
      if (!std::filesystem::exists(m.resolve(file))) {
        throw IoError("manifest " + path.string() + " references missing file " + file);
      }
    }
  }
  return m;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  validate();
  nlohmann::json records_json = nlohmann::json::array();
  for (const ManifestRecord& r : records) {
    records_json.push_back(
        {{"rgb", r.rgb}, {"depth", r.depth}, {"scene", r.scene}, {"split", to_string(r.split)}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << nlohmann::json{{"records", records_json}}.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<std::size_t> rebalance_scenes(const DatasetManifest& manifest,
                                          std::size_t per_scene_target, std::uint64_t seed,
                                          Draws draws) {
  if (per_scene_target == 0) throw ArgumentError("rebalance_scenes: target must be >= 1");
  manifest.validate();
  std::map<std::string, std::vector<std::size_t>> scenes;  // ordered by scene id
  for (std::size_t i : manifest.indices(Split::kTrain)) {
    scenes[manifest.records[i].scene].push_back(i);
  }
  if (scenes.empty()) throw ArgumentError("rebalance_scenes: train split is empty");

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> plan;
  plan.reserve(scenes.size() * per_scene_target);
  for (auto& [scene, members] : scenes) {
    if (draws == Draws::kUnique) {
      if (per_scene_target > members.size()) {
        throw ArgumentError("rebalance_scenes: scene " + scene + " has " +
                            std::to_string(members.size()) + " images, cannot draw " +
                            std::to_string(per_scene_target) + " unique");
      }
      std::shuffle(members.begin(), members.end(), rng);
      plan.insert(plan.end(), members.begin(), members.begin() + per_scene_target);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
      for (std::size_t k = 0; k < per_scene_target; ++k) plan.push_back(members[pick(rng)]);
    }
  }
  std::shuffle(plan.begin(), plan.end(), rng);
  return plan;
}

std::vector<RgbdSample> load_split(const DatasetManifest& manifest, Split split,
                                   std::optional<std::pair<std::size_t, std::size_t>> target) {
  std::vector<RgbdSample> out;
  for (std::size_t i : manifest.indices(split)) {
    const ManifestRecord& r = manifest.records[i];
    RgbdSample s = load_rgbd_pair(manifest.resolve(r.rgb), manifest.resolve(r.depth));
    s.scene_id = r.scene;
    if (target && (target->first != s.height() || target->second != s.width())) {
      s = preprocess(s, target->first, target->second);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace latent_depth
