#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "latent_depth/image_io.hpp"
#include "latent_depth/synth.hpp"
#include "test_util.hpp"

using namespace latent_depth;
using latent_depth::test::bit_equal;

namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("latent_depth_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

// 8-bit colour image with values k / 255.
Tensor patterned_rgb(std::size_t h, std::size_t w) {
  Tensor t({3, h, w}, 0.0);
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<Real>((i * 37 + 11) % 256) / 255.0;
  return t;
}

Gray16 patterned_depth(std::size_t h, std::size_t w) {
  Gray16 g{h, w, std::vector<std::uint16_t>(h * w)};
  for (std::size_t i = 0; i < g.pixels.size(); ++i) {
    g.pixels[i] = static_cast<std::uint16_t>((i * 7919) % 65536);
  }
  return g;
}

ImageFormatError::Kind load_error_kind(const fs::path& rgb, const fs::path& depth) {
  try {
    load_rgbd_pair(rgb, depth);
  } catch (const ImageFormatError& e) {
    return e.kind();
  }
  FAIL("expected an ImageFormatError");
  return ImageFormatError::Kind::kMalformedHeader;
}

DatasetManifest two_scene_manifest(std::size_t a, std::size_t b) {
  DatasetManifest m;
  for (std::size_t i = 0; i < a + b; ++i) {
    m.records.push_back({"rgb" + std::to_string(i), "d" + std::to_string(i),
                         i < a ? "kitchen" : "office", Split::kTrain});
  }
  return m;
}

}  // namespace

TEST_CASE("PPM and PGM round-trips are bit-exact") {
  const fs::path dir = fresh_dir("roundtrip");
  const Tensor rgb = patterned_rgb(5, 7);
  write_ppm(dir / "a.ppm", rgb);
  const Tensor back = read_ppm(dir / "a.ppm");
  CHECK(bit_equal(back, rgb));
  write_ppm(dir / "b.ppm", back);
  CHECK(slurp(dir / "a.ppm") == slurp(dir / "b.ppm"));

  const Gray16 depth = patterned_depth(5, 7);
  write_pgm16(dir / "a.pgm", depth);
  const Gray16 dback = read_pgm16(dir / "a.pgm");
  CHECK(dback.pixels == depth.pixels);
  CHECK(dback.height == 5);
  CHECK(dback.width == 7);
  write_pgm16(dir / "b.pgm", dback);
  CHECK(slurp(dir / "a.pgm") == slurp(dir / "b.pgm"));
}

TEST_CASE("headers with comments parse") {
  const fs::path dir = fresh_dir("comments");
  const std::string payload{'\x01', '\x02', '\x03', '\xff', '\x00', '\x80'};
  spit(dir / "c.ppm", "P6\n# made by hand\n2 1\n# max\n255\n" + payload);
  const Tensor t = read_ppm(dir / "c.ppm");
  CHECK(t.shape() == Shape{3, 1, 2});
  CHECK(t.at(0) == 1.0 / 255.0);
  CHECK(t.at(1) == 1.0);
  CHECK(t.at(5) == 128.0 / 255.0);
}

TEST_CASE("load_rgbd_pair units and masks") {
  const fs::path dir = fresh_dir("units");
  write_ppm(dir / "rgb.ppm", patterned_rgb(4, 4));
  Gray16 raw{4, 4, std::vector<std::uint16_t>(16, 0)};
  write_pgm16(dir / "zero.pgm", raw);
  const RgbdSample empty = load_rgbd_pair(dir / "rgb.ppm", dir / "zero.pgm");
  for (Real m : empty.mask.data()) CHECK(m == 0.0);

  raw.pixels[5] = 1500;
  write_pgm16(dir / "one.pgm", raw);
  const RgbdSample one = load_rgbd_pair(dir / "rgb.ppm", dir / "one.pgm");
  CHECK(one.depth.at(5) == 1.5);
  CHECK(one.mask.at(5) == 1.0);
  CHECK(one.mask.at(4) == 0.0);

  write_ppm(dir / "big.ppm", patterned_rgb(480, 640));
  write_pgm16(dir / "big.pgm", patterned_depth(480, 640));
  const RgbdSample big = load_rgbd_pair(dir / "big.ppm", dir / "big.pgm");
  CHECK(big.rgb.shape() == Shape{3, 480, 640});
  CHECK(big.depth.shape() == Shape{1, 480, 640});
  CHECK(big.mask.shape() == Shape{1, 480, 640});
}

TEST_CASE("load_rgbd_pair error kinds are distinct") {
  using Kind = ImageFormatError::Kind;
  const fs::path dir = fresh_dir("errors");
  write_ppm(dir / "rgb.ppm", patterned_rgb(4, 4));
  write_pgm16(dir / "d.pgm", patterned_depth(4, 4));
  write_pgm16(dir / "wide.pgm", patterned_depth(4, 5));
  CHECK(load_error_kind(dir / "rgb.ppm", dir / "wide.pgm") == Kind::kDimensionMismatch);

  const std::string good = slurp(dir / "d.pgm");
  spit(dir / "short.pgm", good.substr(0, good.size() - 3));
  CHECK(load_error_kind(dir / "rgb.ppm", dir / "short.pgm") == Kind::kTruncatedPayload);

  spit(dir / "magic.pgm", "P2\n4 4\n65535\n" + std::string(32, '\0'));
  CHECK(load_error_kind(dir / "rgb.ppm", dir / "magic.pgm") == Kind::kMalformedHeader);
  spit(dir / "eight.pgm", "P5\n4 4\n255\n" + std::string(16, '\0'));
  CHECK(load_error_kind(dir / "rgb.ppm", dir / "eight.pgm") == Kind::kMalformedHeader);
  spit(dir / "nodims.ppm", "P6\nfour 4\n255\n");
  CHECK(load_error_kind(dir / "nodims.ppm", dir / "d.pgm") == Kind::kMalformedHeader);
  spit(dir / "maxval.ppm", "P6\n4 4\n65535\n" + std::string(96, '\0'));
  CHECK(load_error_kind(dir / "maxval.ppm", dir / "d.pgm") == Kind::kMalformedHeader);

  CHECK_THROWS_AS(load_rgbd_pair(dir / "missing.ppm", dir / "d.pgm"), IoError);
}

TEST_CASE("save_rgbd_pair writes masked pixels as invalid") {
  const fs::path dir = fresh_dir("save");
  RgbdSample s = synth_scene(3, 16, 16, 2);
  s.mask.mutable_data()[7] = 0.0;
  save_rgbd_pair(s, dir / "a.ppm", dir / "a.pgm");
  const RgbdSample back = load_rgbd_pair(dir / "a.ppm", dir / "a.pgm");
  CHECK(bit_equal(back.rgb, s.rgb));
  CHECK(bit_equal(back.mask, s.mask));
  CHECK(back.depth.at(7) == 0.0);
  CHECK(back.depth.at(8) == s.depth.at(8));
}

TEST_CASE("preprocess resizing") {
  RgbdSample s;
  s.rgb = patterned_rgb(480, 640);
  s.depth = depth_from_millimetres(patterned_depth(480, 640));
  s.mask = mask_from_millimetres(patterned_depth(480, 640));
  s.scene_id = "room";

  const RgbdSample small = preprocess(s, 240, 320);
  CHECK(small.rgb.shape() == Shape{3, 240, 320});
  CHECK(small.depth.shape() == Shape{1, 240, 320});
  CHECK(small.scene_id == "room");

  // Nearest neighbour never invents depth values and keeps mask semantics.
  const std::set<Real> source(s.depth.data().begin(), s.depth.data().end());
  for (std::size_t i = 0; i < small.depth.numel(); ++i) {
    CHECK(source.count(small.depth.at(i)) == 1);
    CHECK(small.mask.at(i) == (small.depth.at(i) > 0.0 ? 1.0 : 0.0));
  }

  // Exact 2x downscale samples pixel (2i+1, 2j+1) for depth and averages 2x2 blocks for colour.
  const std::size_t i = 17, j = 33;
  CHECK(small.depth.at(i * 320 + j) == s.depth.at((2 * i + 1) * 640 + 2 * j + 1));
  const auto px = [&](std::size_t y, std::size_t x) { return s.rgb.at(y * 640 + x); };
  const Real top = px(2 * i, 2 * j) + 0.5 * (px(2 * i, 2 * j + 1) - px(2 * i, 2 * j));
  const Real bottom =
      px(2 * i + 1, 2 * j) + 0.5 * (px(2 * i + 1, 2 * j + 1) - px(2 * i + 1, 2 * j));
  CHECK(small.rgb.at(i * 320 + j) == top + 0.5 * (bottom - top));

  const RgbdSample same = preprocess(s, 480, 640);
  CHECK(bit_equal(same.rgb, s.rgb));
  CHECK(bit_equal(same.depth, s.depth));
  CHECK(bit_equal(same.mask, s.mask));

  CHECK_THROWS_AS(preprocess(s, 496, 640), ArgumentError);
  CHECK_THROWS_AS(preprocess(s, 240, 310), ArgumentError);
}

TEST_CASE("rebalance_scenes counts") {
  const DatasetManifest m = two_scene_manifest(10, 1000);
  const auto plan = rebalance_scenes(m, 100, 5);
  CHECK(plan.size() == 200);
  std::map<std::string, std::size_t> counts;
  for (std::size_t i : plan) ++counts[m.records[i].scene];
  CHECK(counts["kitchen"] == 100);
  CHECK(counts["office"] == 100);
  CHECK(rebalance_scenes(m, 100, 5) == plan);
  CHECK(rebalance_scenes(m, 100, 6) != plan);

  const DatasetManifest single = two_scene_manifest(7, 0);
  CHECK(rebalance_scenes(single, 25, 1).size() == 25);

  const DatasetManifest even = two_scene_manifest(6, 6);
  auto perm = rebalance_scenes(even, 6, 2, Draws::kUnique);
  std::sort(perm.begin(), perm.end());
  std::vector<std::size_t> all(12);
  for (std::size_t k = 0; k < 12; ++k) all[k] = k;
  CHECK(perm == all);

  CHECK_THROWS_AS(rebalance_scenes(even, 7, 2, Draws::kUnique), ArgumentError);
  CHECK_THROWS_AS(rebalance_scenes(even, 0, 2), ArgumentError);
  DatasetManifest test_only = even;
  for (ManifestRecord& r : test_only.records) r.split = Split::kTest;
  CHECK_THROWS_AS(rebalance_scenes(test_only, 3, 2), ArgumentError);
  DatasetManifest unnamed = even;
  unnamed.records[3].scene.clear();
  CHECK_THROWS_AS(rebalance_scenes(unnamed, 3, 2), ArgumentError);
}

TEST_CASE("manifest save and load") {
  const fs::path dir = fresh_dir("manifest");
  SynthOptions opt;
  opt.count = 8;
  opt.height = 16;
  opt.width = 16;
  const DatasetManifest written = write_synth_dataset(opt, dir);
  const DatasetManifest m = DatasetManifest::load(dir / "manifest.json");
  CHECK(m.records.size() == 8);
  CHECK(m.indices(Split::kTest).size() == 2);
  CHECK(m.records[3].rgb == written.records[3].rgb);
  CHECK(m.records[3].scene == "synth-0");

  fs::remove(dir / m.records[2].depth);
  CHECK_THROWS_AS(DatasetManifest::load(dir / "manifest.json"), IoError);

  spit(dir / "bad.json", "{\"records\": [{\"rgb\": 1}]}");
  CHECK_THROWS_AS(DatasetManifest::load(dir / "bad.json"), IoError);

  DatasetManifest dup = written;
  dup.records[1].rgb = dup.records[0].rgb;
  CHECK_THROWS_AS(dup.validate(), ArgumentError);
}

TEST_CASE("synthetic scenes are deterministic and valid") {
  const RgbdSample a = synth_scene(11, 32, 32, 3);
  const RgbdSample b = synth_scene(11, 32, 32, 3);
  CHECK(bit_equal(a.rgb, b.rgb));
  CHECK(bit_equal(a.depth, b.depth));
  CHECK_FALSE(bit_equal(a.depth, synth_scene(12, 32, 32, 3).depth));
  CHECK_NOTHROW(a.validate());
  for (Real m : a.mask.data()) CHECK(m == 1.0);
  for (Real d : a.depth.data()) {
    CHECK(d >= 1.0);
    CHECK(d <= 5.0);
  }
  CHECK_THROWS_AS(synth_scene(1, 32, 32, 0), ArgumentError);
  CHECK_THROWS_AS(synth_scene(1, 30, 32, 1), ArgumentError);
}

TEST_CASE("synthetic depth is the nearest covering surface") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SceneLayout layout = random_layout(seed, 32, 48, 4);
    const RgbdSample s = render_scene(layout);
    for (std::size_t i = 0; i < 32; ++i) {
      for (std::size_t j = 0; j < 48; ++j) {
        Real nearest = layout.background_depth(i);
        for (const SceneObject& o : layout.objects) {
          if (i >= o.top && i < o.top + o.height && j >= o.left && j < o.left + o.width) {
            nearest = std::min(nearest, o.depth);
          }
        }
        REQUIRE(s.depth.at(i * 48 + j) == std::round(nearest * 1000.0) / 1000.0);
      }
    }
  }
}

TEST_CASE("one object gives one rectangle in front of the background") {
  const SceneLayout layout = random_layout(4, 32, 32, 1);
  const RgbdSample s = render_scene(layout);
  std::size_t top = 32, left = 32, bottom = 0, right = 0, count = 0;
  for (std::size_t i = 0; i < 32; ++i) {
    for (std::size_t j = 0; j < 32; ++j) {
      if (s.depth.at(i * 32 + j) != std::round(layout.background_depth(i) * 1000.0) / 1000.0) {
        top = std::min(top, i);
        left = std::min(left, j);
        bottom = std::max(bottom, i);
        right = std::max(right, j);
        ++count;
      }
    }
  }
  CHECK(count == (bottom - top + 1) * (right - left + 1));
  CHECK(top == layout.objects[0].top);
  CHECK(left == layout.objects[0].left);
  CHECK(count == layout.objects[0].height * layout.objects[0].width);
}

TEST_CASE("non-overlapping objects give one depth mode each") {
  SceneLayout layout;
  layout.height = 32;
  layout.width = 32;
  layout.background_bottom = 2.75;
  layout.background_top = 4.8;
  layout.objects = {{0, 0, 8, 8, 1.2, {}}, {10, 10, 5, 9, 1.7, {}}, {20, 2, 6, 20, 2.2, {}}};
  const RgbdSample s = render_scene(layout);
  std::set<Real> background;
  for (std::size_t i = 0; i < 32; ++i) {
    background.insert(std::round(layout.background_depth(i) * 1000.0) / 1000.0);
  }
  std::set<Real> foreground;
  for (Real d : s.depth.data()) {
    if (background.count(d) == 0) foreground.insert(d);
  }
  CHECK(foreground == std::set<Real>{1.2, 1.7, 2.2});
}

TEST_CASE("synthetic dataset files reload to the in-memory samples") {
  const fs::path dir = fresh_dir("synthset");
  SynthOptions opt;
  opt.count = 12;
  opt.height = 16;
  opt.width = 32;
  std::vector<Split> splits;
  const auto samples = synth_dataset(opt, &splits);
  CHECK(std::count(splits.begin(), splits.end(), Split::kTest) == 3);
  const DatasetManifest m = write_synth_dataset(opt, dir);
  CHECK(m.records.size() == 12);
  const auto train = load_split(DatasetManifest::load(dir / "manifest.json"), Split::kTrain);
  REQUIRE(train.size() == 9);
  for (std::size_t i = 0; i < train.size(); ++i) {
    CHECK(bit_equal(train[i].rgb, samples[i].rgb));
    CHECK(bit_equal(train[i].depth, samples[i].depth));
    CHECK(train[i].scene_id == samples[i].scene_id);
  }
  const fs::path again = fresh_dir("synthset2");
  write_synth_dataset(opt, again);
  for (const ManifestRecord& r : m.records) {
    CHECK(slurp(dir / r.rgb) == slurp(again / r.rgb));
    CHECK(slurp(dir / r.depth) == slurp(again / r.depth));
  }
  CHECK(slurp(dir / "manifest.json") == slurp(again / "manifest.json"));
}
