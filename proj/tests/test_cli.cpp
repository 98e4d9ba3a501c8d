#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "doctest.h"
#include "latent_depth/checkpoint.hpp"
#include "latent_depth/cli.hpp"
#include "latent_depth/dataset.hpp"
#include "latent_depth/image_io.hpp"
#include "latent_depth/metrics.hpp"
#include "latent_depth/synth.hpp"
#include "latent_depth/tensor.hpp"

using namespace latent_depth;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("latent_depth_cli_" + name);
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

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

std::string s(const fs::path& p) { return p.string(); }

// 8 scenes of 16x16 (6 train, 2 test).
fs::path tiny_dataset(const fs::path& root) {
  const fs::path dir = root / "data";
  const Run r = cli({"gen-synth", "--out-dir", s(dir), "--count", "8", "--size", "16x16",
                     "--objects", "2", "--seed", "3"});
  REQUIRE(r.code == kExitOk);
  return dir;
}

std::vector<std::string> tiny_train(const std::string& stage, const fs::path& data,
                                    const fs::path& ckdir) {
  return {"train-" + stage, "--data", s(data), "--steps", "4", "--batch-size", "3",
          "--base-width", "2", "--bottleneck-blocks", "1", "--seed", "5",
          "--checkpoint-dir", s(ckdir), "--checkpoint-every", "2"};
}

std::vector<std::string> with(std::vector<std::string> args,
                              std::initializer_list<std::string> extra) {
  args.insert(args.end(), extra);
  return args;
}

}  // namespace

TEST_CASE("report reproduces the comparison table") {
  const fs::path dir = fresh_dir("report");
  const Run r = cli({"report", "--table2", "--out", s(dir / "r.json")});
  REQUIRE(r.code == kExitOk);
  const nlohmann::json j = read_json(dir / "r.json");
  const std::pair<const char*, Real> expected[] = {
      {"baseline 1", 54.13}, {"baseline 2", 8.37}, {"baseline 3", 29.49}};
  REQUIRE(j["baselines"].size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& row = j["baselines"][i];
    CHECK(row["method"] == expected[i].first);
    CHECK(std::abs(row["improvement_percent"].get<Real>() - expected[i].second) <= 0.01);
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.2f", row["improvement_percent"].get<Real>());
    CHECK(r.out.find(buf) != std::string::npos);
  }
  CHECK(j["baselines"][0]["rmse"].get<Real>() == 0.907);
  CHECK(j["baselines"][1]["rmse"].get<Real>() == 0.454);
  CHECK(j["baselines"][2]["rmse"].get<Real>() == 0.590);
  CHECK(r.out.find("0.416") != std::string::npos);
}

TEST_CASE("report with an overridden value recomputes every row") {
  const fs::path dir = fresh_dir("report_ours");
  REQUIRE(cli({"report", "--table2", "--ours", "0.5", "--out", s(dir / "r.json")}).code == 0);
  const nlohmann::json j = read_json(dir / "r.json");
  CHECK(j["ours"].get<Real>() == 0.5);
  for (const auto& row : j["baselines"]) {
    CHECK(row["improvement_percent"].get<Real>() ==
          relative_improvement(row["rmse"].get<Real>(), 0.5));
  }
  CHECK(j["baselines"][1]["improvement_percent"].get<Real>() < 0.0);
}

TEST_CASE("usage errors exit 1") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"no-such-command"}).code == kExitUsage);
  CHECK(cli({"report"}).code == kExitUsage);
  CHECK(cli({"report", "--table2", "--bogus"}).code == kExitUsage);
  CHECK(cli({"gen-synth"}).code == kExitUsage);
  CHECK(cli({"gradcheck", "--scale", "huge"}).code == kExitUsage);
  CHECK(cli({"eval", "--model", "m.ckpt"}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
  CHECK(cli({"train-color", "--help"}).code == kExitOk);
}

TEST_CASE("gen-synth writes a manifest and is deterministic") {
  const fs::path dir = fresh_dir("gen");
  const Run a = cli({"gen-synth", "--out-dir", s(dir / "a"), "--count", "64", "--size", "32x32",
                     "--out", s(dir / "a.json")});
  REQUIRE(a.code == kExitOk);
  const DatasetManifest m = DatasetManifest::load(dir / "a" / "manifest.json");
  CHECK(m.records.size() == 64);
  CHECK(m.indices(Split::kTest).size() == 16);
  std::size_t ppm = 0, pgm = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    ppm += e.path().extension() == ".ppm";
    pgm += e.path().extension() == ".pgm";
  }
  CHECK(ppm == 64);
  CHECK(pgm == 64);
  CHECK(read_json(dir / "a.json")["count"] == 64);

  REQUIRE(cli({"gen-synth", "--out-dir", s(dir / "b"), "--count", "64", "--size", "32x32"}).code ==
          kExitOk);
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    const fs::path other = dir / "b" / e.path().filename();
    if (e.path().filename() == "manifest.json") continue;
    CHECK_MESSAGE(slurp(e.path()) == slurp(other), e.path().filename().string());
  }
  CHECK(m.records.size() == DatasetManifest::load(dir / "b" / "manifest.json").records.size());

  const RgbdSample first = load_rgbd_pair(m.resolve(m.records[0].rgb),
                                          m.resolve(m.records[0].depth));
  CHECK(first.height() == 32);
  CHECK(first.width() == 32);
}

TEST_CASE("gen-synth rejects sizes not divisible by 16 without writing") {
  const fs::path dir = fresh_dir("gen_bad");
  CHECK(cli({"gen-synth", "--out-dir", s(dir / "x"), "--size", "30x30", "--out",
             s(dir / "x.json")})
            .code == kExitUsage);
  CHECK(cli({"gen-synth", "--out-dir", s(dir / "x"), "--size", "32"}).code == kExitUsage);
  CHECK(cli({"gen-synth", "--out-dir", s(dir / "x"), "--test-fraction", "1.5"}).code ==
        kExitUsage);
  CHECK_FALSE(fs::exists(dir / "x"));
  CHECK_FALSE(fs::exists(dir / "x.json"));
}

TEST_CASE("gen-synth into an unwritable location exits 2") {
  const fs::path dir = fresh_dir("gen_unwritable");
  std::ofstream(dir / "file") << "x";
  const Run r = cli({"gen-synth", "--out-dir", s(dir / "file" / "sub"), "--count", "2",
                     "--size", "16x16"});
  CHECK(r.code == kExitRuntime);
  CHECK_FALSE(r.err.empty());
}

TEST_CASE("training, evaluation and prediction pipeline") {
  const fs::path dir = fresh_dir("pipeline");
  const fs::path data = tiny_dataset(dir);

  const Run g = cli(with(tiny_train("guided", data, dir / "ck"), {"--out", s(dir / "g.json")}));
  REQUIRE_MESSAGE(g.code == kExitOk, g.err);
  const nlohmann::json gj = read_json(dir / "g.json");
  CHECK(gj["steps"] == 4);
  CHECK(gj["eval_split"] == "test");
  CHECK(gj["eval"]["n_images"] == 2);
  CHECK(fs::exists(dir / "ck" / "guided_step_2.ckpt"));
  CHECK(fs::exists(dir / "ck" / "guided_loss.csv"));
  const fs::path guided = dir / "ck" / "guided_final.ckpt";
  const std::string guided_bytes = slurp(guided);

  const Run c = cli(with(tiny_train("color", data, dir / "ck"),
                         {"--guided", s(guided), "--lr", "1e-4", "--w-latent", "0.5", "--layers",
                          "deepest", "--log", s(dir / "logs" / "c.csv"), "--out",
                          s(dir / "c.json")}));
  REQUIRE_MESSAGE(c.code == kExitOk, c.err);
  CHECK(slurp(guided) == guided_bytes);
  const nlohmann::json cj = read_json(dir / "c.json");
  CHECK(cj["config"]["weights"]["latent"].get<Real>() == 0.5);
  CHECK(cj["config"]["layers"] == "4");
  CHECK(fs::exists(dir / "logs" / "c.csv"));
  const fs::path color = dir / "ck" / "color_final.ckpt";

  SUBCASE("eval matches the run summary and reports per-image errors") {
    const Run e = cli({"eval", "--model", s(color), "--data", s(data / "manifest.json"),
                       "--per-image", "--out", s(dir / "e.json")});
    REQUIRE(e.code == kExitOk);
    const nlohmann::json ej = read_json(dir / "e.json");
    CHECK(ej["rmse"].get<Real>() == cj["eval"]["rmse"].get<Real>());
    CHECK(ej["per_image"].size() == 2);
    const Run t = cli({"eval", "--model", s(color), "--data", s(data), "--split", "train",
                       "--out", s(dir / "t.json")});
    REQUIRE(t.code == kExitOk);
    CHECK(read_json(dir / "t.json")["n_images"] == 6);
  }

  SUBCASE("predict writes millimetres that reload as metres") {
    const DatasetManifest m = DatasetManifest::load(data / "manifest.json");
    const fs::path rgb = m.resolve(m.records[0].rgb);
    const Run p = cli({"predict", "--model", s(color), "--rgb", s(rgb), "--out",
                       s(dir / "p.pgm"), "--json", s(dir / "p.json")});
    REQUIRE_MESSAGE(p.code == kExitOk, p.err);
    const Checkpoint ck = load_checkpoint(color);
    const Tensor expected = ck.model.predict(read_ppm(rgb));
    const Gray16 raw = read_pgm16(dir / "p.pgm");
    REQUIRE(raw.height == 16);
    REQUIRE(raw.width == 16);
    for (std::size_t i = 0; i < raw.pixels.size(); ++i) {
      const Real mm = std::round(expected.at(i) * 1000.0);
      CHECK(raw.pixels[i] == static_cast<std::uint16_t>(std::clamp(mm, 0.0, 65535.0)));
    }
    const RgbdSample back = load_rgbd_pair(rgb, dir / "p.pgm");
    for (std::size_t i = 0; i < raw.pixels.size(); ++i) {
      if (raw.pixels[i] > 0) CHECK(back.depth.at(i) == raw.pixels[i] / 1000.0);
    }
  }

  SUBCASE("predict errors exit 2") {
    const DatasetManifest m = DatasetManifest::load(data / "manifest.json");
    const fs::path rgb = m.resolve(m.records[0].rgb);
    CHECK(cli({"predict", "--model", s(guided), "--rgb", s(rgb), "--out", s(dir / "x.pgm")})
              .code == kExitRuntime);
    write_ppm(dir / "small.ppm", Tensor::full({3, 8, 8}, 0.5));
    CHECK(cli({"predict", "--model", s(color), "--rgb", s(dir / "small.ppm"), "--out",
               s(dir / "x.pgm")})
              .code == kExitRuntime);
    std::string bytes = slurp(color);
    bytes[bytes.size() / 2] ^= 0x5a;
    std::ofstream(dir / "corrupt.ckpt", std::ios::binary) << bytes;
    const Run bad = cli({"predict", "--model", s(dir / "corrupt.ckpt"), "--rgb", s(rgb),
                         "--out", s(dir / "x.pgm")});
    CHECK(bad.code == kExitRuntime);
    CHECK_FALSE(bad.err.empty());
    CHECK_FALSE(fs::exists(dir / "x.pgm"));
  }

  SUBCASE("larger inputs are resized to the model size") {
    write_ppm(dir / "big.ppm", Tensor::full({3, 48, 32}, 0.25));
    REQUIRE(cli({"predict", "--model", s(color), "--rgb", s(dir / "big.ppm"), "--out",
                 s(dir / "big.pgm")})
                .code == kExitOk);
    const Gray16 raw = read_pgm16(dir / "big.pgm");
    CHECK(raw.height == 16);
    CHECK(raw.width == 16);
  }
}

TEST_CASE("training commands are idempotent") {
  const fs::path dir = fresh_dir("idempotent");
  const fs::path data = tiny_dataset(dir);
  for (const char* run : {"a", "b"}) {
    REQUIRE(cli(tiny_train("guided", data, dir / run)).code == kExitOk);
    REQUIRE(cli(with(tiny_train("color", data, dir / run),
                     {"--guided", s(dir / "a" / "guided_final.ckpt"), "--lr", "1e-4"}))
                .code == kExitOk);
  }
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    names.insert(e.path().filename().string());
    CHECK_MESSAGE(slurp(e.path()) == slurp(dir / "b" / e.path().filename()),
                  e.path().filename().string());
  }
  CHECK(names == std::set<std::string>{"guided_step_2.ckpt", "guided_step_4.ckpt",
                                       "guided_final.ckpt", "guided_loss.csv",
                                       "color_step_2.ckpt", "color_step_4.ckpt",
                                       "color_final.ckpt", "color_loss.csv"});
}

TEST_CASE("training usage errors write nothing") {
  const fs::path dir = fresh_dir("train_usage");
  const fs::path data = tiny_dataset(dir);
  const fs::path ck = dir / "ck";
  const auto base = tiny_train("guided", data, ck);
  CHECK(cli(with(base, {"--lr", "-1"})).code == kExitUsage);
  CHECK(cli(with(base, {"--momentum", "1"})).code == kExitUsage);
  CHECK(cli(with(base, {"--batch-size", "0"})).code == kExitUsage);
  CHECK(cli(with(base, {"--split", "validation"})).code == kExitUsage);
  CHECK(cli(with(base, {"--resize", "20x20"})).code == kExitUsage);
  CHECK(cli(with(base, {"--out", s(dir / "o.json"), "--steps", "x"})).code == kExitUsage);
  const auto color = tiny_train("color", data, ck);
  CHECK(cli(with(color, {"--guided", "g.ckpt", "--layers", "7"})).code == kExitUsage);
  CHECK(cli(with(color, {"--guided", "g.ckpt", "--w-latent", "-1"})).code == kExitUsage);
  CHECK(cli(color).code == kExitUsage);
  CHECK_FALSE(fs::exists(ck));
  CHECK_FALSE(fs::exists(dir / "o.json"));
}

TEST_CASE("training runtime errors exit 2") {
  const fs::path dir = fresh_dir("train_runtime");
  const fs::path data = tiny_dataset(dir);
  CHECK(cli(tiny_train("guided", dir / "missing", dir / "ck")).code == kExitRuntime);
  CHECK(cli(with(tiny_train("color", data, dir / "ck"), {"--guided", s(dir / "none.ckpt")}))
            .code == kExitRuntime);
  CHECK(cli(with(tiny_train("guided", data, dir / "ck"), {"--resize", "32x32"})).code ==
        kExitRuntime);
}

TEST_CASE("gradcheck passes, reports every operation and catches a corrupted backward") {
  const fs::path dir = fresh_dir("gradcheck");
  const Run ok = cli({"gradcheck", "--seeds", "2", "--out", s(dir / "ok.json")});
  REQUIRE_MESSAGE(ok.code == kExitOk, ok.out);
  const nlohmann::json j = read_json(dir / "ok.json");
  CHECK(j["passed"] == true);
  std::set<std::string> ops;
  for (const auto& c : j["checks"]) ops.insert(c["op"].get<std::string>());
  for (const char* op : {"conv2d", "batch_norm2d", "relu", "add", "sub", "mul", "scale",
                         "reshape", "bilinear_upsample_x2", "reduce", "spatial_gradients",
                         "res_block", "data_loss", "image_gradient_loss", "latent_loss",
                         "feature_gradient_loss", "total_loss"}) {
    CHECK_MESSAGE(ops.count(op) == 1, op);
  }

  const Run bad = cli({"gradcheck", "--seeds", "2", "--inject-fault", "conv2d", "--out",
                       s(dir / "bad.json")});
  CHECK(bad.code == kExitVerification);
  CHECK(bad.err.find("conv2d") != std::string::npos);
  CHECK(read_json(dir / "bad.json")["passed"] == false);
  CHECK(backward_fault().empty());
}

TEST_CASE("the installed binary reports exit codes") {
  const char* exe = std::getenv("LATENT_DEPTH_CLI");
  if (exe == nullptr) {
    MESSAGE("LATENT_DEPTH_CLI not set; skipping");
    return;
  }
  const fs::path dir = fresh_dir("binary");
  const auto status = [&](const std::string& args) {
    const std::string cmd = std::string(exe) + " " + args + " > " + s(dir / "log") + " 2>&1";
    const int raw = std::system(cmd.c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  CHECK(status("report --table2") == 0);
  CHECK(status("gen-synth --out-dir " + s(dir / "d") + " --size 30x30") == 1);
  CHECK(status("predict --model " + s(dir / "none.ckpt") + " --rgb x.ppm --out y.pgm") == 2);
  CHECK(status("gradcheck --seeds 1 --inject-fault relu") == 3);
}
