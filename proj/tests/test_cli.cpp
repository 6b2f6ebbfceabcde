#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pointseg/png_io.hpp"
#include "pointseg/rng.hpp"
#include "pointseg/tensor.hpp"

using namespace pointseg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const char* tag) {
    path = fs::temp_directory_path() /
           (std::string("pointseg_cli_") + tag + "_" +
            std::to_string(rng::mix64(reinterpret_cast<std::uintptr_t>(this))));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string binary_path() {
  const char* env = std::getenv("POINTSEG_BIN");
  REQUIRE_MESSAGE(env != nullptr, "POINTSEG_BIN must point at the CLI binary");
  return env;
}

int run(const std::string& args) {
  const std::string cmd = binary_path() + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

// Micro config shared by the CLI runs; written once per temp dir.
fs::path write_micro_config(const fs::path& dir) {
  const json cfg = {
      {"seed", 9},
      {"phantom",
       {{"height", 32}, {"width", 32}, {"count", 8}, {"points", 9},
        {"radius_in_range", {4.0, 5.0}}, {"radius_out_range", {8.0, 10.0}},
        {"center_jitter", 1.0}}},
      {"splits", {{"ratios", {0.5, 0.25, 0.25}}}},
      {"encoder", {{"dim", 16}, {"heads", 2}, {"layers", 1}, {"strides", {4, 8}}}},
      {"tracker", {{"refine_layers", 2}, {"grid", 3}}},
      {"fusion", {{"layers", 2}}},
      {"loss", {{"mask_layer_weights", {0.5, 1.0}}}},
      {"train", {{"epochs", 1}, {"min_epochs", 1}}},
  };
  const fs::path p = dir / "micro.json";
  std::ofstream f(p);
  f << cfg.dump(2);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("phantom generation is re-runnable with identical outputs") {
  TempDir tmp("determ");
  const auto cfg = write_micro_config(tmp.path);
  const std::string base = " phantom --config " + cfg.string() + " --seed 3 --count 3 --out ";
  CHECK(run(base + (tmp.path / "a").string()) == 0);
  CHECK(run(base + (tmp.path / "b").string()) == 0);
  for (const char* f :
       {"clip_000000/frames.bin", "clip_000000/tracks.bin", "clip_000002/masks.bin",
        "splits.json"})
    CHECK(slurp(tmp.path / "a" / f) == slurp(tmp.path / "b" / f));
}

TEST_CASE("ground truth evaluated as its own prediction scores mDice 100, HD95 0") {
  TempDir tmp("self");
  const auto cfg = write_micro_config(tmp.path);
  REQUIRE(run("phantom --config " + cfg.string() + " --count 2 --out " +
              (tmp.path / "ds").string()) == 0);
  // evaluate every split so both clips are covered
  for (const char* split : {"train", "val", "test"}) {
    const fs::path out = tmp.path / (std::string("eval_") + split);
    REQUIRE(run("eval --config " + cfg.string() + " --predictions " +
                (tmp.path / "ds").string() + " --data " + (tmp.path / "ds").string() +
                " --split " + split + " --out " + out.string()) == 0);
    const json rep = json::parse(slurp(out / "report.json"));
    for (const auto& clip : rep.at("per_clip")) {
      CHECK(clip.at("mdice").get<double>() == 100.0);
      CHECK(clip.at("hd95").get<double>() == 0.0);
    }
  }
}

TEST_CASE("full CLI pipeline: phantom -> train both stages -> eval -> infer -> ablate") {
  TempDir tmp("pipeline");
  const auto cfg = write_micro_config(tmp.path);
  const std::string c = " --config " + cfg.string();

  REQUIRE(run("phantom" + c + " --out " + (tmp.path / "ds").string()) == 0);

  REQUIRE(run("train" + c + " --stage tracker --data " + (tmp.path / "ds").string() +
              " --out " + (tmp.path / "trk").string()) == 0);
  REQUIRE(fs::exists(tmp.path / "trk" / "checkpoint_best.ckpt"));

  REQUIRE(run("train" + c + " --stage segmenter --tracker-checkpoint " +
              (tmp.path / "trk" / "checkpoint_best.ckpt").string() + " --data " +
              (tmp.path / "ds").string() + " --out " + (tmp.path / "seg").string()) == 0);

  SUBCASE("eval emits a report with the resolved config and a table") {
    REQUIRE(run("eval" + c + " --checkpoint " +
                (tmp.path / "seg" / "checkpoint_best.ckpt").string() + " --data " +
                (tmp.path / "ds").string() + " --split test --out " +
                (tmp.path / "eval").string()) == 0);
    const json rep = json::parse(slurp(tmp.path / "eval" / "report.json"));
    CHECK(rep.contains("per_clip"));
    CHECK(rep.at("config").at("seed") == 9);  // full config echo
    CHECK(fs::exists(tmp.path / "eval" / "report.txt"));
  }

  SUBCASE("infer writes prediction clip and overlays") {
    const auto ids = [&]() {
      std::vector<std::string> out;
      for (const auto& e : fs::directory_iterator(tmp.path / "ds"))
        if (e.is_directory()) out.push_back(e.path().filename().string());
      std::sort(out.begin(), out.end());
      return out;
    }();
    REQUIRE(run("infer" + c + " --checkpoint " +
                (tmp.path / "seg" / "checkpoint_best.ckpt").string() + " --clip " +
                (tmp.path / "ds" / ids[0]).string() + " --out " +
                (tmp.path / "inf").string()) == 0);
    CHECK(fs::exists(tmp.path / "inf" / "prediction" / "masks.bin"));
    CHECK(fs::exists(tmp.path / "inf" / "prediction" / "tracks.bin"));
    CHECK(fs::exists(tmp.path / "inf" / "prediction" / "visibility.bin"));
    CHECK(fs::exists(tmp.path / "inf" / "overlay_000.png"));
    // PNG magic bytes
    const std::string png = slurp(tmp.path / "inf" / "overlay_000.png");
    REQUIRE(png.size() > 8);
    CHECK(static_cast<unsigned char>(png[0]) == 0x89);
    CHECK(png.substr(1, 3) == "PNG");
  }

  SUBCASE("ablate emits the five-row table") {
    REQUIRE(run("ablate" + c + " --tracker-checkpoint " +
                (tmp.path / "trk" / "checkpoint_best.ckpt").string() + " --data " +
                (tmp.path / "ds").string() + " --out " + (tmp.path / "abl").string()) == 0);
    const json table = json::parse(slurp(tmp.path / "abl" / "ablation.json"));
    REQUIRE(table.size() == 5);
    CHECK(table[0].at("points") == false);
    CHECK(table[4].at("points") == true);
    CHECK(table[4].at("reference") == true);
    for (const auto& row : table) {
      CHECK(row.contains("mdice"));
      CHECK(row.contains("hd95"));
      CHECK(row.contains("p_value"));
      CHECK(row.contains("config_hash"));
    }
  }
}

TEST_CASE("error paths map to distinct exit codes") {
  TempDir tmp("errors");
  const auto cfg = write_micro_config(tmp.path);
  const std::string c = " --config " + cfg.string();
  REQUIRE(run("phantom" + c + " --count 4 --out " + (tmp.path / "ds").string()) == 0);

  SUBCASE("unknown override key -> config error (2)") {
    CHECK(run("phantom" + c + " --override nope.key=1 --out " + (tmp.path / "x").string()) == 2);
  }
  SUBCASE("missing dataset -> io error (3)") {
    CHECK(run("train" + c + " --stage tracker --data " + (tmp.path / "absent").string() +
              " --out " + (tmp.path / "t").string()) == 3);
  }
  SUBCASE("segmenter training without a tracker checkpoint -> config error (2)") {
    CHECK(run("train" + c + " --stage segmenter --data " + (tmp.path / "ds").string() +
              " --out " + (tmp.path / "t").string()) == 2);
  }
  SUBCASE("tracks-less dataset -> config error (2)") {
    // strip tracks: rewrite meta.json flags
    for (const auto& e : fs::directory_iterator(tmp.path / "ds")) {
      if (!e.is_directory()) continue;
      const auto meta_path = e.path() / "meta.json";
      json meta = json::parse(slurp(meta_path));
      meta["has_tracks"] = false;
      std::ofstream f(meta_path);
      f << meta.dump(2);
    }
    CHECK(run("train" + c + " --stage tracker --data " + (tmp.path / "ds").string() +
              " --out " + (tmp.path / "t").string()) == 2);
  }
  SUBCASE("stage mismatch -> stage error (5)") {
    REQUIRE(run("train" + c + " --stage tracker --data " + (tmp.path / "ds").string() +
                " --out " + (tmp.path / "trk").string()) == 0);
    CHECK(run("infer" + c + " --checkpoint " +
              (tmp.path / "trk" / "checkpoint_best.ckpt").string() + " --clip " +
              (tmp.path / "ds" / "clip_000000").string() + " --out " +
              (tmp.path / "inf").string()) == 5);
  }
}

TEST_CASE("overlay colors follow the three-color rule on a handmade 4x4 case") {
  Tensor frame(Shape{4, 4}, 0.5);
  Tensor pred(Shape{4, 4}), gt(Shape{4, 4});
  pred.at({0, 0}) = 1.0;             // prediction only -> red
  gt.at({1, 1}) = 1.0;               // ground truth only -> green
  pred.at({2, 2}) = gt.at({2, 2}) = 1.0;  // overlap -> yellow
  const auto rgb = png::overlay_rgb(frame, pred, gt);
  auto px = [&](std::int64_t y, std::int64_t x) {
    return std::array<int, 3>{rgb[static_cast<std::size_t>(3 * (y * 4 + x))],
                              rgb[static_cast<std::size_t>(3 * (y * 4 + x) + 1)],
                              rgb[static_cast<std::size_t>(3 * (y * 4 + x) + 2)]};
  };
  CHECK(px(0, 0) == std::array<int, 3>{255, 0, 0});
  CHECK(px(1, 1) == std::array<int, 3>{0, 255, 0});
  CHECK(px(2, 2) == std::array<int, 3>{255, 255, 0});
  CHECK(px(3, 3) == std::array<int, 3>{128, 128, 128});  // background gray
}
